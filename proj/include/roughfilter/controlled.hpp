#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "errors.hpp"
#include "reduce.hpp"
#include "roughpath.hpp"

namespace roughfilter {

// Integrand (phi, phi') relative to a rough path of dimension d with values in R^m.
// values[(i*m + a)*d + k]           = phi^a_k at node i
// gubinelli[((i*m + a)*d + l)*d + k] = phi'^a_{lk}, paired with YY^{kl}
struct ControlledPath {
  TimeGrid grid;
  std::size_t out_dim = 1;
  std::size_t path_dim = 1;
  std::vector<double> values;
  std::vector<double> gubinelli;

  ControlledPath() = default;
  ControlledPath(TimeGrid g, std::size_t m, std::size_t d)
      : grid(g),
        out_dim(m),
        path_dim(d),
        values(g.nodes() * m * d, 0.0),
        gubinelli(g.nodes() * m * d * d, 0.0) {}

  double& value(std::size_t i, std::size_t a, std::size_t k) {
    return values[(i * out_dim + a) * path_dim + k];
  }
  double value(std::size_t i, std::size_t a, std::size_t k) const {
    return values[(i * out_dim + a) * path_dim + k];
  }
  double& derivative(std::size_t i, std::size_t a, std::size_t l, std::size_t k) {
    return gubinelli[((i * out_dim + a) * path_dim + l) * path_dim + k];
  }
  double derivative(std::size_t i, std::size_t a, std::size_t l, std::size_t k) const {
    return gubinelli[((i * out_dim + a) * path_dim + l) * path_dim + k];
  }
};

inline void check_compatible(const ControlledPath& c, const RoughPath& rp) {
  if (!(c.grid == rp.grid()) || c.path_dim != rp.dim())
    throw InputError("controlled path and rough path disagree on grid or dimension");
  const std::size_t n = rp.grid().nodes();
  if (c.values.size() != n * c.out_dim * c.path_dim ||
      c.gubinelli.size() != n * c.out_dim * c.path_dim * c.path_dim)
    throw InputError("controlled path storage does not match its dimensions");
}

// phi = Dg(Y) with Gubinelli derivative D^2 g(Y), for scalar g on R^d.
inline ControlledPath controlled_gradient(
    const RoughPath& rp,
    const std::function<void(std::span<const double>, std::span<double>)>& grad,
    const std::function<void(std::span<const double>, std::span<double>)>& hess) {
  const std::size_t d = rp.dim();
  ControlledPath c(rp.grid(), 1, d);
  std::vector<double> g(d), H(d * d);
  for (std::size_t i = 0; i <= rp.steps(); ++i) {
    grad(rp.value(i), g);
    hess(rp.value(i), H);
    for (std::size_t k = 0; k < d; ++k) c.value(i, 0, k) = g[k];
    for (std::size_t l = 0; l < d; ++l)
      for (std::size_t k = 0; k < d; ++k) c.derivative(i, 0, l, k) = H[l * d + k];
  }
  return c;
}

// Cumulative compensated sums I_k = sum_{i<k} phi_i dY_i + phi'_i YY_i, I_0 = 0.
inline std::vector<double> rough_integral(const ControlledPath& c, const RoughPath& rp) {
  check_compatible(c, rp);
  const std::size_t m = c.out_dim, d = c.path_dim, N = rp.steps();
  std::vector<double> out((N + 1) * m, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    const auto area = rp.second(i);
    for (std::size_t a = 0; a < m; ++a) {
      double inc = 0.0;
      for (std::size_t k = 0; k < d; ++k) inc += c.value(i, a, k) * rp.increment(i, k);
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t l = 0; l < d; ++l) inc += c.derivative(i, a, l, k) * area[k * d + l];
      out[(i + 1) * m + a] = out[i * m + a] + inc;
    }
  }
  return out;
}

// Left-point sums of g_i : (B_{i+1} - B_i); g has m*d*d entries per node, B d*d per node.
inline std::vector<double> young_integral(std::span<const double> g,
                                          std::span<const double> bracket_nodes, std::size_t steps,
                                          std::size_t m, std::size_t d) {
  if (g.size() < steps * m * d * d || bracket_nodes.size() != (steps + 1) * d * d)
    throw InputError("young_integral: sizes do not match");
  std::vector<double> out((steps + 1) * m, 0.0);
  for (std::size_t i = 0; i < steps; ++i)
    for (std::size_t a = 0; a < m; ++a) {
      double inc = 0.0;
      for (std::size_t k = 0; k < d * d; ++k)
        inc += g[(i * m + a) * d * d + k] * (bracket_nodes[(i + 1) * d * d + k] - bracket_nodes[i * d * d + k]);
      out[(i + 1) * m + a] = out[i * m + a] + inc;
    }
  return out;
}

// Same, against the bracket increments stored in a rough path.
inline std::vector<double> young_integral(std::span<const double> g, const RoughPath& rp,
                                          std::size_t m) {
  const std::size_t d = rp.dim(), N = rp.steps();
  std::vector<double> nodes((N + 1) * d * d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < d * d; ++k)
      nodes[(i + 1) * d * d + k] = nodes[i * d * d + k] + rp.bracket(i)[k];
  return young_integral(g, nodes, N, m, d);
}

struct ExponentFit {
  double exponent = 0.0;
  std::vector<double> spans;      // time spans used
  std::vector<double> maxima;     // max norm per span
};

// Remainder R_ab = phi_b - phi_a - phi'_a dY_ab over dyadic spans; log-log slope of the maxima.
inline ExponentFit remainder_exponent(const ControlledPath& c, const RoughPath& rp) {
  check_compatible(c, rp);
  const std::size_t m = c.out_dim, d = c.path_dim, N = rp.steps();
  ExponentFit fit;
  std::vector<double> lx, ly;
  for (std::size_t S = 1; S <= N; S *= 2) {
    double worst = 0.0;
    for (std::size_t a = 0; a + S <= N; a += S) {
      const std::size_t b = a + S;
      double sq = 0.0;
      for (std::size_t o = 0; o < m; ++o)
        for (std::size_t l = 0; l < d; ++l) {
          double r = c.value(b, o, l) - c.value(a, o, l);
          for (std::size_t k = 0; k < d; ++k)
            r -= c.derivative(a, o, l, k) * (rp.value(b)[k] - rp.value(a)[k]);
          sq += r * r;
        }
      worst = std::max(worst, std::sqrt(sq));
    }
    fit.spans.push_back(S * rp.grid().dt());
    fit.maxima.push_back(worst);
    if (worst > 0) {
      lx.push_back(std::log(S * rp.grid().dt()));
      ly.push_back(std::log(worst));
    }
  }
  fit.exponent = lx.size() >= 2 ? least_squares(lx, ly).slope : std::numeric_limits<double>::infinity();
  return fit;
}

struct RateRow {
  std::size_t level = 0;
  std::size_t steps = 0;
  double diff = 0.0;        // |I^(N) - I^(N/2)| at T, NaN on the first row
  double local_rate = 0.0;  // log2(diff_prev / diff)
};

struct RateTable {
  std::vector<RateRow> rows;
  std::vector<double> terminal_values;
  double fitted_rate = 0.0;  // +inf when every difference is at rounding level
};

// levels[k] is the integrand and driver at the k-th dyadic refinement (coarsest first).
inline RateTable refine_convergence(const std::vector<ControlledPath>& integrands,
                                    const std::vector<RoughPath>& drivers) {
  if (integrands.size() != drivers.size()) throw InputError("refine_convergence: family sizes differ");
  if (integrands.size() < 3) throw InputError("refine_convergence needs at least 3 levels");
  RateTable table;
  std::vector<std::vector<double>> terminal;
  double scale = 0.0;
  for (std::size_t k = 0; k < drivers.size(); ++k) {
    const auto I = rough_integral(integrands[k], drivers[k]);
    const std::size_t m = integrands[k].out_dim;
    terminal.emplace_back(I.end() - static_cast<std::ptrdiff_t>(m), I.end());
    table.terminal_values.push_back(terminal.back()[0]);
    for (double v : terminal.back()) scale = std::max(scale, std::abs(v));
  }
  const double floor = 1e-13 * (1.0 + scale);
  std::vector<double> lx, ly;
  for (std::size_t k = 0; k < drivers.size(); ++k) {
    RateRow row;
    row.level = k;
    row.steps = drivers[k].steps();
    if (k == 0) {
      row.diff = std::numeric_limits<double>::quiet_NaN();
      row.local_rate = std::numeric_limits<double>::quiet_NaN();
    } else {
      double sq = 0.0;
      for (std::size_t a = 0; a < terminal[k].size(); ++a)
        sq += (terminal[k][a] - terminal[k - 1][a]) * (terminal[k][a] - terminal[k - 1][a]);
      row.diff = std::sqrt(sq);
      const double prev = table.rows.back().diff;
      row.local_rate = (k >= 2 && row.diff > floor && prev > floor)
                           ? std::log2(prev / row.diff)
                           : std::numeric_limits<double>::quiet_NaN();
      if (row.diff > floor) {
        lx.push_back(std::log2(static_cast<double>(row.steps)));
        ly.push_back(-std::log2(row.diff));
      }
    }
    table.rows.push_back(row);
  }
  table.fitted_rate = lx.size() >= 2 ? least_squares(lx, ly).slope
                                     : std::numeric_limits<double>::infinity();
  return table;
}

}  // namespace roughfilter
