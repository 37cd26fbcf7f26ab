#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "filter.hpp"
#include "io.hpp"
#include "operators.hpp"
#include "reduce.hpp"
#include "residuals.hpp"

namespace roughfilter {

// Uniform box [lo, hi] with K points per axis.
struct SpatialGrid {
  std::vector<double> lo, hi;
  std::size_t K = 2;

  std::size_t dim() const { return lo.size(); }
  std::size_t points() const {
    std::size_t g = 1;
    for (std::size_t a = 0; a < dim(); ++a) g *= K;
    return g;
  }
  double spacing(std::size_t a) const { return (hi[a] - lo[a]) / static_cast<double>(K - 1); }
  std::size_t index(std::size_t g, std::size_t a) const {
    for (std::size_t b = 0; b < a; ++b) g /= K;
    return g % K;
  }
  std::vector<double> point(std::size_t g) const {
    std::vector<double> x(dim());
    for (std::size_t a = 0; a < dim(); ++a) x[a] = lo[a] + spacing(a) * static_cast<double>(index(g, a));
    return x;
  }
  void check() const {
    if (lo.empty() || lo.size() != hi.size()) throw InputError("spatial grid bounds have mismatched dimensions");
    if (K < 2) throw InputError("spatial grid needs at least 2 points per axis");
    for (std::size_t a = 0; a < dim(); ++a)
      if (!(hi[a] > lo[a])) throw InputError("spatial grid needs hi > lo on every axis");
  }
};

// Corner indices and weights of multilinear interpolation at one point.
struct InterpStencil {
  std::vector<std::size_t> corners;
  std::vector<double> weights;
  bool clipped = false;
};

inline InterpStencil interp_stencil(const SpatialGrid& sg, std::span<const double> x) {
  const std::size_t d = sg.dim();
  std::vector<std::size_t> base(d);
  std::vector<double> frac(d);
  InterpStencil st;
  for (std::size_t a = 0; a < d; ++a) {
    const double h = sg.spacing(a);
    double u = (x[a] - sg.lo[a]) / h;
    if (u < 0.0 || u > static_cast<double>(sg.K - 1)) {
      st.clipped = true;
      u = std::clamp(u, 0.0, static_cast<double>(sg.K - 1));
    }
    auto i = static_cast<std::size_t>(std::floor(u));
    if (i >= sg.K - 1) i = sg.K - 2;
    base[a] = i;
    frac[a] = u - static_cast<double>(i);
  }
  const std::size_t n = std::size_t{1} << d;
  st.corners.resize(n);
  st.weights.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t g = 0, stride = 1;
    double w = 1.0;
    for (std::size_t a = 0; a < d; ++a) {
      const bool up = (c >> a) & 1U;
      g += (base[a] + (up ? 1 : 0)) * stride;
      w *= up ? frac[a] : 1.0 - frac[a];
      stride *= sg.K;
    }
    st.corners[c] = g;
    st.weights[c] = w;
  }
  return st;
}

// u at selected time nodes on a spatial grid, with MC standard errors and batch means.
struct GridFunction {
  SpatialGrid space;
  std::vector<std::size_t> time_index;  // grid node indices, increasing, last = N
  std::vector<double> time;
  std::size_t batches = 0;
  std::vector<double> values;       // [k*G + g]
  std::vector<double> stderrs;      // [k*G + g]
  std::vector<double> batch_means;  // [(k*G + g)*batches + b]
  std::size_t inner_paths = 0;
  std::size_t inner_exits = 0;      // inner terminal states outside the box
  std::size_t inner_total = 0;

  std::size_t slots() const { return time_index.size(); }
  double value(std::size_t k, std::size_t g) const { return values[k * space.points() + g]; }
  double stderr_at(std::size_t k, std::size_t g) const { return stderrs[k * space.points() + g]; }
  double batch(std::size_t k, std::size_t g, std::size_t b) const {
    return batch_means[(k * space.points() + g) * batches + b];
  }
  std::size_t slot_of(std::size_t node) const {
    for (std::size_t k = 0; k < time_index.size(); ++k)
      if (time_index[k] == node) return k;
    throw InputError("grid function has no slice at node " + std::to_string(node));
  }
  double interpolate(std::size_t k, std::span<const double> x, bool* clipped = nullptr) const {
    const auto st = interp_stencil(space, x);
    if (clipped) *clipped = st.clipped;
    double v = 0.0;
    for (std::size_t c = 0; c < st.corners.size(); ++c) v += st.weights[c] * value(k, st.corners[c]);
    return v;
  }
  bool box_warning(const Tolerances& tol = default_tolerances()) const {
    return inner_total > 0 &&
           static_cast<double>(inner_exits) > tol.box_exit_fraction * static_cast<double>(inner_total);
  }
};

// CSV `t,x_1..x_dx,u,stderr`.
inline void write_grid_function_csv(const GridFunction& u, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "t";
  for (std::size_t a = 1; a <= u.space.dim(); ++a) out << ",x_" << a;
  out << ",u,stderr\n";
  for (std::size_t k = 0; k < u.slots(); ++k)
    for (std::size_t g = 0; g < u.space.points(); ++g) {
      out << io::num(u.time[k]);
      for (double v : u.space.point(g)) out << "," << io::num(v);
      out << "," << io::num(u.value(k, g)) << "," << io::num(u.stderr_at(k, g)) << "\n";
    }
}

// Box from a pilot run: mean +/- half_width_std standard deviations of the terminal signal.
inline SpatialGrid auto_box(const Model& model, const RoughPath& rp, std::size_t K, std::size_t pilot,
                            std::uint64_t seed, std::size_t threads = 1,
                            const Tolerances& tol = default_tolerances()) {
  const std::size_t dx = model.coeffs.dx;
  struct Moments {
    std::size_t terminal = 0;
    std::vector<double> s1, s2;
    std::size_t n = 0;
    void begin_particle(std::size_t) { ++n; }
    void end_particle(std::size_t) {}
    void on_node(std::size_t, std::size_t i, std::span<const double> x, double, const CoeffPoint&) {
      if (i != terminal) return;
      for (std::size_t a = 0; a < x.size(); ++a) {
        s1[a] += x[a];
        s2[a] += x[a] * x[a];
      }
    }
    void merge(Moments&& o) {
      n += o.n;
      for (std::size_t a = 0; a < s1.size(); ++a) {
        s1[a] += o.s1[a];
        s2[a] += o.s2[a];
      }
    }
  };
  const Moments m = simulate_particles(model, rp, pilot, seed,
                                       Moments{rp.steps(), std::vector<double>(dx, 0.0),
                                               std::vector<double>(dx, 0.0), 0},
                                       threads);
  SpatialGrid sg;
  sg.K = K;
  for (std::size_t a = 0; a < dx; ++a) {
    const double n = static_cast<double>(m.n);
    const double mean = m.s1[a] / n;
    const double sd = std::sqrt(std::max(1e-12, m.s2[a] / n - mean * mean));
    sg.lo.push_back(mean - tol.box_half_width_std * sd);
    sg.hi.push_back(mean + tol.box_half_width_std * sd);
  }
  return sg;
}

inline std::vector<std::size_t> checkpoint_nodes(std::size_t N, std::size_t every) {
  if (every == 0 || N % every != 0) throw InputError("checkpoint spacing must divide the step count");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i <= N; i += every) out.push_back(i);
  return out;
}

// u_{t_k}(x_g) = mean over inner paths of phi(X_T) Z_T, started at (t_k, x_g) with Z = 1.
// Inner path m uses the Brownian stream (seed, m, step) at every start, so estimates at
// different grid points and time nodes share common random numbers. All phis share the paths.
inline std::vector<GridFunction> solve_backward_fk(const OperatorContext& ctx,
                                                   const std::vector<TestFunction>& phis,
                                                   const SpatialGrid& space,
                                                   std::vector<std::size_t> nodes, std::size_t M_inner,
                                                   std::uint64_t seed, std::size_t threads = 1,
                                                   std::size_t batches = kDefaultBatches) {
  const CoefficientSet& c = ctx.coeffs();
  const RoughPath& rp = ctx.driver();
  space.check();
  if (space.dim() != c.dx) throw InputError("spatial grid dimension differs from the signal dimension");
  if (M_inner < 2) throw InputError("Feynman-Kac solve needs at least 2 inner paths");
  if (phis.empty()) throw InputError("no test functions given");
  const std::size_t N = rp.steps();
  std::sort(nodes.begin(), nodes.end());
  nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
  if (nodes.empty() || nodes.back() > N) throw InputError("time nodes outside the grid");
  if (nodes.back() != N) nodes.push_back(N);
  batches = std::max<std::size_t>(1, std::min(batches, M_inner));

  const std::size_t G = space.points(), S = nodes.size(), F = phis.size();
  std::vector<GridFunction> out(F);
  for (auto& u : out) {
    u.space = space;
    u.time_index = nodes;
    for (std::size_t i : nodes) u.time.push_back(rp.grid().node(i));
    u.batches = batches;
    u.values.assign(S * G, 0.0);
    u.stderrs.assign(S * G, 0.0);
    u.batch_means.assign(S * G * batches, 0.0);
    u.inner_paths = M_inner;
  }
  std::vector<std::size_t> exits(S * G, 0);
  parallel_for(S * G, threads, [&](std::size_t task) {
    const std::size_t k = task / G, g = task % G;
    const std::vector<double> x = space.point(g);
    if (nodes[k] == N) {
      for (std::size_t f = 0; f < F; ++f) {
        const double v = phis[f].value(x);
        out[f].values[task] = v;
        for (std::size_t b = 0; b < batches; ++b) out[f].batch_means[task * batches + b] = v;
      }
      return;
    }
    std::vector<double> s1(F, 0.0), s2(F, 0.0), bs(F * batches, 0.0), term(F);
    std::vector<std::size_t> bn(batches, 0);
    ParticleWorkspace ws;
    std::size_t ex = 0;
    for (std::size_t m = 0; m < M_inner; ++m) {
      propagate_particle(c, rp, x, nodes[k], seed, m,
                         [&](std::size_t i, std::span<const double> xs, double z, const CoeffPoint&) {
                           if (i != N) return;
                           for (std::size_t f = 0; f < F; ++f) term[f] = phis[f].value(xs) * z;
                           for (std::size_t a = 0; a < xs.size(); ++a)
                             if (xs[a] < space.lo[a] || xs[a] > space.hi[a]) {
                               ++ex;
                               break;
                             }
                         },
                         ws);
      const std::size_t b = m * batches / M_inner;
      ++bn[b];
      for (std::size_t f = 0; f < F; ++f) {
        s1[f] += term[f];
        s2[f] += term[f] * term[f];
        bs[f * batches + b] += term[f];
      }
    }
    const double n = static_cast<double>(M_inner);
    for (std::size_t f = 0; f < F; ++f) {
      const double mean = s1[f] / n;
      out[f].values[task] = mean;
      out[f].stderrs[task] = std::sqrt(std::max(0.0, (s2[f] - n * mean * mean) / (n - 1.0)) / n);
      for (std::size_t b = 0; b < batches; ++b)
        out[f].batch_means[task * batches + b] = bs[f * batches + b] / static_cast<double>(bn[b]);
    }
    exits[task] = ex;
  });
  std::size_t total_exits = 0;
  for (auto e : exits) total_exits += e;
  for (auto& u : out) {
    u.inner_exits = total_exits;
    u.inner_total = M_inner * G * (S - 1);
  }
  return out;
}

inline GridFunction solve_backward_fk(const OperatorContext& ctx, const TestFunction& phi,
                                      const SpatialGrid& space, std::vector<std::size_t> nodes,
                                      std::size_t M_inner, std::uint64_t seed, std::size_t threads = 1) {
  return std::move(solve_backward_fk(ctx, std::vector<TestFunction>{phi}, space, std::move(nodes), M_inner,
                                     seed, threads)
                       .front());
}

// Largest |D^2 u| per slice from second differences (pure second derivatives per axis).
inline double max_second_difference(const GridFunction& u, std::size_t k, std::size_t axis) {
  const SpatialGrid& sg = u.space;
  const double h = sg.spacing(axis);
  std::size_t stride = 1;
  for (std::size_t b = 0; b < axis; ++b) stride *= sg.K;
  double best = 0.0;
  for (std::size_t g = 0; g < sg.points(); ++g) {
    const std::size_t i = sg.index(g, axis);
    if (i == 0 || i + 1 >= sg.K) continue;
    const double d2 = (u.value(k, g + stride) - 2.0 * u.value(k, g) + u.value(k, g - stride)) / (h * h);
    best = std::max(best, std::abs(d2));
  }
  return best;
}

struct DualityRow {
  std::size_t node = 0;
  double t = 0.0;
  double mu_u = 0.0;         // mu_t(u_t)
  double deviation = 0.0;    // mu_t(u_t) - mu_T(phi)
  double outer_stderr = 0.0; // paired over outer particles
  double inner_stderr = 0.0; // spread of the inner batch means
  double interpolation = 0.0;
  double budget = 0.0;
  bool pass = false;
};

struct DualityReport {
  std::string phi;
  double mu_T = 0.0;
  std::vector<DualityRow> rows;
  double max_deviation = 0.0;
  double budget_at_max = 0.0;
  std::size_t exits = 0, evaluations = 0;
  bool pass = false;
};

namespace detail {
// Per-particle interpolated u (and its batch versions) at the checkpoints, paired with
// phi(X_T) Z_T at the end of the particle.
struct DualityObserver {
  const std::vector<GridFunction>* us = nullptr;
  const std::vector<TestFunction>* phis = nullptr;
  std::size_t F = 0, S = 0, B = 0, N = 0;
  std::size_t count = 0, exits = 0, evaluations = 0;
  std::vector<double> sum_u, sum_d, sum_d2, sum_mass;  // [k*F + f], mass per k
  std::vector<double> sum_ub;                          // [(k*F + f)*B + b]
  std::vector<double> sum_T;                           // per f
  std::vector<double> cur_u, cur_ub;                   // per particle

  DualityObserver(const std::vector<GridFunction>& u, const std::vector<TestFunction>& p, std::size_t steps)
      : us(&u), phis(&p), F(u.size()), S(u.front().slots()), B(u.front().batches), N(steps),
        sum_u(S * F, 0.0), sum_d(S * F, 0.0), sum_d2(S * F, 0.0), sum_mass(S, 0.0),
        sum_ub(S * F * B, 0.0), sum_T(F, 0.0), cur_u(S * F, 0.0), cur_ub(S * F * B, 0.0) {}

  void begin_particle(std::size_t) { ++count; }
  void on_node(std::size_t, std::size_t i, std::span<const double> x, double z, const CoeffPoint&) {
    const GridFunction& u0 = us->front();
    for (std::size_t k = 0; k < S; ++k) {
      if (u0.time_index[k] != i) continue;
      const InterpStencil st = interp_stencil(u0.space, x);
      ++evaluations;
      if (st.clipped) ++exits;
      sum_mass[k] += z;
      for (std::size_t f = 0; f < F; ++f) {
        const GridFunction& u = (*us)[f];
        double v = 0.0;
        for (std::size_t c = 0; c < st.corners.size(); ++c) v += st.weights[c] * u.value(k, st.corners[c]);
        cur_u[k * F + f] = v * z;
        for (std::size_t b = 0; b < B; ++b) {
          double vb = 0.0;
          for (std::size_t c = 0; c < st.corners.size(); ++c) vb += st.weights[c] * u.batch(k, st.corners[c], b);
          cur_ub[(k * F + f) * B + b] = vb * z;
        }
      }
    }
    if (i == N)
      for (std::size_t f = 0; f < F; ++f) {
        const double term = (*phis)[f].value(x) * z;
        sum_T[f] += term;
        for (std::size_t k = 0; k < S; ++k) {
          const double d = cur_u[k * F + f] - term;
          sum_u[k * F + f] += cur_u[k * F + f];
          sum_d[k * F + f] += d;
          sum_d2[k * F + f] += d * d;
        }
      }
  }
  void end_particle(std::size_t) {
    for (std::size_t k = 0; k < sum_ub.size(); ++k) sum_ub[k] += cur_ub[k];
  }
  void merge(DualityObserver&& o) {
    count += o.count;
    exits += o.exits;
    evaluations += o.evaluations;
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
    };
    add(sum_u, o.sum_u);
    add(sum_d, o.sum_d);
    add(sum_d2, o.sum_d2);
    add(sum_mass, o.sum_mass);
    add(sum_ub, o.sum_ub);
    add(sum_T, o.sum_T);
  }
};
}  // namespace detail

// max_t |mu_t(u_t) - mu_T(phi)| with budget 3 (outer + inner stderr) + h^2/8 max|D^2 u| mu_t(1).
// Outer particles come from a fresh run of the filter on the same driver.
inline std::vector<DualityReport> duality_check(const Model& model, const RoughPath& rp,
                                                const std::vector<GridFunction>& us,
                                                const std::vector<TestFunction>& phis, std::size_t M_outer,
                                                std::uint64_t seed, std::size_t threads = 1,
                                                const Tolerances& tol = default_tolerances()) {
  if (us.empty() || us.size() != phis.size()) throw InputError("one grid function per test function required");
  if (M_outer < 2) throw InputError("duality check needs at least 2 outer particles");
  for (const auto& u : us)
    if (u.time_index != us.front().time_index || u.time_index.back() != rp.steps())
      throw InputError("grid functions must share time nodes ending at the terminal node");
  const auto obs = simulate_particles(model, rp, M_outer, seed,
                                      detail::DualityObserver(us, phis, rp.steps()), threads);
  if (static_cast<double>(obs.exits) > tol.box_exit_fraction * static_cast<double>(obs.evaluations))
    throw InvalidRun("duality check: " + std::to_string(obs.exits) + " of " + std::to_string(obs.evaluations) +
                     " particle evaluations left the spatial box");
  const double n = static_cast<double>(obs.count);
  const std::size_t F = phis.size(), S = us.front().slots(), B = us.front().batches;
  std::vector<DualityReport> out(F);
  for (std::size_t f = 0; f < F; ++f) {
    DualityReport& rep = out[f];
    rep.phi = phis[f].name;
    rep.mu_T = obs.sum_T[f] / n;
    rep.exits = obs.exits;
    rep.evaluations = obs.evaluations;
    rep.pass = true;
    for (std::size_t k = 0; k < S; ++k) {
      DualityRow row;
      row.node = us[f].time_index[k];
      row.t = us[f].time[k];
      row.mu_u = obs.sum_u[k * F + f] / n;
      const double dmean = obs.sum_d[k * F + f] / n;
      row.deviation = dmean;
      row.outer_stderr = std::sqrt(std::max(0.0, (obs.sum_d2[k * F + f] - n * dmean * dmean) / (n - 1.0)) / n);
      if (B > 1 && row.node != rp.steps()) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const double v = obs.sum_ub[(k * F + f) * B + b] / n;
          s1 += v;
          s2 += v * v;
        }
        const double m = s1 / B;
        row.inner_stderr = std::sqrt(std::max(0.0, (s2 - B * m * m) / (B - 1.0)) / B);
      }
      double interp = 0.0;
      for (std::size_t a = 0; a < us[f].space.dim(); ++a) {
        const double h = us[f].space.spacing(a);
        interp += h * h / 8.0 * max_second_difference(us[f], k, a);
      }
      row.interpolation = interp * std::abs(obs.sum_mass[k] / n);
      row.budget = tol.noise_multiple * (row.outer_stderr + row.inner_stderr) + row.interpolation;
      row.pass = std::abs(row.deviation) <= row.budget;
      rep.pass = rep.pass && row.pass;
      if (std::abs(row.deviation) >= rep.max_deviation) {
        rep.max_deviation = std::abs(row.deviation);
        rep.budget_at_max = row.budget;
      }
      rep.rows.push_back(row);
    }
  }
  return out;
}

inline nlohmann::json duality_json(const std::vector<DualityReport>& reps) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reps) {
    nlohmann::json e{{"phi", r.phi},           {"mu_T", r.mu_T},   {"max_deviation", r.max_deviation},
                     {"budget_at_max", r.budget_at_max}, {"exits", r.exits}, {"evaluations", r.evaluations},
                     {"pass", r.pass}};
    for (const auto& row : r.rows)
      e["rows"].push_back({{"t", row.t},
                           {"mu_u", row.mu_u},
                           {"deviation", row.deviation},
                           {"outer_stderr", row.outer_stderr},
                           {"inner_stderr", row.inner_stderr},
                           {"interpolation", row.interpolation},
                           {"budget", row.budget},
                           {"pass", row.pass}});
    j.push_back(e);
  }
  return j;
}

namespace detail {
// Central-difference jet of slice k at interior grid point g.
inline Jet grid_jet(const GridFunction& u, std::size_t k, std::size_t g, std::span<const double> vals) {
  const SpatialGrid& sg = u.space;
  const std::size_t d = sg.dim();
  Jet j;
  j.value = vals[g];
  j.grad.assign(d, 0.0);
  j.hess.assign(d * d, 0.0);
  std::vector<std::size_t> stride(d, 1);
  for (std::size_t a = 1; a < d; ++a) stride[a] = stride[a - 1] * sg.K;
  for (std::size_t a = 0; a < d; ++a) {
    const double ha = sg.spacing(a);
    j.grad[a] = (vals[g + stride[a]] - vals[g - stride[a]]) / (2.0 * ha);
    j.hess[a * d + a] = (vals[g + stride[a]] - 2.0 * vals[g] + vals[g - stride[a]]) / (ha * ha);
    for (std::size_t b = a + 1; b < d; ++b) {
      const double hb = sg.spacing(b);
      const double v = (vals[g + stride[a] + stride[b]] - vals[g + stride[a] - stride[b]] -
                        vals[g - stride[a] + stride[b]] + vals[g - stride[a] - stride[b]]) /
                       (4.0 * ha * hb);
      j.hess[a * d + b] = j.hess[b * d + a] = v;
    }
  }
  (void)k;
  return j;
}

inline bool interior(const SpatialGrid& sg, std::size_t g) {
  for (std::size_t a = 0; a < sg.dim(); ++a) {
    const std::size_t i = sg.index(g, a);
    if (i == 0 || i + 1 >= sg.K) return false;
  }
  return true;
}

// Backward Davie residual at every interior grid point for window [a, b].
inline std::vector<double> backward_window(const GridFunction& u, const OperatorContext& ctx,
                                           const WindowIncrement& win,
                                           const std::vector<std::vector<double>>& slices) {
  const CoefficientSet& c = ctx.coeffs();
  const RoughPath& rp = ctx.driver();
  const std::size_t dx = c.dx, dy = c.dy, db = c.db, G = u.space.points();
  const double dt = rp.grid().dt();
  std::vector<double> out;
  std::vector<double> gp(dy * dy), g2(dy * dy), gam(dy);
  CoeffPoint p;
  for (std::size_t g = 0; g < G; ++g) {
    if (!interior(u.space, g)) continue;
    const std::vector<double> x = u.space.point(g);
    double r = slices[win.a][g] - slices[win.b][g];
    for (std::size_t i = win.a; i < win.b; ++i) {
      const Jet jet = grid_jet(u, i, g, slices[i]);
      c.evaluate(rp.grid().node(i), x, rp.value(i), p);
      const auto yd = ctx.ydot().at_step(i);
      double drift = operator_A(p, yd, jet, dx, dy, db);
      operator_Gamma_prime(p, jet, dx, dy, gp);
      for (std::size_t kk = 0; kk < dy; ++kk)
        for (std::size_t l = 0; l < dy; ++l) drift -= gp[l * dy + kk] * yd[kk * dy + l];
      r -= drift * dt;
    }
    const Jet jet = grid_jet(u, win.b, g, slices[win.b]);
    c.evaluate(rp.grid().node(win.b), x, rp.value(win.b), p);
    operator_Gamma(p, jet, dx, dy, gam);
    operator_second_order(p, jet, dx, dy, g2);
    operator_Gamma_prime(p, jet, dx, dy, gp);
    for (std::size_t kk = 0; kk < dy; ++kk) r -= gam[kk] * win.dY[kk];
    for (std::size_t kk = 0; kk < dy; ++kk)
      for (std::size_t l = 0; l < dy; ++l) {
        // Gamma_k Gamma_l u - Gamma'_kl u = G_kl - Gamma'_lk - Gamma'_kl
        const double coef = g2[kk * dy + l] - gp[l * dy + kk] - gp[kk * dy + l];
        r -= coef * win.YY[kk * dy + l];
      }
    out.push_back(r);
  }
  return out;
}
}  // namespace detail

// Sup over interior grid points of the backward Davie residual, per dyadic window, with
// noise floors from the spread of the same residual evaluated on each inner batch.
inline ResidualResult backward_davie_residual(const GridFunction& u, const OperatorContext& ctx,
                                              std::span<const std::size_t> spans,
                                              const Tolerances& tol = default_tolerances()) {
  const RoughPath& rp = ctx.driver();
  const std::size_t N = rp.steps(), G = u.space.points();
  if (u.slots() != N + 1) throw InputError("backward residual needs u at every time node");
  for (std::size_t k = 0; k <= N; ++k)
    if (u.time_index[k] != k) throw InputError("backward residual needs u at every time node");
  if (u.space.K < 3) throw InputError("backward residual needs at least 3 grid points per axis");
  const auto windows = dyadic_windows(rp, spans);
  auto slices_of = [&](auto&& value) {
    std::vector<std::vector<double>> s(N + 1, std::vector<double>(G));
    for (std::size_t k = 0; k <= N; ++k)
      for (std::size_t g = 0; g < G; ++g) s[k][g] = value(k, g);
    return s;
  };
  const auto full = slices_of([&](std::size_t k, std::size_t g) { return u.value(k, g); });
  std::vector<std::vector<std::vector<double>>> per_batch;
  for (std::size_t b = 0; b < u.batches && u.batches > 1; ++b)
    per_batch.push_back(slices_of([&](std::size_t k, std::size_t g) { return u.batch(k, g, b); }));
  ResidualResult res;
  for (const auto& win : windows) {
    const auto r = detail::backward_window(u, ctx, win, full);
    std::size_t arg = 0;
    for (std::size_t q = 0; q < r.size(); ++q)
      if (std::abs(r[q]) > std::abs(r[arg])) arg = q;
    ResidualWindow rw;
    rw.s_index = win.a;
    rw.t_index = win.b;
    rw.span = win.span;
    rw.s = rp.grid().node(win.a);
    rw.t = rp.grid().node(win.b);
    rw.residual = r.empty() ? 0.0 : r[arg];
    if (!per_batch.empty() && !r.empty()) {
      double s1 = 0.0, s2 = 0.0;
      const double B = static_cast<double>(per_batch.size());
      for (const auto& slices : per_batch) {
        const double v = detail::backward_window(u, ctx, win, slices)[arg];
        s1 += v;
        s2 += v * v;
      }
      const double m = s1 / B;
      rw.noise_floor = std::sqrt(std::max(0.0, (s2 - B * m * m) / (B - 1.0)) / B);
    }
    res.windows.push_back(rw);
  }
  fit_scales(res, spans, rp.grid().dt(), tol);
  return res;
}

// Compares the Ito-form backward generator  A phi - Gamma'_{lk} phi [Ydot]^{kl}
// - 1/2 (Gamma_k Gamma_l phi - Gamma'_{kl} phi)[Ydot]^{kl}  with the generator of the
// Stratonovich-transformed coefficients on the geometrified driver, at random probes.
struct StratonovichCheck {
  std::size_t probes = 0;
  double max_abs_diff = 0.0;
  double max_abs_value = 0.0;
};

inline StratonovichCheck stratonovich_consistency(const CoefficientSet& c, const RoughPath& rp,
                                                  const TestFunction& phi, std::size_t probes = 10,
                                                  std::uint64_t seed = 11) {
  const StratonovichForm sf = stratonovich_transform(c, rp);
  const OperatorContext ito(c, rp), strat(sf.coeffs, sf.driver);
  const std::size_t dx = c.dx, dy = c.dy, N = rp.steps();
  StratonovichCheck out;
  out.probes = probes;
  std::vector<double> z(dx + 1), gp(dy * dy), g2(dy * dy);
  for (std::size_t q = 0; q < probes; ++q) {
    standard_normals(seed, Stream::probe, q, 0, z);
    const auto i = static_cast<std::size_t>(std::min<double>(N - 1, std::floor(unit_open(splitmix64(seed + q)) * N)));
    std::vector<double> x(dx);
    for (std::size_t a = 0; a < dx; ++a) x[a] = std::clamp(z[a], -2.0, 2.0);
    const Jet jet = jet_of(phi, x);
    const CoeffPoint p = ito.at(i, x);
    const auto yd = ito.ydot().at_step(i);
    double lhs = operator_A(p, yd, jet, dx, dy, c.db);
    operator_Gamma_prime(p, jet, dx, dy, gp);
    operator_second_order(p, jet, dx, dy, g2);
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) {
        const double gg = g2[k * dy + l] - gp[l * dy + k];  // Gamma_k Gamma_l phi
        lhs -= gp[l * dy + k] * yd[k * dy + l];
        lhs -= 0.5 * (gg - gp[k * dy + l]) * yd[k * dy + l];
      }
    const double rhs = apply_A(strat, i, phi, x);
    out.max_abs_diff = std::max(out.max_abs_diff, std::abs(lhs - rhs));
    out.max_abs_value = std::max(out.max_abs_value, std::abs(lhs));
  }
  return out;
}

}  // namespace roughfilter
