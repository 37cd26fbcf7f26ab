#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coefficients.hpp"
#include "controlled.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "random.hpp"
#include "roughpath.hpp"
#include "tolerances.hpp"

namespace roughfilter {

struct InitialLaw {
  std::vector<double> mean{0.0};
  std::vector<double> stddev{0.0};

  void sample(std::uint64_t seed, std::size_t particle, std::span<double> out) const {
    if (mean.size() != out.size() || stddev.size() != out.size())
      throw InputError("initial law dimension does not match the state dimension");
    standard_normals(seed, Stream::initial_state, particle, 0, out);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = mean[j] + stddev[j] * out[j];
  }
};

struct Model {
  std::string id = "custom";
  CoefficientSet coeffs;
  InitialLaw init;
};

struct SolutionPath {
  std::size_t start_index = 0;
  std::size_t dx = 1;
  std::vector<double> states;   // (N - start + 1) * dx
  std::vector<double> weights;  // N - start + 1, empty for signal-only solves
  std::uint64_t seed = 0;
  std::size_t particle = 0;

  std::size_t length() const { return states.size() / dx; }
  std::span<const double> state(std::size_t k) const {
    return std::span<const double>(states).subspan(k * dx, dx);
  }
};

// X increment of the Davie step with every coefficient at (t_i, X_i, Y_i).
inline void davie_signal_step(const CoeffPoint& p, std::size_t dx, std::size_t dy, std::size_t db,
                              double dt, std::span<const double> dB, std::span<const double> dY,
                              std::span<const double> YY, std::span<double> x) {
  for (std::size_t i = 0; i < dx; ++i) {
    double inc = p.drift[i] * dt;
    for (std::size_t q = 0; q < db; ++q) inc += p.diffusion[i * db + q] * dB[q];
    for (std::size_t k = 0; k < dy; ++k) inc += p.driver_field[i * dy + k] * dY[k];
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) {
        double coef = p.driver_field_dy[(i * dy + l) * dy + k];
        for (std::size_t j = 0; j < dx; ++j)
          coef += p.driver_field_dx[(i * dy + l) * dx + j] * p.driver_field[j * dy + k];
        inc += coef * YY[k * dy + l];
      }
    x[i] += inc;
  }
}

// Multiplicative factor of the linear weight step Z_{i+1} = Z_i * factor.
inline double davie_weight_factor(const CoeffPoint& p, std::size_t dx, std::size_t dy, double dt,
                                  std::span<const double> dY, std::span<const double> YY) {
  double factor = 1.0 + p.weight_drift * dt;
  for (std::size_t k = 0; k < dy; ++k) factor += p.obs_field[k] * dY[k];
  for (std::size_t k = 0; k < dy; ++k)
    for (std::size_t l = 0; l < dy; ++l) {
      double coef = p.obs_field[l] * p.obs_field[k] + p.obs_field_dy[l * dy + k];
      for (std::size_t j = 0; j < dx; ++j)
        coef += p.obs_field_dx[l * dx + j] * p.driver_field[j * dy + k];
      factor += coef * YY[k * dy + l];
    }
  return factor;
}

inline void check_dimensions(const CoefficientSet& c, const RoughPath& rp) {
  c.require_complete();
  if (c.dy != rp.dim())
    throw InputError("coefficient set '" + c.name + "' expects a driver of dimension " +
                     std::to_string(c.dy) + ", got " + std::to_string(rp.dim()));
}

struct ParticleWorkspace {
  CoeffPoint point;
  std::vector<double> dB, dY, x;
};

// Integrates one (X, Z) particle from node `start` (Z = 1 there) to the end of the
// grid. observer(i, x, z, point) sees every node with the coefficients at that node.
template <class Observer>
void propagate_particle(const CoefficientSet& c, const RoughPath& rp, std::span<const double> x0,
                        std::size_t start, std::uint64_t seed, std::size_t particle,
                        Observer&& observer, ParticleWorkspace& ws,
                        const Tolerances& tol = default_tolerances()) {
  const std::size_t dx = c.dx, dy = c.dy, db = c.db, N = rp.steps();
  const double dt = rp.grid().dt();
  const double sqdt = std::sqrt(dt);
  ws.x.assign(x0.begin(), x0.end());
  ws.dB.resize(db);
  ws.dY.resize(dy);
  double z = 1.0;
  for (std::size_t i = start;; ++i) {
    c.evaluate(rp.grid().node(i), ws.x, rp.value(i), ws.point);
    observer(i, std::span<const double>(ws.x), z, ws.point);
    if (i == N) break;
    if (db > 0) {
      standard_normals(seed, Stream::signal_noise, particle, i, ws.dB);
      for (double& b : ws.dB) b *= sqdt;
    }
    for (std::size_t k = 0; k < dy; ++k) ws.dY[k] = rp.increment(i, k);
    const double factor = davie_weight_factor(ws.point, dx, dy, dt, ws.dY, rp.second(i));
    davie_signal_step(ws.point, dx, dy, db, dt, ws.dB, ws.dY, rp.second(i), ws.x);
    z *= factor;
    for (double v : ws.x)
      if (!std::isfinite(v) || std::abs(v) > tol.blowup_state)
        throw NumericalBlowUp("signal state left the admissible range", i + 1, particle);
    if (!std::isfinite(z) || std::abs(z) > tol.blowup_weight)
      throw NumericalBlowUp("weight left the admissible range", i + 1, particle);
  }
}

inline SolutionPath solve_from(const CoefficientSet& c, const RoughPath& rp, std::size_t t_index,
                               std::span<const double> x, std::uint64_t seed,
                               std::size_t particle = 0) {
  check_dimensions(c, rp);
  if (t_index > rp.steps()) throw InputError("solve_from: start index beyond grid");
  if (x.size() != c.dx) throw InputError("solve_from: start point has wrong dimension");
  SolutionPath sol;
  sol.start_index = t_index;
  sol.dx = c.dx;
  sol.seed = seed;
  sol.particle = particle;
  sol.states.reserve((rp.steps() - t_index + 1) * c.dx);
  sol.weights.reserve(rp.steps() - t_index + 1);
  ParticleWorkspace ws;
  propagate_particle(c, rp, x, t_index, seed, particle,
                     [&](std::size_t, std::span<const double> xs, double z, const CoeffPoint&) {
                       sol.states.insert(sol.states.end(), xs.begin(), xs.end());
                       sol.weights.push_back(z);
                     },
                     ws);
  return sol;
}

inline SolutionPath solve_signal(const CoefficientSet& c, const RoughPath& rp,
                                 std::span<const double> x0, std::uint64_t seed,
                                 std::size_t particle = 0) {
  SolutionPath sol = solve_from(c, rp, 0, x0, seed, particle);
  sol.weights.clear();
  return sol;
}

inline SolutionPath solve_signal(const CoefficientSet& c, const RoughPath& rp, const InitialLaw& law,
                                 std::uint64_t seed, std::size_t particle = 0) {
  std::vector<double> x0(c.dx);
  law.sample(seed, particle, x0);
  return solve_signal(c, rp, x0, seed, particle);
}

inline std::vector<double> solve_weight_davie(const CoefficientSet& c, const RoughPath& rp,
                                              const SolutionPath& signal,
                                              const Tolerances& tol = default_tolerances()) {
  check_dimensions(c, rp);
  const std::size_t dy = c.dy, start = signal.start_index;
  const double dt = rp.grid().dt();
  std::vector<double> Z(signal.length());
  std::vector<double> dY(dy);
  CoeffPoint p;
  Z[0] = 1.0;
  for (std::size_t k = 0; k + 1 < signal.length(); ++k) {
    const std::size_t i = start + k;
    c.evaluate(rp.grid().node(i), signal.state(k), rp.value(i), p);
    for (std::size_t a = 0; a < dy; ++a) dY[a] = rp.increment(i, a);
    Z[k + 1] = Z[k] * davie_weight_factor(p, c.dx, dy, dt, dY, rp.second(i));
    if (!std::isfinite(Z[k + 1]) || std::abs(Z[k + 1]) > tol.blowup_weight)
      throw NumericalBlowUp("weight left the admissible range", i + 1, signal.particle);
  }
  return Z;
}

// Z = exp(I), I = rough integral of (h, D_x h f + h') minus the bracket correction.
inline std::vector<double> solve_weight_exponential(const CoefficientSet& c, const RoughPath& rp,
                                                    const SolutionPath& signal,
                                                    const Tolerances& tol = default_tolerances()) {
  check_dimensions(c, rp);
  if (signal.start_index != 0) throw InputError("exponential weight expects a full-grid signal");
  const std::size_t dx = c.dx, dy = c.dy, N = rp.steps();
  const double dt = rp.grid().dt();
  ControlledPath integrand(rp.grid(), 1, dy);
  std::vector<double> correction(N + 1, 0.0);
  CoeffPoint p;
  for (std::size_t i = 0; i <= N; ++i) {
    c.evaluate(rp.grid().node(i), signal.state(i), rp.value(i), p);
    for (std::size_t l = 0; l < dy; ++l) {
      integrand.value(i, 0, l) = p.obs_field[l];
      for (std::size_t k = 0; k < dy; ++k) {
        double g = p.obs_field_dy[l * dy + k];
        for (std::size_t j = 0; j < dx; ++j) g += p.obs_field_dx[l * dx + j] * p.driver_field[j * dy + k];
        integrand.derivative(i, 0, l, k) = g;
      }
    }
    if (i < N) {
      const auto br = rp.bracket(i);
      double quad = 0.0;
      for (std::size_t k = 0; k < dy; ++k)
        for (std::size_t l = 0; l < dy; ++l) quad += p.obs_field[k] * br[k * dy + l] * p.obs_field[l];
      correction[i + 1] = correction[i] + p.weight_drift * dt - 0.5 * quad;
    }
  }
  const std::vector<double> I = rough_integral(integrand, rp);
  std::vector<double> Z(N + 1);
  for (std::size_t i = 0; i <= N; ++i) {
    Z[i] = std::exp(I[i] + correction[i]);
    if (!std::isfinite(Z[i]) || Z[i] > tol.blowup_weight)
      throw NumericalBlowUp("exponential weight overflow", i, signal.particle);
  }
  return Z;
}

namespace detail {
inline std::size_t step_of(double t, const TimeGrid& g) {
  const double s = t / g.dt();
  auto i = static_cast<long long>(std::floor(s + 1e-9));
  if (i < 0) i = 0;
  return std::min(static_cast<std::size_t>(i), g.steps - 1);
}
}  // namespace detail

struct StratonovichForm {
  CoefficientSet coeffs;
  RoughPath driver;
};

// b° = b - 1/2 sum (D_x f_l f_k + f'_lk)[Ydot]^{kl}; c° = c - 1/2 sum (h_k h_l + D_x h_l f_k + h'_lk)[Ydot]^{kl};
// driver becomes the geometrified path.
inline StratonovichForm stratonovich_transform(const CoefficientSet& c, const RoughPath& rp) {
  check_dimensions(c, rp);
  auto ydot = std::make_shared<const BracketDerivative>(bracket_derivative(rp));
  const TimeGrid grid = rp.grid();
  StratonovichForm out{c, geometrify(rp)};
  const CoefficientSet base = c;
  out.coeffs.name = c.name + "_stratonovich";
  out.coeffs.drift = [base, ydot, grid](double t, std::span<const double> x, std::span<const double> y,
                                        std::span<double> res) {
    CoeffPoint p;
    p.resize(base.dx, base.dy, base.db);
    base.evaluate(t, x, y, p);
    const auto yd = ydot->at_step(detail::step_of(t, grid));
    const std::size_t dx = base.dx, dy = base.dy;
    for (std::size_t i = 0; i < dx; ++i) {
      double corr = 0.0;
      for (std::size_t k = 0; k < dy; ++k)
        for (std::size_t l = 0; l < dy; ++l) {
          double coef = p.driver_field_dy[(i * dy + l) * dy + k];
          for (std::size_t j = 0; j < dx; ++j)
            coef += p.driver_field_dx[(i * dy + l) * dx + j] * p.driver_field[j * dy + k];
          corr += coef * yd[k * dy + l];
        }
      res[i] = p.drift[i] - 0.5 * corr;
    }
  };
  out.coeffs.weight_drift = [base, ydot, grid](double t, std::span<const double> x,
                                               std::span<const double> y, std::span<double> res) {
    CoeffPoint p;
    p.resize(base.dx, base.dy, base.db);
    base.evaluate(t, x, y, p);
    const auto yd = ydot->at_step(detail::step_of(t, grid));
    const std::size_t dx = base.dx, dy = base.dy;
    double corr = 0.0;
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) {
        double coef = p.obs_field[k] * p.obs_field[l] + p.obs_field_dy[l * dy + k];
        for (std::size_t j = 0; j < dx; ++j) coef += p.obs_field_dx[l * dx + j] * p.driver_field[j * dy + k];
        corr += coef * yd[k * dy + l];
      }
    res[0] = p.weight_drift - 0.5 * corr;
  };
  return out;
}

// CSV `particle,t,X_1..X_dx,Z`.
inline void write_solution_paths(const std::vector<SolutionPath>& paths, const TimeGrid& grid,
                                 const std::filesystem::path& path) {
  auto out = io::open_out(path);
  const std::size_t dx = paths.empty() ? 1 : paths.front().dx;
  out << "particle,t";
  for (std::size_t j = 1; j <= dx; ++j) out << ",X_" << j;
  out << ",Z\n";
  for (const auto& p : paths)
    for (std::size_t k = 0; k < p.length(); ++k) {
      out << p.particle << "," << io::num(grid.node(p.start_index + k));
      for (double v : p.state(k)) out << "," << io::num(v);
      out << "," << io::num(p.weights.empty() ? 1.0 : p.weights[k]) << "\n";
    }
}

}  // namespace roughfilter
