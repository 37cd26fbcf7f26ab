#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "reduce.hpp"
#include "rsde.hpp"
#include "test_functions.hpp"

namespace roughfilter {

// Observer protocol used by simulate_particles / replay_particles:
//   void begin_particle(std::size_t m);
//   void on_node(std::size_t m, std::size_t i, std::span<const double> x, double z, const CoeffPoint& p);
//   void end_particle(std::size_t m);
//   void merge(Observer&& later);
// Each block of kParticleBlock particles gets a copy of the prototype; block results
// are merged in a fixed tree, so the outcome is independent of the thread count.
template <class Obs>
Obs simulate_particles(const Model& model, const RoughPath& rp, std::size_t M, std::uint64_t seed,
                       const Obs& proto, std::size_t threads = 1) {
  check_dimensions(model.coeffs, rp);
  if (M < 1) throw InputError("particle count must be at least 1");
  const std::size_t blocks = (M + kParticleBlock - 1) / kParticleBlock;
  TreeReducer<Obs> reducer([](Obs& a, Obs&& b) { a.merge(std::move(b)); });
  run_blocks<Obs>(
      blocks, threads,
      [&](std::size_t b) {
        Obs obs = proto;
        ParticleWorkspace ws;
        std::vector<double> x0(model.coeffs.dx);
        const std::size_t end = std::min(M, (b + 1) * kParticleBlock);
        for (std::size_t m = b * kParticleBlock; m < end; ++m) {
          model.init.sample(seed, m, x0);
          obs.begin_particle(m);
          propagate_particle(
              model.coeffs, rp, x0, 0, seed, m,
              [&](std::size_t i, std::span<const double> x, double z, const CoeffPoint& p) {
                obs.on_node(m, i, x, z, p);
              },
              ws);
          obs.end_particle(m);
        }
        return obs;
      },
      [&](std::size_t, Obs&& o) { reducer.push(std::move(o)); });
  return std::move(*reducer.finish());
}

struct ParticleEnsemble {
  std::shared_ptr<const Model> model;
  std::shared_ptr<const RoughPath> driver;
  std::size_t particles = 0;
  std::size_t dx = 1;
  std::size_t nodes = 0;
  std::uint64_t seed = 0;
  std::vector<double> states;   // [(m*nodes + i)*dx + j]
  std::vector<double> weights;  // [m*nodes + i]

  std::span<const double> state(std::size_t m, std::size_t i) const {
    return std::span<const double>(states).subspan((m * nodes + i) * dx, dx);
  }
  double weight(std::size_t m, std::size_t i) const { return weights[m * nodes + i]; }
};

inline constexpr double kMaxEnsembleBytes = 2.5e9;

namespace detail {
struct StoreObserver {
  ParticleEnsemble* ens;
  void begin_particle(std::size_t) {}
  void end_particle(std::size_t) {}
  void on_node(std::size_t m, std::size_t i, std::span<const double> x, double z, const CoeffPoint&) {
    std::copy(x.begin(), x.end(), ens->states.begin() + static_cast<std::ptrdiff_t>((m * ens->nodes + i) * ens->dx));
    ens->weights[m * ens->nodes + i] = z;
  }
  void merge(StoreObserver&&) {}
};
}  // namespace detail

inline ParticleEnsemble run_filter(std::shared_ptr<const Model> model,
                                   std::shared_ptr<const RoughPath> rp, std::size_t M,
                                   std::uint64_t seed, std::size_t threads = 1) {
  check_dimensions(model->coeffs, *rp);
  if (M < 1) throw InputError("particle count must be at least 1");
  ParticleEnsemble ens;
  ens.model = model;
  ens.driver = rp;
  ens.particles = M;
  ens.dx = model->coeffs.dx;
  ens.nodes = rp->grid().nodes();
  ens.seed = seed;
  const double bytes = 8.0 * static_cast<double>(M) * ens.nodes * (ens.dx + 1);
  if (bytes > kMaxEnsembleBytes)
    throw ConfigError("ensemble of " + std::to_string(M) + " particles x " +
                      std::to_string(ens.nodes) +
                      " nodes exceeds the in-memory limit; use the streaming estimators");
  ens.states.assign(M * ens.nodes * ens.dx, 0.0);
  ens.weights.assign(M * ens.nodes, 0.0);
  simulate_particles(*model, *rp, M, seed, detail::StoreObserver{&ens}, threads);
  return ens;
}

inline ParticleEnsemble run_filter(const Model& model, const RoughPath& rp, std::size_t M,
                                   std::uint64_t seed, std::size_t threads = 1) {
  return run_filter(std::make_shared<const Model>(model), std::make_shared<const RoughPath>(rp), M,
                    seed, threads);
}

// Feeds a stored ensemble through an observer, re-evaluating coefficients at each node.
template <class Obs>
Obs replay_particles(const ParticleEnsemble& ens, const CoefficientSet& coeffs, const RoughPath& rp,
                     const Obs& proto, std::size_t threads = 1) {
  if (!(rp.grid() == ens.driver->grid())) throw InputError("replay: ensemble and driver grids differ");
  check_dimensions(coeffs, rp);
  const std::size_t blocks = (ens.particles + kParticleBlock - 1) / kParticleBlock;
  TreeReducer<Obs> reducer([](Obs& a, Obs&& b) { a.merge(std::move(b)); });
  run_blocks<Obs>(
      blocks, threads,
      [&](std::size_t b) {
        Obs obs = proto;
        CoeffPoint p;
        const std::size_t end = std::min(ens.particles, (b + 1) * kParticleBlock);
        for (std::size_t m = b * kParticleBlock; m < end; ++m) {
          obs.begin_particle(m);
          for (std::size_t i = 0; i < ens.nodes; ++i) {
            coeffs.evaluate(rp.grid().node(i), ens.state(m, i), rp.value(i), p);
            obs.on_node(m, i, ens.state(m, i), ens.weight(m, i), p);
          }
          obs.end_particle(m);
        }
        return obs;
      },
      [&](std::size_t, Obs&& o) { reducer.push(std::move(o)); });
  return std::move(*reducer.finish());
}

template <class Obs>
Obs replay_particles(const ParticleEnsemble& ens, const Obs& proto, std::size_t threads = 1) {
  return replay_particles(ens, ens.model->coeffs, *ens.driver, proto, threads);
}

inline void check_node(const ParticleEnsemble& ens, std::size_t i) {
  if (i >= ens.nodes) throw InputError("time index beyond grid");
}

inline std::vector<double> weighted_values(const ParticleEnsemble& ens, const TestFunction& phi,
                                           std::size_t i) {
  check_node(ens, i);
  std::vector<double> v(ens.particles);
  for (std::size_t m = 0; m < ens.particles; ++m) v[m] = phi.value(ens.state(m, i)) * ens.weight(m, i);
  return v;
}

inline double mu(const ParticleEnsemble& ens, const TestFunction& phi, std::size_t i) {
  const auto v = weighted_values(ens, phi, i);
  return pairwise_sum(v) / static_cast<double>(ens.particles);
}

inline double sigma(const ParticleEnsemble& ens, const TestFunction& phi, std::size_t i,
                    const Tolerances& tol = default_tolerances()) {
  const double mass = mu(ens, constant_function(1.0, ens.dx), i);
  if (!(mass > tol.mass_floor) || !std::isfinite(mass))
    throw DegenerateMass("filter mass " + io::num(mass) + " at node " + std::to_string(i) +
                         " is below the floor");
  return mu(ens, phi, i) / mass;
}

inline double sample_stderr(std::span<const double> v) {
  if (v.size() < 2) throw InputError("standard error needs at least 2 samples");
  const double n = static_cast<double>(v.size());
  const double mean = pairwise_sum(v) / n;
  std::vector<double> sq(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) sq[k] = (v[k] - mean) * (v[k] - mean);
  return std::sqrt(pairwise_sum(sq) / (n - 1.0) / n);
}

inline double mc_stderr(const ParticleEnsemble& ens, const TestFunction& phi, std::size_t i) {
  if (ens.particles < 2) throw InputError("mc_stderr needs M >= 2");
  const auto v = weighted_values(ens, phi, i);
  return sample_stderr(v);
}

// Per-node sums of phi_j(X) Z, their squares and cross products with the mass Z.
struct NodeMoments {
  std::size_t nodes = 0, funcs = 0, count = 0;
  std::vector<double> mass1, mass2;      // per node: sum Z, sum Z^2
  std::vector<double> s1, s2, cross;     // per (node, func): sum g, sum g^2, sum g Z

  NodeMoments() = default;
  NodeMoments(std::size_t n, std::size_t f)
      : nodes(n), funcs(f), mass1(n, 0.0), mass2(n, 0.0), s1(n * f, 0.0), s2(n * f, 0.0), cross(n * f, 0.0) {}

  void add(const NodeMoments& o) {
    count += o.count;
    for (std::size_t k = 0; k < mass1.size(); ++k) {
      mass1[k] += o.mass1[k];
      mass2[k] += o.mass2[k];
    }
    for (std::size_t k = 0; k < s1.size(); ++k) {
      s1[k] += o.s1[k];
      s2[k] += o.s2[k];
      cross[k] += o.cross[k];
    }
  }
  double n() const { return static_cast<double>(count); }
  double mass(std::size_t i) const { return mass1[i] / n(); }
  double mean(std::size_t i, std::size_t j) const { return s1[i * funcs + j] / n(); }
  double stderr_of(std::size_t i, std::size_t j) const {
    if (count < 2) return std::numeric_limits<double>::quiet_NaN();
    const double m = mean(i, j);
    const double var = std::max(0.0, (s2[i * funcs + j] - n() * m * m) / (n() - 1.0));
    return std::sqrt(var / n());
  }
  double ratio(std::size_t i, std::size_t j, double floor = default_tolerances().mass_floor) const {
    const double w = mass(i);
    if (!(w > floor)) throw DegenerateMass("filter mass below the floor at node " + std::to_string(i));
    return mean(i, j) / w;
  }
  // Delta-method standard error of the ratio mean(g)/mean(Z).
  double ratio_stderr(std::size_t i, std::size_t j) const {
    if (count < 2) return std::numeric_limits<double>::quiet_NaN();
    const double w = mass(i), r = ratio(i, j);
    const std::size_t idx = i * funcs + j;
    // sum (g - r Z)^2 = s2 - 2 r cross + r^2 mass2
    const double ss = std::max(0.0, s2[idx] - 2.0 * r * cross[idx] + r * r * mass2[i]);
    return std::sqrt(ss / (n() - 1.0) / n()) / w;
  }
};

struct NodeMomentsObserver {
  const std::vector<TestFunction>* phis = nullptr;
  std::size_t stride = 1;  // record every stride-th node
  NodeMoments moments;

  NodeMomentsObserver(const std::vector<TestFunction>& fs, std::size_t nodes, std::size_t stride_ = 1)
      : phis(&fs), stride(stride_), moments((nodes - 1) / stride_ + 1, fs.size()) {}

  void begin_particle(std::size_t) { ++moments.count; }
  void end_particle(std::size_t) {}
  void on_node(std::size_t, std::size_t i, std::span<const double> x, double z, const CoeffPoint&) {
    if (i % stride != 0) return;
    const std::size_t r = i / stride;
    moments.mass1[r] += z;
    moments.mass2[r] += z * z;
    for (std::size_t j = 0; j < phis->size(); ++j) {
      const double g = (*phis)[j].value(x) * z;
      const std::size_t k = r * moments.funcs + j;
      moments.s1[k] += g;
      moments.s2[k] += g * g;
      moments.cross[k] += g * z;
    }
  }
  void merge(NodeMomentsObserver&& o) { moments.add(o.moments); }
};

inline NodeMoments filter_moments(const Model& model, const RoughPath& rp,
                                  const std::vector<TestFunction>& phis, std::size_t M,
                                  std::uint64_t seed, std::size_t threads = 1) {
  return simulate_particles(model, rp, M, seed, NodeMomentsObserver(phis, rp.grid().nodes()), threads)
      .moments;
}

inline NodeMoments filter_moments(const ParticleEnsemble& ens, const std::vector<TestFunction>& phis,
                                  std::size_t threads = 1) {
  return replay_particles(ens, NodeMomentsObserver(phis, ens.nodes), threads).moments;
}

// CSV `t,phi_name,mu,sigma,stderr`.
inline void write_filter_csv(const NodeMoments& mom, const std::vector<TestFunction>& phis,
                             const TimeGrid& grid, std::size_t stride,
                             const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "t,phi_name,mu,sigma,stderr\n";
  for (std::size_t r = 0; r < mom.nodes; ++r)
    for (std::size_t j = 0; j < phis.size(); ++j)
      out << io::num(grid.node(r * stride)) << "," << phis[j].name << "," << io::num(mom.mean(r, j))
          << "," << io::num(mom.ratio(r, j)) << "," << io::num(mom.stderr_of(r, j)) << "\n";
}

// phi(X_T) Z_T per particle, written into a preallocated vector.
struct TerminalCollector {
  const TestFunction* phi = nullptr;
  std::vector<double>* out = nullptr;
  std::size_t terminal = 0;
  void begin_particle(std::size_t) {}
  void end_particle(std::size_t) {}
  void on_node(std::size_t m, std::size_t i, std::span<const double> x, double z, const CoeffPoint&) {
    if (i == terminal) (*out)[m] = phi->value(x) * z;
  }
  void merge(TerminalCollector&&) {}
};

inline std::vector<double> terminal_values(const Model& model, const RoughPath& rp,
                                           const TestFunction& phi, std::size_t M, std::uint64_t seed,
                                           std::size_t threads = 1) {
  std::vector<double> v(M, 0.0);
  simulate_particles(model, rp, M, seed, TerminalCollector{&phi, &v, rp.steps()}, threads);
  return v;
}

struct PerturbationSpec {
  std::vector<double> area_shifts;
  bool ito_vs_geometrified = true;
  std::size_t smoothing_window = 0;  // 0 disables the smoothed first level
};

struct RobustnessRow {
  std::string id;
  double parameter = 0.0;
  double rho = 0.0;
  double diff = 0.0;         // |mu_T(phi) under perturbed driver - under base driver|
  double signed_diff = 0.0;
  double diff_stderr = 0.0;  // paired (common random numbers)
  double ratio = 0.0;
};

struct RobustnessTable {
  double base_value = 0.0;
  std::vector<RobustnessRow> rows;
  double max_ratio = 0.0;
};

// Centered moving average of the first level, then a piecewise-linear lift.
inline RoughPath smoothed_driver(const RoughPath& rp, std::size_t window) {
  const std::size_t d = rp.dim(), n = rp.grid().nodes();
  std::vector<double> smooth(n * d);
  const auto half = static_cast<long long>(window / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      double s = 0.0;
      std::size_t cnt = 0;
      for (long long k = static_cast<long long>(i) - half; k <= static_cast<long long>(i) + half; ++k)
        if (k >= 0 && k < static_cast<long long>(n)) {
          s += rp.value(static_cast<std::size_t>(k))[a];
          ++cnt;
        }
      smooth[i * d + a] = s / cnt;
    }
  return lift_piecewise_linear(rp.grid(), d, smooth, rp.alpha());
}

inline RobustnessTable robustness_probe(const Model& model, const RoughPath& rp,
                                        const PerturbationSpec& spec, const TestFunction& phi,
                                        std::size_t M, std::uint64_t seed, std::size_t threads = 1) {
  if (M < 2) throw InputError("robustness probe needs M >= 2");
  const double alpha = rp.alpha();
  const std::vector<double> base = terminal_values(model, rp, phi, M, seed, threads);
  RobustnessTable table;
  table.base_value = pairwise_sum(base) / static_cast<double>(M);
  auto add_row = [&](std::string id, double parameter, const RoughPath& other) {
    const std::vector<double> v = terminal_values(model, other, phi, M, seed, threads);
    std::vector<double> d(M);
    for (std::size_t m = 0; m < M; ++m) d[m] = v[m] - base[m];
    RobustnessRow row;
    row.id = std::move(id);
    row.parameter = parameter;
    row.rho = rho_alpha(rp, other, alpha);
    row.signed_diff = pairwise_sum(d) / static_cast<double>(M);
    row.diff = std::abs(row.signed_diff);
    row.diff_stderr = sample_stderr(d);
    row.ratio = row.rho > 0 ? row.diff / row.rho : 0.0;
    table.max_ratio = std::max(table.max_ratio, row.ratio);
    table.rows.push_back(std::move(row));
  };
  for (double a : spec.area_shifts) add_row("area_shift_" + io::num(a), a, area_shift(rp, a));
  if (spec.ito_vs_geometrified) add_row("geometrified", 0.0, geometrify(rp));
  if (spec.smoothing_window > 1)
    add_row("smoothed_" + std::to_string(spec.smoothing_window),
            static_cast<double>(spec.smoothing_window), smoothed_driver(rp, spec.smoothing_window));
  return table;
}

struct RobustnessVerdict {
  double ratio_spread = 0.0;      // max/min of diff/rho over the area-shift rows
  bool ratios_bounded = false;
  bool monotone = false;          // diff shrinks with the shift, up to noise_multiple paired stderr
  double lift_significance = 0.0; // |Ito - geometrified| / stderr
  bool lift_detected = false;
  bool has_lift_row = false;
  bool pass() const { return ratios_bounded && monotone && (!has_lift_row || lift_detected); }
};

inline RobustnessVerdict assess_robustness(const RobustnessTable& t, double max_spread = 5.0,
                                           double noise_multiple = default_tolerances().noise_multiple) {
  std::vector<const RobustnessRow*> shifts;
  RobustnessVerdict v;
  for (const auto& r : t.rows) {
    if (r.id.rfind("area_shift_", 0) == 0) shifts.push_back(&r);
    if (r.id == "geometrified") {
      v.has_lift_row = true;
      v.lift_significance = r.diff_stderr > 0 ? r.diff / r.diff_stderr : std::numeric_limits<double>::infinity();
      v.lift_detected = r.diff > noise_multiple * r.diff_stderr;
    }
  }
  std::sort(shifts.begin(), shifts.end(),
            [](const RobustnessRow* a, const RobustnessRow* b) { return std::abs(a->parameter) > std::abs(b->parameter); });
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto* r : shifts) {
    lo = std::min(lo, r->ratio);
    hi = std::max(hi, r->ratio);
  }
  v.ratio_spread = shifts.empty() ? 0.0 : (lo > 0 ? hi / lo : std::numeric_limits<double>::infinity());
  v.ratios_bounded = !shifts.empty() && v.ratio_spread <= max_spread;
  v.monotone = !shifts.empty();
  for (std::size_t k = 1; k < shifts.size(); ++k) {
    const double se = std::hypot(shifts[k]->diff_stderr, shifts[k - 1]->diff_stderr);
    if (shifts[k]->diff > shifts[k - 1]->diff + noise_multiple * se) v.monotone = false;
  }
  return v;
}

// CSV `perturb_id,rho_alpha,diff,ratio`.
inline void write_robustness_csv(const RobustnessTable& t, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "perturb_id,rho_alpha,diff,ratio\n";
  for (const auto& r : t.rows)
    out << r.id << "," << io::num(r.rho) << "," << io::num(r.diff) << "," << io::num(r.ratio) << "\n";
}

}  // namespace roughfilter
