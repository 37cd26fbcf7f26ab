#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include <json.hpp>

#include "filter.hpp"
#include "io.hpp"
#include "operators.hpp"
#include "reduce.hpp"

namespace roughfilter {

struct ResidualWindow {
  std::size_t s_index = 0, t_index = 0, span = 0;
  double s = 0.0, t = 0.0;
  double residual = 0.0;
  double noise_floor = 0.0;
};

struct ResidualScale {
  std::size_t span = 0;
  double time_span = 0.0;
  double max_residual = 0.0;      // over anchored windows
  double noise_floor = 0.0;       // largest anchored-window standard error
  double max_residual_all = 0.0;  // over every window of this span
  double median_residual = 0.0;   // over every window of this span
  bool usable = false;
};

struct ResidualResult {
  std::vector<ResidualWindow> windows;
  std::vector<ResidualScale> scales;
  double exponent = std::numeric_limits<double>::quiet_NaN();
  double exponent_all_windows = std::numeric_limits<double>::quiet_NaN();
  double exponent_median = std::numeric_limits<double>::quiet_NaN();
  std::size_t usable_scales = 0;
  bool inconclusive = true;
};

// Per span, the max |residual| is taken over the anchored windows, those starting at a
// multiple of the largest span. Every span then contributes the same number of windows
// from the same start points, so the max is not inflated at small spans merely because
// there are more windows to take it over. A span is usable when that max exceeds
// noise_multiple x the largest anchored standard error; usable spans enter a
// least-squares fit of log max vs log span. The all-window max and the median are fitted
// over the same usable spans for reference.
inline void fit_scales(ResidualResult& res, std::span<const std::size_t> spans, double dt,
                       const Tolerances& tol = default_tolerances()) {
  res.scales.clear();
  const std::size_t anchor = *std::max_element(spans.begin(), spans.end());
  std::vector<double> lx, ly, ly_all, ly_med;
  for (std::size_t S : spans) {
    ResidualScale sc;
    sc.span = S;
    sc.time_span = S * dt;
    std::vector<double> mags;
    for (const auto& w : res.windows) {
      if (w.span != S) continue;
      mags.push_back(std::abs(w.residual));
      if (w.s_index % anchor != 0) continue;
      sc.max_residual = std::max(sc.max_residual, std::abs(w.residual));
      sc.noise_floor = std::max(sc.noise_floor, w.noise_floor);
    }
    if (!mags.empty()) {
      sc.max_residual_all = *std::max_element(mags.begin(), mags.end());
      std::nth_element(mags.begin(), mags.begin() + mags.size() / 2, mags.end());
      sc.median_residual = mags[mags.size() / 2];
    }
    sc.usable = sc.max_residual > tol.noise_multiple * sc.noise_floor && sc.max_residual > 0.0;
    if (sc.usable) {
      lx.push_back(std::log(sc.time_span));
      ly.push_back(std::log(sc.max_residual));
      ly_all.push_back(std::log(sc.max_residual_all));
      ly_med.push_back(std::log(std::max(sc.median_residual, 1e-300)));
    }
    res.scales.push_back(sc);
  }
  res.usable_scales = lx.size();
  res.inconclusive = lx.size() < static_cast<std::size_t>(tol.min_fit_scales);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  res.exponent = lx.size() >= 2 ? least_squares(lx, ly).slope : nan;
  res.exponent_all_windows = lx.size() >= 2 ? least_squares(lx, ly_all).slope : nan;
  res.exponent_median = lx.size() >= 2 ? least_squares(lx, ly_med).slope : nan;
}

inline void check_spans(std::span<const std::size_t> spans, std::size_t N) {
  if (spans.empty()) throw InputError("residual ladder needs at least one span");
  for (std::size_t S : spans)
    if (S == 0 || S > N) throw InputError("span " + std::to_string(S) + " outside the grid");
}

struct WindowIncrement {
  std::size_t a = 0, b = 0, span = 0;
  std::vector<double> dY, YY;
};

inline std::vector<WindowIncrement> dyadic_windows(const RoughPath& rp,
                                                   std::span<const std::size_t> spans) {
  check_spans(spans, rp.steps());
  std::vector<WindowIncrement> out;
  for (std::size_t S : spans)
    for (std::size_t a = 0; a + S <= rp.steps(); a += S) {
      ChenIncrement inc = chen_extend(rp, a, a + S);
      out.push_back({a, a + S, S, std::move(inc.increment), std::move(inc.area)});
    }
  return out;
}

// Per-particle Zakai residuals r^m over every window; mean and sum of squares merged.
struct ZakaiObserver {
  const TestFunction* phi = nullptr;
  const std::vector<WindowIncrement>* windows = nullptr;
  const BracketDerivative* ydot = nullptr;
  std::size_t dx = 1, dy = 1, db = 1;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::vector<double> sum, sumsq;
  // per-particle scratch; mart is the running sum of (D phi . sigma dB) Z
  std::vector<double> phiz, drift, gam, sec, mart;
  Jet jet;
  std::vector<double> tmp_g, tmp_s, dB;

  ZakaiObserver(const TestFunction& f, const std::vector<WindowIncrement>& w, const BracketDerivative& yd,
                const CoefficientSet& c, double dt_, std::size_t nodes, std::uint64_t seed_)
      : phi(&f), windows(&w), ydot(&yd), dx(c.dx), dy(c.dy), db(c.db), dt(dt_), seed(seed_),
        sum(w.size(), 0.0), sumsq(w.size(), 0.0),
        phiz(nodes), drift(nodes), gam(nodes * c.dy), sec(nodes * c.dy * c.dy), mart(nodes),
        tmp_g(c.dy), tmp_s(c.dy * c.dy), dB(c.db) {}

  void begin_particle(std::size_t) { ++count; }
  void on_node(std::size_t m, std::size_t i, std::span<const double> x, double z, const CoeffPoint& p) {
    jet.evaluate(*phi, x);
    phiz[i] = jet.value * z;
    const double a = operator_A(p, ydot->at_node(i), jet, dx, dy, db);
    if (i == 0) drift[0] = mart[0] = 0.0;
    if (i + 1 < drift.size()) {
      drift[i + 1] = drift[i] + a * z * dt;
      mart[i + 1] = mart[i] + z * brownian_term(p, jet, m, i);
    }
    operator_Gamma(p, jet, dx, dy, tmp_g);
    operator_second_order(p, jet, dx, dy, tmp_s);
    for (std::size_t k = 0; k < dy; ++k) gam[i * dy + k] = tmp_g[k] * z;
    for (std::size_t k = 0; k < dy * dy; ++k) sec[i * dy * dy + k] = tmp_s[k] * z;
  }
  // D phi . sigma dB_i, regenerated from the particle's noise stream. Its conditional mean is
  // zero, so subtracting it leaves the residual mean unchanged and removes most of the noise.
  double brownian_term(const CoeffPoint& p, const Jet& j, std::size_t m, std::size_t i) {
    if (db == 0) return 0.0;
    standard_normals(seed, Stream::signal_noise, m, i, dB);
    const double sq = std::sqrt(dt);
    double out = 0.0;
    for (std::size_t k = 0; k < dx; ++k)
      for (std::size_t q = 0; q < db; ++q) out += j.grad[k] * p.diffusion[k * db + q] * dB[q] * sq;
    return out;
  }
  void end_particle(std::size_t) {
    for (std::size_t w = 0; w < windows->size(); ++w) {
      const auto& win = (*windows)[w];
      double r = phiz[win.b] - phiz[win.a] - (drift[win.b] - drift[win.a]) - (mart[win.b] - mart[win.a]);
      for (std::size_t k = 0; k < dy; ++k) r -= gam[win.a * dy + k] * win.dY[k];
      for (std::size_t k = 0; k < dy * dy; ++k) r -= sec[win.a * dy * dy + k] * win.YY[k];
      sum[w] += r;
      sumsq[w] += r * r;
    }
  }
  void merge(ZakaiObserver&& o) {
    count += o.count;
    for (std::size_t w = 0; w < sum.size(); ++w) {
      sum[w] += o.sum[w];
      sumsq[w] += o.sumsq[w];
    }
  }
};

namespace detail {
inline ResidualResult zakai_result(const ZakaiObserver& obs, const std::vector<WindowIncrement>& windows,
                                   const RoughPath& rp, std::span<const std::size_t> spans,
                                   const Tolerances& tol) {
  ResidualResult res;
  const double n = static_cast<double>(obs.count);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    ResidualWindow rw;
    rw.s_index = windows[w].a;
    rw.t_index = windows[w].b;
    rw.span = windows[w].span;
    rw.s = rp.grid().node(rw.s_index);
    rw.t = rp.grid().node(rw.t_index);
    rw.residual = obs.sum[w] / n;
    const double var = n > 1 ? std::max(0.0, (obs.sumsq[w] - n * rw.residual * rw.residual) / (n - 1.0)) : 0.0;
    rw.noise_floor = std::sqrt(var / n);
    res.windows.push_back(rw);
  }
  fit_scales(res, spans, rp.grid().dt(), tol);
  return res;
}
}  // namespace detail

inline ResidualResult zakai_davie_residual(const ParticleEnsemble& ens, const OperatorContext& ctx,
                                           const TestFunction& phi, std::span<const std::size_t> spans,
                                           std::size_t threads = 1,
                                           const Tolerances& tol = default_tolerances()) {
  const auto windows = dyadic_windows(ctx.driver(), spans);
  ZakaiObserver proto(phi, windows, ctx.ydot(), ctx.coeffs(), ctx.driver().grid().dt(),
                      ctx.driver().grid().nodes(), ens.seed);
  const auto obs = replay_particles(ens, ctx.coeffs(), ctx.driver(), proto, threads);
  return detail::zakai_result(obs, windows, ctx.driver(), spans, tol);
}

// Same estimator without storing the ensemble.
inline ResidualResult zakai_davie_residual(const Model& model, const RoughPath& rp,
                                           const TestFunction& phi, std::span<const std::size_t> spans,
                                           std::size_t M, std::uint64_t seed, std::size_t threads = 1,
                                           const Tolerances& tol = default_tolerances()) {
  const auto windows = dyadic_windows(rp, spans);
  const BracketDerivative yd = bracket_derivative(rp);
  ZakaiObserver proto(phi, windows, yd, model.coeffs, rp.grid().dt(), rp.grid().nodes(), seed);
  const auto obs = simulate_particles(model, rp, M, seed, proto, threads);
  return detail::zakai_result(obs, windows, rp, spans, tol);
}

// Node sums needed by the Kushner-Stratonovich quantities, kept per particle batch.
// Functional layout per node: [Z, phi Z, (A phi) Z, (A 1) Z, (Gamma phi)_k Z, G_kl[phi] Z,
//                              h_k Z, G_kl[1] Z, extra_e Z, C Z-martingale].
// The last slot is the running sum C_i = sum_{r<i} Z_r D phi . sigma dB_r, used as a control variate.
struct KSMoments {
  std::size_t nodes = 0, dy = 1, batches = 1, extras = 0, width = 0;
  std::vector<double> sums;  // [(batch*nodes + i)*width + f]
  std::vector<std::size_t> counts;

  KSMoments() = default;
  KSMoments(std::size_t n, std::size_t dy_, std::size_t b, std::size_t e)
      : nodes(n), dy(dy_), batches(b), extras(e), width(5 + 2 * dy_ + 2 * dy_ * dy_ + e),
        sums(b * n * width, 0.0), counts(b, 0) {}

  std::size_t off_mass() const { return 0; }
  std::size_t off_phi() const { return 1; }
  std::size_t off_Aphi() const { return 2; }
  std::size_t off_A1() const { return 3; }
  std::size_t off_gamma() const { return 4; }
  std::size_t off_sec() const { return 4 + dy; }
  std::size_t off_h() const { return 4 + dy + dy * dy; }
  std::size_t off_sec1() const { return 4 + 2 * dy + dy * dy; }
  std::size_t off_extra() const { return 4 + 2 * dy + 2 * dy * dy; }
  std::size_t off_mart() const { return width - 1; }

  // Sums at node i over one batch, or over all batches when batch == batches.
  std::vector<double> node(std::size_t i, std::size_t batch) const {
    std::vector<double> out(width, 0.0);
    const std::size_t lo = batch == batches ? 0 : batch, hi = batch == batches ? batches : batch + 1;
    for (std::size_t b = lo; b < hi; ++b)
      for (std::size_t f = 0; f < width; ++f) out[f] += sums[(b * nodes + i) * width + f];
    return out;
  }
  std::size_t count(std::size_t batch) const {
    if (batch < batches) return counts[batch];
    std::size_t c = 0;
    for (auto v : counts) c += v;
    return c;
  }
};

struct KSObserver {
  const TestFunction* phi = nullptr;
  const std::vector<TestFunction>* extras = nullptr;
  const BracketDerivative* ydot = nullptr;
  std::size_t dx = 1, dy = 1, db = 1, total = 1;
  double dt = 0.0;
  std::uint64_t seed = 0;
  KSMoments mom;
  Jet jet, one;
  std::vector<double> g, s, dB;
  std::size_t batch = 0;
  double mart = 0.0;

  KSObserver(const TestFunction& f, const std::vector<TestFunction>& ex, const BracketDerivative& yd,
             const CoefficientSet& c, double dt_, std::size_t nodes, std::size_t M, std::size_t batches,
             std::uint64_t seed_)
      : phi(&f), extras(&ex), ydot(&yd), dx(c.dx), dy(c.dy), db(c.db), total(M), dt(dt_), seed(seed_),
        mom(nodes, c.dy, batches, ex.size()), g(c.dy), s(c.dy * c.dy), dB(c.db) {
    one.value = 1.0;
    one.grad.assign(dx, 0.0);
    one.hess.assign(dx * dx, 0.0);
  }

  void begin_particle(std::size_t m) {
    batch = m * mom.batches / total;
    ++mom.counts[batch];
    mart = 0.0;
  }
  void end_particle(std::size_t) {}
  void on_node(std::size_t m, std::size_t i, std::span<const double> x, double z, const CoeffPoint& p) {
    double* row = &mom.sums[(batch * mom.nodes + i) * mom.width];
    const auto yd = ydot->at_node(i);
    jet.evaluate(*phi, x);
    row[mom.off_mass()] += z;
    row[mom.off_phi()] += jet.value * z;
    row[mom.off_Aphi()] += operator_A(p, yd, jet, dx, dy, db) * z;
    row[mom.off_A1()] += p.weight_drift * z;
    operator_Gamma(p, jet, dx, dy, g);
    for (std::size_t k = 0; k < dy; ++k) row[mom.off_gamma() + k] += g[k] * z;
    operator_second_order(p, jet, dx, dy, s);
    for (std::size_t k = 0; k < dy * dy; ++k) row[mom.off_sec() + k] += s[k] * z;
    for (std::size_t k = 0; k < dy; ++k) row[mom.off_h() + k] += p.obs_field[k] * z;
    operator_second_order(p, one, dx, dy, s);
    for (std::size_t k = 0; k < dy * dy; ++k) row[mom.off_sec1() + k] += s[k] * z;
    for (std::size_t e = 0; e < extras->size(); ++e) row[mom.off_extra() + e] += (*extras)[e].value(x) * z;
    row[mom.off_mart()] += mart;
    if (i + 1 < mom.nodes && db > 0) {
      standard_normals(seed, Stream::signal_noise, m, i, dB);
      const double sq = std::sqrt(dt);
      for (std::size_t k = 0; k < dx; ++k)
        for (std::size_t q = 0; q < db; ++q) mart += z * jet.grad[k] * p.diffusion[k * db + q] * dB[q] * sq;
    }
  }
  void merge(KSObserver&& o) {
    for (std::size_t k = 0; k < mom.sums.size(); ++k) mom.sums[k] += o.mom.sums[k];
    for (std::size_t b = 0; b < mom.batches; ++b) mom.counts[b] += o.mom.counts[b];
  }
};

inline constexpr std::size_t kDefaultBatches = 16;

inline KSMoments ks_moments(const ParticleEnsemble& ens, const OperatorContext& ctx, const TestFunction& phi,
                            const std::vector<TestFunction>& extras = {}, std::size_t threads = 1,
                            std::size_t batches = kDefaultBatches) {
  KSObserver proto(phi, extras, ctx.ydot(), ctx.coeffs(), ctx.driver().grid().dt(),
                   ctx.driver().grid().nodes(), ens.particles, std::min(batches, ens.particles), ens.seed);
  return replay_particles(ens, ctx.coeffs(), ctx.driver(), proto, threads).mom;
}

inline KSMoments ks_moments(const Model& model, const RoughPath& rp, const TestFunction& phi,
                            std::size_t M, std::uint64_t seed, const std::vector<TestFunction>& extras = {},
                            std::size_t threads = 1, std::size_t batches = kDefaultBatches) {
  const BracketDerivative yd = bracket_derivative(rp);
  KSObserver proto(phi, extras, yd, model.coeffs, rp.grid().dt(), rp.grid().nodes(), M,
                   std::min(batches, M), seed);
  return simulate_particles(model, rp, M, seed, proto, threads).mom;
}

// Normalised node quantities and the Phi/Psi stack derived from them.
struct KSDerivativeStack {
  std::size_t nodes = 0, dy = 1;
  std::vector<double> sigma_phi, sigma_Aphi, sigma_A1, sigma_h;  // per node (sigma_h: dy)
  std::vector<double> Phi, Phi_prime, Psi, Psi_prime;             // dy, dy^2 per node
  std::vector<double> mass;                                       // mu(1) per node
  std::vector<double> mart, weight_sum;  // control-variate running sums and sum of Z per node
};

inline KSDerivativeStack build_ks_stack(const KSMoments& mom, std::size_t batch,
                                        const Tolerances& tol = default_tolerances()) {
  const std::size_t dy = mom.dy, n = mom.nodes;
  KSDerivativeStack st;
  st.nodes = n;
  st.dy = dy;
  st.sigma_phi.resize(n);
  st.sigma_Aphi.resize(n);
  st.sigma_A1.resize(n);
  st.sigma_h.resize(n * dy);
  st.Phi.resize(n * dy);
  st.Phi_prime.resize(n * dy * dy);
  st.Psi.resize(n * dy);
  st.Psi_prime.resize(n * dy * dy);
  st.mass.resize(n);
  st.mart.resize(n);
  st.weight_sum.resize(n);
  const double cnt = static_cast<double>(mom.count(batch));
  std::vector<double> Sg(dy), H(dy), SG(dy * dy), SG1(dy * dy);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = mom.node(i, batch);
    const double w = row[mom.off_mass()];
    st.mass[i] = w / cnt;
    st.mart[i] = row[mom.off_mart()];
    st.weight_sum[i] = w;
    if (!(st.mass[i] > tol.mass_floor) || !std::isfinite(st.mass[i]))
      throw DegenerateMass("filter mass below the floor at node " + std::to_string(i));
    const double S = row[mom.off_phi()] / w;
    st.sigma_phi[i] = S;
    st.sigma_Aphi[i] = row[mom.off_Aphi()] / w;
    st.sigma_A1[i] = row[mom.off_A1()] / w;
    for (std::size_t k = 0; k < dy; ++k) {
      Sg[k] = row[mom.off_gamma() + k] / w;
      H[k] = row[mom.off_h() + k] / w;
      st.sigma_h[i * dy + k] = H[k];
    }
    for (std::size_t k = 0; k < dy * dy; ++k) {
      SG[k] = row[mom.off_sec() + k] / w;
      SG1[k] = row[mom.off_sec1() + k] / w;
    }
    for (std::size_t k = 0; k < dy; ++k) {
      st.Phi[i * dy + k] = Sg[k] - S * H[k];
      st.Psi[i * dy + k] = H[k];
    }
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) {
        const double dGamma = SG[l * dy + k] - Sg[k] * H[l];   // sigma(Gamma_k phi)'_l
        const double dGamma1 = SG1[l * dy + k] - H[k] * H[l];  // sigma(Gamma_k 1)'_l
        const double Phi_l = Sg[l] - S * H[l];                 // sigma(phi)'_l
        st.Phi_prime[(i * dy + k) * dy + l] = dGamma - Phi_l * H[k] - S * dGamma1;
        st.Psi_prime[(i * dy + k) * dy + l] = dGamma1;
      }
  }
  return st;
}

inline KSDerivativeStack build_ks_stack(const ParticleEnsemble& ens, const OperatorContext& ctx,
                                        const TestFunction& phi, std::size_t threads = 1) {
  const KSMoments mom = ks_moments(ens, ctx, phi, {}, threads);
  return build_ks_stack(mom, mom.batches);
}

namespace detail {
inline std::vector<double> ks_window_residuals(const KSDerivativeStack& st, const RoughPath& rp,
                                               const BracketDerivative& yd,
                                               const std::vector<WindowIncrement>& windows) {
  const std::size_t dy = st.dy;
  const double dt = rp.grid().dt();
  const std::size_t n = st.nodes;
  // prefix of the drift sum_r [sigma(A phi) - sigma(phi) sigma(A 1) - Phi [Ydot] sigma(h)] dt
  std::vector<double> prefix(n, 0.0);
  for (std::size_t r = 0; r + 1 < n; ++r) {
    const auto y = yd.at_step(r);
    double corr = 0.0;
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) corr += st.Phi[r * dy + k] * y[k * dy + l] * st.sigma_h[r * dy + l];
    prefix[r + 1] = prefix[r] + (st.sigma_Aphi[r] - st.sigma_phi[r] * st.sigma_A1[r] - corr) * dt;
  }
  std::vector<double> out(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    double r = st.sigma_phi[win.b] - (st.mart[win.b] - st.mart[win.a]) / st.weight_sum[win.b] -
               st.sigma_phi[win.a] - (prefix[win.b] - prefix[win.a]);
    for (std::size_t k = 0; k < dy; ++k) r -= st.Phi[win.a * dy + k] * win.dY[k];
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) r -= st.Phi_prime[(win.a * dy + l) * dy + k] * win.YY[k * dy + l];
    out[w] = r;
  }
  return out;
}

inline std::vector<double> psi_window_remainders(const KSDerivativeStack& st,
                                                 const std::vector<WindowIncrement>& windows) {
  const std::size_t dy = st.dy;
  std::vector<double> out(windows.size());
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    double sq = 0.0;
    for (std::size_t k = 0; k < dy; ++k) {
      double r = st.Psi[win.b * dy + k] - st.Psi[win.a * dy + k];
      for (std::size_t e = 0; e < dy; ++e) r -= st.Psi_prime[(win.a * dy + k) * dy + e] * win.dY[e];
      sq += r * r;
    }
    out[w] = std::sqrt(sq);
  }
  return out;
}

// Estimates from all particles; noise floors from the spread of per-batch estimates.
template <class Fn>
ResidualResult batched_result(const KSMoments& mom, const RoughPath& rp,
                              const std::vector<WindowIncrement>& windows,
                              std::span<const std::size_t> spans, Fn&& window_values,
                              const Tolerances& tol) {
  const std::vector<double> full = window_values(build_ks_stack(mom, mom.batches, tol));
  std::vector<double> s1(windows.size(), 0.0), s2(windows.size(), 0.0);
  for (std::size_t b = 0; b < mom.batches; ++b) {
    const std::vector<double> v = window_values(build_ks_stack(mom, b, tol));
    for (std::size_t w = 0; w < windows.size(); ++w) {
      s1[w] += v[w];
      s2[w] += v[w] * v[w];
    }
  }
  const double B = static_cast<double>(mom.batches);
  ResidualResult res;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    ResidualWindow rw;
    rw.s_index = windows[w].a;
    rw.t_index = windows[w].b;
    rw.span = windows[w].span;
    rw.s = rp.grid().node(rw.s_index);
    rw.t = rp.grid().node(rw.t_index);
    rw.residual = full[w];
    const double m = s1[w] / B;
    const double var = B > 1 ? std::max(0.0, (s2[w] - B * m * m) / (B - 1.0)) : 0.0;
    rw.noise_floor = std::sqrt(var / B);
    res.windows.push_back(rw);
  }
  fit_scales(res, spans, rp.grid().dt(), tol);
  return res;
}
}  // namespace detail

inline ResidualResult ks_davie_residual(const KSMoments& mom, const RoughPath& rp,
                                        std::span<const std::size_t> spans,
                                        const Tolerances& tol = default_tolerances()) {
  const auto windows = dyadic_windows(rp, spans);
  const BracketDerivative yd = bracket_derivative(rp);
  return detail::batched_result(
      mom, rp, windows, spans,
      [&](const KSDerivativeStack& st) { return detail::ks_window_residuals(st, rp, yd, windows); }, tol);
}

inline ResidualResult ks_davie_residual(const ParticleEnsemble& ens, const OperatorContext& ctx,
                                        const TestFunction& phi, std::span<const std::size_t> spans,
                                        std::size_t threads = 1,
                                        const Tolerances& tol = default_tolerances()) {
  return ks_davie_residual(ks_moments(ens, ctx, phi, {}, threads), ctx.driver(), spans, tol);
}

// Controlled-remainder diagnostic of (Psi, Psi') over dyadic spans.
inline ResidualResult psi_remainder(const KSMoments& mom, const RoughPath& rp,
                                    std::span<const std::size_t> spans,
                                    const Tolerances& tol = default_tolerances()) {
  const auto windows = dyadic_windows(rp, spans);
  return detail::batched_result(
      mom, rp, windows, spans,
      [&](const KSDerivativeStack& st) { return detail::psi_window_remainders(st, windows); }, tol);
}

struct TotalMassReport {
  std::vector<double> total_mass;  // Z^sigma per node
  std::vector<double> mass;        // mu(1) per node
  double max_mass_gap = 0.0;       // max_t |Z^sigma - mu(1)|
  double max_mass = 0.0;
  double max_reconstruction_gap = 0.0;  // max_{t,phi} |Z^sigma sigma(phi) - mu(phi)|
  double max_abs_mu = 0.0;
  bool pass(const Tolerances& tol = default_tolerances()) const {
    return max_mass_gap <= tol.total_mass_relative * max_mass &&
           max_reconstruction_gap <= tol.total_mass_relative * max_abs_mu;
  }
};

// Davie steps of dZ = Z sigma(h) dY (plus sigma(A 1) dt when a weight drift is present),
// checked against the particle mass and the library reconstruction mu(phi) = Z sigma(phi).
inline TotalMassReport total_mass_rde(const KSMoments& mom, const RoughPath& rp,
                                      const Tolerances& tol = default_tolerances()) {
  const KSDerivativeStack st = build_ks_stack(mom, mom.batches, tol);
  const std::size_t dy = st.dy, n = st.nodes;
  const double dt = rp.grid().dt();
  TotalMassReport rep;
  rep.total_mass.assign(n, 1.0);
  rep.mass = st.mass;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    double factor = 1.0 + st.sigma_A1[i] * dt;
    for (std::size_t k = 0; k < dy; ++k) factor += st.Psi[i * dy + k] * rp.increment(i, k);
    const auto YY = rp.second(i);
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l)
        factor += (st.Psi[i * dy + l] * st.Psi[i * dy + k] + st.Psi_prime[(i * dy + l) * dy + k]) * YY[k * dy + l];
    rep.total_mass[i + 1] = rep.total_mass[i] * factor;
  }
  const double cnt = static_cast<double>(mom.count(mom.batches));
  for (std::size_t i = 0; i < n; ++i) {
    rep.max_mass_gap = std::max(rep.max_mass_gap, std::abs(rep.total_mass[i] - rep.mass[i]));
    rep.max_mass = std::max(rep.max_mass, std::abs(rep.mass[i]));
    const auto row = mom.node(i, mom.batches);
    const double w = row[mom.off_mass()];
    for (std::size_t e = 0; e < mom.extras; ++e) {
      const double muv = row[mom.off_extra() + e] / cnt;
      const double sig = row[mom.off_extra() + e] / w;
      rep.max_reconstruction_gap = std::max(rep.max_reconstruction_gap, std::abs(rep.total_mass[i] * sig - muv));
      rep.max_abs_mu = std::max(rep.max_abs_mu, std::abs(muv));
    }
  }
  return rep;
}

inline TotalMassReport total_mass_rde(const ParticleEnsemble& ens, const OperatorContext& ctx,
                                      const std::vector<TestFunction>& library, std::size_t threads = 1,
                                      const Tolerances& tol = default_tolerances()) {
  return total_mass_rde(ks_moments(ens, ctx, constant_function(1.0, ens.dx), library, threads),
                        ctx.driver(), tol);
}

// CSV `s,t,span,residual,noise_floor`.
inline void write_residual_csv(const ResidualResult& r, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "s,t,span,residual,noise_floor\n";
  for (const auto& w : r.windows)
    out << io::num(w.s) << "," << io::num(w.t) << "," << w.span << "," << io::num(w.residual) << ","
        << io::num(w.noise_floor) << "\n";
}

inline nlohmann::json residual_summary(const ResidualResult& r) {
  nlohmann::json j;
  j["exponent"] = std::isfinite(r.exponent) ? nlohmann::json(r.exponent) : nlohmann::json(nullptr);
  auto opt = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j["exponent_all_windows"] = opt(r.exponent_all_windows);
  j["exponent_median"] = opt(r.exponent_median);
  j["usable_scales"] = r.usable_scales;
  j["inconclusive"] = r.inconclusive;
  for (const auto& s : r.scales)
    j["scales"].push_back({{"span", s.span},
                           {"time_span", s.time_span},
                           {"max_residual", s.max_residual},
                           {"noise_floor", s.noise_floor},
                           {"max_residual_all", s.max_residual_all},
                           {"median_residual", s.median_residual},
                           {"usable", s.usable}});
  return j;
}

}  // namespace roughfilter
