#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "classical.hpp"
#include "coefficients.hpp"
#include "errors.hpp"
#include "filter.hpp"
#include "operators.hpp"
#include "random.hpp"
#include "residuals.hpp"
#include "roughpath.hpp"
#include "rsde.hpp"
#include "test_functions.hpp"

namespace roughfilter {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// SVD pseudo-inverse; singular values below rel_threshold * sigma_max count as zero.
inline Eigen::MatrixXd moore_penrose(const Eigen::MatrixXd& a,
                                     double rel_threshold = default_tolerances().svd_relative_threshold,
                                     std::size_t* rank = nullptr) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(a.cols(), a.rows());
  if (a.size() == 0) return out;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double cut = rel_threshold * (s.size() ? s(0) : 0.0);
  std::size_t r = 0;
  for (Eigen::Index k = 0; k < s.size(); ++k) {
    if (!(s(k) > cut) || s(k) == 0.0) continue;
    out += svd.matrixV().col(k) * (1.0 / s(k)) * svd.matrixU().col(k).transpose();
    ++r;
  }
  if (rank) *rank = r;
  return out;
}

// Row-major rows x cols in, row-major cols x rows out.
inline std::vector<double> moore_penrose(std::span<const double> a, std::size_t rows, std::size_t cols,
                                         std::size_t* rank = nullptr) {
  if (a.size() != rows * cols) throw InputError("matrix has the wrong number of entries");
  const Eigen::MatrixXd m = Eigen::Map<const RowMatrix>(a.data(), static_cast<Eigen::Index>(rows),
                                                       static_cast<Eigen::Index>(cols));
  const RowMatrix p = moore_penrose(m, default_tolerances().svd_relative_threshold, rank);
  return std::vector<double>(p.data(), p.data() + p.size());
}

struct PenroseResiduals {
  double aga = 0.0, gag = 0.0, ag_sym = 0.0, ga_sym = 0.0;
  double max() const { return std::max({aga, gag, ag_sym, ga_sym}); }
};

inline PenroseResiduals penrose_residuals(const Eigen::MatrixXd& a, const Eigen::MatrixXd& g) {
  PenroseResiduals r;
  auto norm = [](const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; };
  r.aga = norm(a * g * a - a);
  r.gag = norm(g * a * g - g);
  const Eigen::MatrixXd ag = a * g, ga = g * a;
  r.ag_sym = norm(ag - ag.transpose());
  r.ga_sym = norm(ga - ga.transpose());
  return r;
}

// Signal dX = bbar dt + sigma dB + fbar dB_perp, observation dY = h1 dt + k dW with
// W = B_perp + int h2 dt. Fields take (t, x, y) with y in R^dy. Layouts: fbar [i*dw + w],
// h2 [w], k [kk*dw + w], h1 [kk]; derivative index appended last.
struct DegenerateScenario {
  std::string id = "custom_degenerate";
  std::size_t dx = 1, dy = 1, dw = 1, db = 1;
  Field bbar, sigma, fbar, fbar_dx, fbar_dy, h2, h2_dx, h2_dy, k, h1;
  InitialLaw init;

  std::size_t hat_dim() const { return dy + 2 * dw; }
  void check() const {
    if (!bbar || !sigma || !fbar || !h2 || !k) throw CapabilityError("degenerate scenario lacks a coefficient");
    if (dx == 0 || dy == 0 || dw == 0 || db == 0) throw InputError("degenerate scenario has a zero dimension");
  }
};

inline DegenerateScenario with_fd_derivatives(DegenerateScenario s, double step = 1e-5) {
  if (!s.fbar_dx) s.fbar_dx = detail::fd_derivative(s.fbar, s.dx * s.dw, s.dx, true, step);
  if (!s.fbar_dy) s.fbar_dy = detail::fd_derivative(s.fbar, s.dx * s.dw, s.dy, false, step);
  if (!s.h2_dx) s.h2_dx = detail::fd_derivative(s.h2, s.dw, s.dx, true, step);
  if (!s.h2_dy) s.h2_dy = detail::fd_derivative(s.h2, s.dw, s.dy, false, step);
  return s;
}

// Fine paths (Y, W) under the reference measure: Euler for dY = h1 dt + k dW.
struct ObservationSample {
  TimeGrid fine;
  std::size_t dy = 1, dw = 1;
  std::vector<double> Y, W;
};

inline ObservationSample simulate_observation(const DegenerateScenario& s, const TimeGrid& fine, std::uint64_t seed,
                                              std::uint64_t index = 0) {
  s.check();
  ObservationSample o;
  o.fine = fine;
  o.dy = s.dy;
  o.dw = s.dw;
  o.W = brownian_path(seed, Stream::observation_noise, index, fine.steps, s.dw, fine.dt());
  o.Y.assign(fine.nodes() * s.dy, 0.0);
  std::vector<double> km(s.dy * s.dw), h1(s.dy, 0.0), x0(s.dx, 0.0);
  const double dt = fine.dt();
  for (std::size_t i = 0; i < fine.steps; ++i) {
    const std::span<const double> y(&o.Y[i * s.dy], s.dy);
    s.k(fine.node(i), x0, y, km);
    if (s.h1) s.h1(fine.node(i), x0, y, h1);
    for (std::size_t a = 0; a < s.dy; ++a) {
      double v = h1[a] * dt;
      for (std::size_t w = 0; w < s.dw; ++w) v += km[a * s.dw + w] * (o.W[(i + 1) * s.dw + w] - o.W[i * s.dw + w]);
      o.Y[(i + 1) * s.dy + a] = o.Y[i * s.dy + a] + v;
    }
  }
  return o;
}

struct HatRoughPath {
  RoughPath path;     // dimension dy + 2 dw
  std::vector<double> fine;  // stacked fine samples
  std::size_t dy = 1, dw = 1;
  double max_penrose = 0.0;
  std::size_t min_rank = 0, max_rank = 0;
};

// Stacks (Y, int k^+ (dY - h1 dt), int (I - k^+ k) dW) by left-point fine sums and lifts it.
inline HatRoughPath build_hat_lift(std::span<const double> Y_fine, std::span<const double> W_fine, const Field& k,
                                   const Field& h1, std::size_t dy, std::size_t dw, const TimeGrid& grid,
                                   std::size_t refine, double alpha = 0.45,
                                   std::optional<std::uint64_t> seed = std::nullopt) {
  const std::size_t F = grid.steps * refine, D = dy + 2 * dw;
  if (Y_fine.size() != (F + 1) * dy || W_fine.size() != (F + 1) * dw)
    throw InputError("fine observation paths do not match grid x refine_factor");
  const double dt = grid.dt() / static_cast<double>(refine);
  HatRoughPath h;
  h.dy = dy;
  h.dw = dw;
  h.min_rank = std::max(dy, dw);
  h.fine.assign((F + 1) * D, 0.0);
  std::vector<double> km(dy * dw), h1v(dy, 0.0), x0(1, 0.0), dYc(dy), dW(dw);
  for (std::size_t a = 0; a < dy; ++a) h.fine[a] = Y_fine[a];
  for (std::size_t s = 0; s < F; ++s) {
    const double t = static_cast<double>(s) * dt;
    const std::span<const double> y(&Y_fine[s * dy], dy);
    k(t, x0, y, km);
    if (h1) h1(t, x0, y, h1v);
    const Eigen::MatrixXd K = Eigen::Map<const RowMatrix>(km.data(), static_cast<Eigen::Index>(dy),
                                                         static_cast<Eigen::Index>(dw));
    std::size_t rank = 0;
    const Eigen::MatrixXd Kp = moore_penrose(K, default_tolerances().svd_relative_threshold, &rank);
    h.min_rank = std::min(h.min_rank, rank);
    h.max_rank = std::max(h.max_rank, rank);
    if (s % refine == 0) h.max_penrose = std::max(h.max_penrose, penrose_residuals(K, Kp).max());
    const Eigen::MatrixXd P = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dw), static_cast<Eigen::Index>(dw)) - Kp * K;
    for (std::size_t a = 0; a < dy; ++a) dYc[a] = Y_fine[(s + 1) * dy + a] - Y_fine[s * dy + a] - h1v[a] * dt;
    for (std::size_t w = 0; w < dw; ++w) dW[w] = W_fine[(s + 1) * dw + w] - W_fine[s * dw + w];
    double* prev = &h.fine[s * D];
    double* next = &h.fine[(s + 1) * D];
    for (std::size_t a = 0; a < dy; ++a) next[a] = Y_fine[(s + 1) * dy + a];
    for (std::size_t w = 0; w < dw; ++w) {
      double v1 = 0.0, v2 = 0.0;
      for (std::size_t a = 0; a < dy; ++a) v1 += Kp(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(a)) * dYc[a];
      for (std::size_t u = 0; u < dw; ++u) v2 += P(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(u)) * dW[u];
      next[dy + w] = prev[dy + w] + v1;
      next[dy + dw + w] = prev[dy + dw + w] + v2;
    }
  }
  h.path = lift_ito(grid, D, h.fine, refine, alpha, seed);
  return h;
}

inline HatRoughPath build_hat_lift(const DegenerateScenario& s, const ObservationSample& obs, const TimeGrid& grid,
                                   std::size_t refine, double alpha = 0.45,
                                   std::optional<std::uint64_t> seed = std::nullopt) {
  return build_hat_lift(obs.Y, obs.W, s.k, s.h1, s.dy, s.dw, grid, refine, alpha, seed);
}

namespace detail {
// Wraps a field of (t, x, y) so it reads y from the first dy entries of the hat value.
inline Field on_first_block(Field f, std::size_t dy) {
  return [f = std::move(f), dy](double t, std::span<const double> x, std::span<const double> yhat,
                                std::span<double> out) { f(t, x, yhat.first(dy), out); };
}
}  // namespace detail

// Coefficients on the hat driver: drift bbar - fbar h2, driver fbar on blocks 1 and 2,
// weight field h2^T on blocks 1 and 2, nothing on block 0. Derivatives in yhat live in
// the block-0 columns only.
inline CoefficientSet extended_coefficients(DegenerateScenario s) {
  s.check();
  s = with_fd_derivatives(std::move(s));
  const std::size_t dx = s.dx, dy = s.dy, dw = s.dw, D = s.hat_dim();
  auto sc = std::make_shared<const DegenerateScenario>(std::move(s));
  CoefficientSet c;
  c.name = sc->id + "_extended";
  c.dx = dx;
  c.dy = D;
  c.db = sc->db;
  c.bounded = true;
  c.drift = [sc, dx, dy, dw](double t, std::span<const double> x, std::span<const double> yh, std::span<double> out) {
    const auto y = yh.first(dy);
    std::vector<double> fb(dx * dw), h2(dw);
    sc->bbar(t, x, y, out);
    sc->fbar(t, x, y, fb);
    sc->h2(t, x, y, h2);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t w = 0; w < dw; ++w) out[i] -= fb[i * dw + w] * h2[w];
  };
  c.diffusion = detail::on_first_block(sc->sigma, dy);
  c.driver_field = [sc, dx, dy, dw, D](double t, std::span<const double> x, std::span<const double> yh,
                                       std::span<double> out) {
    std::vector<double> fb(dx * dw);
    sc->fbar(t, x, yh.first(dy), fb);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t w = 0; w < dw; ++w) out[i * D + dy + w] = out[i * D + dy + dw + w] = fb[i * dw + w];
  };
  c.driver_field_dx = [sc, dx, dy, dw, D](double t, std::span<const double> x, std::span<const double> yh,
                                          std::span<double> out) {
    std::vector<double> d(dx * dw * dx);
    sc->fbar_dx(t, x, yh.first(dy), d);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t w = 0; w < dw; ++w)
        for (std::size_t j = 0; j < dx; ++j)
          out[(i * D + dy + w) * dx + j] = out[(i * D + dy + dw + w) * dx + j] = d[(i * dw + w) * dx + j];
  };
  c.driver_field_dy = [sc, dx, dy, dw, D](double t, std::span<const double> x, std::span<const double> yh,
                                          std::span<double> out) {
    std::vector<double> d(dx * dw * dy);
    sc->fbar_dy(t, x, yh.first(dy), d);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t w = 0; w < dw; ++w)
        for (std::size_t l = 0; l < dy; ++l)
          out[(i * D + dy + w) * D + l] = out[(i * D + dy + dw + w) * D + l] = d[(i * dw + w) * dy + l];
  };
  c.obs_field = [sc, dy, dw](double t, std::span<const double> x, std::span<const double> yh, std::span<double> out) {
    std::vector<double> h2(dw);
    sc->h2(t, x, yh.first(dy), h2);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t w = 0; w < dw; ++w) out[dy + w] = out[dy + dw + w] = h2[w];
  };
  c.obs_field_dx = [sc, dx, dy, dw](double t, std::span<const double> x, std::span<const double> yh,
                                    std::span<double> out) {
    std::vector<double> d(dw * dx);
    sc->h2_dx(t, x, yh.first(dy), d);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t w = 0; w < dw; ++w)
      for (std::size_t j = 0; j < dx; ++j) out[(dy + w) * dx + j] = out[(dy + dw + w) * dx + j] = d[w * dx + j];
  };
  c.obs_field_dy = [sc, dy, dw, D](double t, std::span<const double> x, std::span<const double> yh,
                                   std::span<double> out) {
    std::vector<double> d(dw * dy);
    sc->h2_dy(t, x, yh.first(dy), d);
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t w = 0; w < dw; ++w)
      for (std::size_t l = 0; l < dy; ++l) out[(dy + w) * D + l] = out[(dy + dw + w) * D + l] = d[w * dy + l];
  };
  return c;
}

inline Model extended_model(const DegenerateScenario& s) {
  Model m;
  m.id = s.id;
  m.coeffs = extended_coefficients(s);
  m.init = s.init;
  return m;
}

// The same scenario through the non-degenerate reduction; needs dw = dy and no h1.
inline Model nondegenerate_model(DegenerateScenario s) {
  s.check();
  if (s.dw != s.dy) throw CapabilityError("non-degenerate reduction needs d_W = d_Y");
  if (s.h1) throw CapabilityError("non-degenerate reduction assumes h1 = 0");
  s = with_fd_derivatives(std::move(s));
  ReductionInput in;
  in.dx = s.dx;
  in.dy = s.dy;
  in.fbar = s.fbar;
  in.fbar_dx = s.fbar_dx;
  in.fbar_dy = s.fbar_dy;
  in.h2 = s.h2;
  in.h2_dx = s.h2_dx;
  in.h2_dy = s.h2_dy;
  in.k = s.k;
  const ReducedFields r = reduce_to_nondegenerate(in);
  CoefficientSet c;
  c.name = s.id + "_reduced";
  c.dx = s.dx;
  c.dy = s.dy;
  c.db = s.db;
  const std::size_t dx = s.dx, dw = s.dw;
  c.drift = [s, dx, dw](double t, std::span<const double> x, std::span<const double> y, std::span<double> out) {
    std::vector<double> fb(dx * dw), h2(dw);
    s.bbar(t, x, y, out);
    s.fbar(t, x, y, fb);
    s.h2(t, x, y, h2);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t w = 0; w < dw; ++w) out[i] -= fb[i * dw + w] * h2[w];
  };
  c.diffusion = s.sigma;
  c = with_reduced_fields(std::move(c), r);
  Model m;
  m.id = s.id + "_reduced";
  m.coeffs = std::move(c);
  m.init = s.init;
  return m;
}

// Rank-one observation noise: d_X = d_Y = 1, d_W = 2, k(y) = (1, 0.5 + 0.2 sin y).
inline DegenerateScenario degenerate_rank1() {
  DegenerateScenario s;
  s.id = "degenerate_rank1";
  s.dx = 1;
  s.dy = 1;
  s.dw = 2;
  s.db = 1;
  s.bbar = [](double, std::span<const double> x, std::span<const double> y, std::span<double> o) {
    o[0] = -std::tanh(x[0]) + 0.2 * std::cos(y[0]);
  };
  s.sigma = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = 0.5 + 0.1 * std::sin(x[0]);
  };
  s.fbar = [](double, std::span<const double> x, std::span<const double> y, std::span<double> o) {
    o[0] = 0.4 * std::cos(x[0]);
    o[1] = 0.3 + 0.1 * std::sin(y[0]);
  };
  s.fbar_dx = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = -0.4 * std::sin(x[0]);
    o[1] = 0.0;
  };
  s.fbar_dy = [](double, std::span<const double>, std::span<const double> y, std::span<double> o) {
    o[0] = 0.0;
    o[1] = 0.1 * std::cos(y[0]);
  };
  s.h2 = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = 0.8 * std::tanh(x[0]);
    o[1] = 0.3 * std::sin(x[0]);
  };
  s.h2_dx = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    const double c = 1.0 / std::cosh(x[0]);
    o[0] = 0.8 * c * c;
    o[1] = 0.3 * std::cos(x[0]);
  };
  s.h2_dy = zero_field();
  s.k = [](double, std::span<const double>, std::span<const double> y, std::span<double> o) {
    o[0] = 1.0;
    o[1] = 0.5 + 0.2 * std::sin(y[0]);
  };
  s.init.mean = {0.5};
  s.init.stddev = {0.5};
  return s;
}

// Invertible scalar version of the bounded model with mildly y-dependent k, for the reduction check.
inline DegenerateScenario invertible_scalar_scenario() {
  DegenerateScenario s;
  s.id = "invertible_scalar";
  s.bbar = [](double, std::span<const double> x, std::span<const double> y, std::span<double> o) {
    o[0] = -std::tanh(x[0]) + 0.2 * std::cos(y[0]);
  };
  s.sigma = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = 0.5 + 0.1 * std::sin(x[0]);
  };
  s.fbar = [](double, std::span<const double> x, std::span<const double> y, std::span<double> o) {
    o[0] = 0.4 * std::cos(x[0]) + 0.2 * std::sin(y[0]);
  };
  s.fbar_dx = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = -0.4 * std::sin(x[0]);
  };
  s.fbar_dy = [](double, std::span<const double>, std::span<const double> y, std::span<double> o) {
    o[0] = 0.2 * std::cos(y[0]);
  };
  s.h2 = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    o[0] = 0.8 * std::tanh(x[0]);
  };
  s.h2_dx = [](double, std::span<const double> x, std::span<const double>, std::span<double> o) {
    const double c = 1.0 / std::cosh(x[0]);
    o[0] = 0.8 * c * c;
  };
  s.h2_dy = zero_field();
  s.k = [](double, std::span<const double>, std::span<const double> y, std::span<double> o) {
    o[0] = 1.0 + 0.2 * std::sin(y[0]);
  };
  s.init.mean = {0.5};
  s.init.stddev = {0.5};
  return s;
}

struct DegenerateFilterResult {
  NodeMoments moments;
  std::vector<TestFunction> phis;
  double max_penrose = 0.0;
  std::size_t min_rank = 0, max_rank = 0;
};

inline DegenerateFilterResult degenerate_filter(const DegenerateScenario& s, const HatRoughPath& hat,
                                                const std::vector<TestFunction>& phis, std::size_t M,
                                                std::uint64_t seed, std::size_t threads = 1) {
  if (hat.path.dim() != s.hat_dim()) throw InputError("hat lift dimension does not match the scenario");
  DegenerateFilterResult r;
  r.moments = filter_moments(extended_model(s), hat.path, phis, M, seed, threads);
  r.phis = phis;
  r.max_penrose = hat.max_penrose;
  r.min_rank = hat.min_rank;
  r.max_rank = hat.max_rank;
  return r;
}

inline ResidualResult degenerate_zakai_residual(const DegenerateScenario& s, const HatRoughPath& hat,
                                                const TestFunction& phi, const std::vector<std::size_t>& spans,
                                                std::size_t M, std::uint64_t seed, std::size_t threads = 1,
                                                const Tolerances& tol = default_tolerances()) {
  return zakai_davie_residual(extended_model(s), hat.path, phi, spans, M, seed, threads, tol);
}

struct ReductionComparison {
  std::vector<std::string> phis;
  std::vector<double> extended, reduced, diff;
  double max_diff = 0.0, max_penrose = 0.0, tolerance = 0.0;
  bool pass = false;
};

// Invertible k: terminal mu_T(phi) from the hat pipeline and from the reduced pipeline, same seeds.
inline ReductionComparison reduction_consistency(const DegenerateScenario& s, const TimeGrid& grid, std::size_t refine,
                                                 std::size_t M, std::uint64_t master_seed, double alpha = 0.45,
                                                 std::size_t threads = 1,
                                                 const Tolerances& tol = default_tolerances()) {
  const TimeGrid fine(grid.horizon, grid.steps * refine);
  const ObservationSample obs = simulate_observation(s, fine, derive_seed(master_seed, "observation", 0));
  const HatRoughPath hat = build_hat_lift(s, obs, grid, refine, alpha);
  const RoughPath lift = lift_ito(grid, s.dy, obs.Y, refine, alpha);
  const auto phis = test_function_library(s.dx);
  const std::uint64_t seed = derive_seed(master_seed, "rough_filter", 0);
  const NodeMoments ext = filter_moments(extended_model(s), hat.path, phis, M, seed, threads);
  const NodeMoments red = filter_moments(nondegenerate_model(s), lift, phis, M, seed, threads);
  ReductionComparison r;
  r.tolerance = tol.degenerate_scheme;
  r.max_penrose = hat.max_penrose;
  const std::size_t last = grid.steps;
  for (std::size_t j = 0; j < phis.size(); ++j) {
    r.phis.push_back(phis[j].name);
    r.extended.push_back(ext.mean(last, j));
    r.reduced.push_back(red.mean(last, j));
    r.diff.push_back(r.extended.back() - r.reduced.back());
    r.max_diff = std::max(r.max_diff, std::abs(r.diff.back()));
  }
  r.pass = r.max_diff <= r.tolerance && r.max_penrose <= tol.penrose_identity;
  return r;
}

namespace detail {
// Accumulates sum_r mu_r(G_kappa phi) dYhat^kappa_r over the block-2 (kernel) components.
struct KernelIntegralObserver {
  const TestFunction* phi = nullptr;
  std::size_t dx = 1, D = 1, first = 0, count = 0;
  std::vector<double> g;  // per (node, kappa in block 2): sum Z G_kappa phi
  std::size_t particles = 0;
  Jet jet;

  void begin_particle(std::size_t) { ++particles; }
  void end_particle(std::size_t) {}
  void on_node(std::size_t, std::size_t i, std::span<const double> x, double z, const CoeffPoint& p) {
    jet.evaluate(*phi, x);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t kappa = first + c;
      double v = p.obs_field[kappa] * jet.value;
      for (std::size_t a = 0; a < dx; ++a) v += p.driver_field[a * D + kappa] * jet.grad[a];
      g[i * count + c] += z * v;
    }
  }
  void merge(KernelIntegralObserver&& o) {
    particles += o.particles;
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += o.g[k];
  }
};
}  // namespace detail

struct KernelProjectionCheck {
  std::vector<double> integrals;  // one per kernel-noise draw
  double mean = 0.0, std_error = 0.0;
  bool pass = false;
};

// Fixed Y, fresh kernel noise per draw: the block-2 integral of mu(G phi) must average to zero.
inline KernelProjectionCheck kernel_projection_check(const DegenerateScenario& s, const TimeGrid& grid,
                                                     std::size_t refine, const TestFunction& phi,
                                                     std::size_t draws, std::size_t M, std::uint64_t master_seed,
                                                     double alpha = 0.45, std::size_t threads = 1,
                                                     const Tolerances& tol = default_tolerances()) {
  if (draws < 2) throw InputError("kernel projection check needs at least two draws");
  const TimeGrid fine(grid.horizon, grid.steps * refine);
  const ObservationSample obs = simulate_observation(s, fine, derive_seed(master_seed, "observation", 0));
  const Model model = extended_model(s);
  const std::size_t D = s.hat_dim();
  KernelProjectionCheck out;
  for (std::size_t d = 0; d < draws; ++d) {
    // fresh W; Y is kept, so only the kernel block of the lift changes
    const auto W = brownian_path(derive_seed(master_seed, "kernel_noise", d), Stream::hidden_noise, 0, fine.steps,
                                 s.dw, fine.dt());
    const HatRoughPath hat = build_hat_lift(obs.Y, W, s.k, s.h1, s.dy, s.dw, grid, refine, alpha);
    detail::KernelIntegralObserver proto;
    proto.phi = &phi;
    proto.dx = s.dx;
    proto.D = D;
    proto.first = s.dy + s.dw;
    proto.count = s.dw;
    proto.g.assign(grid.nodes() * s.dw, 0.0);
    const auto res = simulate_particles(model, hat.path, M, derive_seed(master_seed, "rough_filter", d), proto, threads);
    double I = 0.0;
    for (std::size_t i = 0; i < grid.steps; ++i)
      for (std::size_t c = 0; c < s.dw; ++c)
        I += res.g[i * s.dw + c] / static_cast<double>(M) * hat.path.increment(i, proto.first + c);
    out.integrals.push_back(I);
  }
  out.mean = pairwise_sum(out.integrals) / static_cast<double>(draws);
  out.std_error = sample_stderr(out.integrals);
  out.pass = std::abs(out.mean) <= tol.noise_multiple * out.std_error;
  return out;
}

}  // namespace roughfilter
