#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "coefficients.hpp"
#include "errors.hpp"
#include "filter.hpp"
#include "io.hpp"
#include "models.hpp"
#include "random.hpp"
#include "reduce.hpp"
#include "roughpath.hpp"
#include "rsde.hpp"
#include "test_functions.hpp"

namespace roughfilter {

// Scalar linear-Gaussian parameters: dX = a X dt + sigma dB + fbar dW, dY = hmat X dt + k dW.
struct LinearGaussianParams {
  double a = -1.0, sigma = 1.0, hmat = 1.0, k = 1.0, fbar = 0.0;
  double m0 = 0.0, P0 = 1.0;

  void check() const {
    if (!(P0 >= 0.0)) throw InputError("initial variance P0 must be nonnegative");
    if (k == 0.0) throw InputError("observation noise k must be nonzero");
  }
};

// Coefficients under the reference measure plus the observation noise loading k(t, y).
struct ClassicalScenario {
  Model model;
  Field obs_noise;  // k (dy x dw), x argument ignored
  std::size_t dw = 1;
  bool linear_gaussian = false;
  std::optional<LinearGaussianParams> lg;
};

inline Model lg_model(const LinearGaussianParams& p, bool correlated) {
  p.check();
  ScalarCoefficients s;
  const double fk = correlated ? p.fbar / p.k : 0.0;
  const double a = p.a, hm = p.hmat, k = p.k, fb = correlated ? p.fbar : 0.0;
  s.drift = [a, fb, hm, k](double, double x, double) { return a * x - fb * hm * x / k; };
  s.diffusion = [sg = p.sigma](double, double, double) { return sg; };
  s.driver = [fk](double, double, double) { return fk; };
  s.obs = [hm, k](double, double x, double) { return hm * x / (k * k); };
  s.obs_dx = [hm, k](double, double, double) { return hm / (k * k); };
  Model m;
  m.id = correlated ? "lg_correlated" : "lg_uncorrelated";
  m.coeffs = make_scalar_coefficients(s, m.id);
  m.coeffs.bounded = false;
  m.init.mean = {p.m0};
  m.init.stddev = {std::sqrt(p.P0)};
  return m;
}

inline ClassicalScenario lg_scenario(const LinearGaussianParams& p, bool correlated) {
  ClassicalScenario s;
  s.model = lg_model(p, correlated);
  s.obs_noise = constant_field({p.k});
  s.dw = 1;
  s.linear_gaussian = true;
  s.lg = p;
  return s;
}

inline ClassicalScenario scalar_scenario(Model m, double k = 1.0) {
  ClassicalScenario s;
  s.model = std::move(m);
  s.obs_noise = constant_field({k});
  return s;
}

// Cumulative Brownian path on `steps` steps of size dt, dim components, keyed (seed, stream, index, step).
inline std::vector<double> brownian_path(std::uint64_t seed, Stream stream, std::size_t index,
                                         std::size_t steps, std::size_t dim, double dt) {
  std::vector<double> out((steps + 1) * dim, 0.0), z(dim);
  const double sq = std::sqrt(dt);
  for (std::size_t s = 0; s < steps; ++s) {
    standard_normals(seed, stream, index, s, z);
    for (std::size_t a = 0; a < dim; ++a) out[(s + 1) * dim + a] = out[s * dim + a] + sq * z[a];
  }
  return out;
}

// Ito lift of a scaled Brownian sample drawn on the refined grid.
inline RoughPath brownian_ito_lift(const TimeGrid& grid, std::size_t dim, std::size_t refine, double alpha,
                                   std::uint64_t seed, double scale = 1.0) {
  auto fine = brownian_path(seed, Stream::observation_noise, 0, grid.steps * refine, dim,
                            grid.dt() / static_cast<double>(refine));
  for (double& v : fine) v *= scale;
  return lift_ito(grid, dim, fine, refine, alpha, seed);
}

struct SystemPath {
  TimeGrid grid;
  std::size_t dx = 1, dy = 1, dw = 1, db = 1;
  std::vector<double> B, W, Y, X, Z;  // node-major
};

// Left-point Euler for dX = b dt + sigma dB + f dY, dY = k dW (+ k k^T h^T dt under the
// physical measure), Z_{i+1} = Z_i (1 + h dY_i). B uses the signal-noise stream of
// `particle`, so with f = 0 the signal matches solve_signal on a zero driver.
inline SystemPath simulate_system(const ClassicalScenario& scn, const TimeGrid& grid, std::uint64_t seed,
                                  bool physical_measure = false, std::size_t particle = 0,
                                  const Tolerances& tol = default_tolerances()) {
  const CoefficientSet& c = scn.model.coeffs;
  c.require_complete();
  if (!scn.obs_noise) throw CapabilityError("scenario lacks the observation noise k");
  const std::size_t dx = c.dx, dy = c.dy, dw = scn.dw, db = c.db, N = grid.steps;
  const double dt = grid.dt(), sq = std::sqrt(dt);
  SystemPath p;
  p.grid = grid;
  p.dx = dx;
  p.dy = dy;
  p.dw = dw;
  p.db = db;
  p.B.assign((N + 1) * db, 0.0);
  p.W.assign((N + 1) * dw, 0.0);
  p.Y.assign((N + 1) * dy, 0.0);
  p.X.assign((N + 1) * dx, 0.0);
  p.Z.assign(N + 1, 1.0);
  std::vector<double> x(dx), dB(db), dW(dw), dY(dy), kmat(dy * dw), b(dx), sig(dx * db), f(dx * dy), h(dy);
  scn.model.init.sample(seed, particle, x);
  std::copy(x.begin(), x.end(), p.X.begin());
  for (std::size_t i = 0; i < N; ++i) {
    const double t = grid.node(i);
    const std::span<const double> y(&p.Y[i * dy], dy);
    standard_normals(seed, Stream::signal_noise, particle, i, dB);
    standard_normals(seed, Stream::observation_noise, particle, i, dW);
    for (double& v : dB) v *= sq;
    for (double& v : dW) v *= sq;
    scn.obs_noise(t, x, y, kmat);
    c.drift(t, x, y, b);
    c.diffusion(t, x, y, sig);
    c.driver_field(t, x, y, f);
    c.obs_field(t, x, y, h);
    for (std::size_t k = 0; k < dy; ++k) {
      double v = 0.0;
      for (std::size_t w = 0; w < dw; ++w) v += kmat[k * dw + w] * dW[w];
      if (physical_measure)  // k k^T h^T dt
        for (std::size_t w = 0; w < dw; ++w)
          for (std::size_t l = 0; l < dy; ++l) v += kmat[k * dw + w] * kmat[l * dw + w] * h[l] * dt;
      dY[k] = v;
    }
    double factor = 1.0;
    for (std::size_t k = 0; k < dy; ++k) factor += h[k] * dY[k];
    for (std::size_t a = 0; a < dx; ++a) {
      double v = b[a] * dt;
      for (std::size_t q = 0; q < db; ++q) v += sig[a * db + q] * dB[q];
      for (std::size_t k = 0; k < dy; ++k) v += f[a * dy + k] * dY[k];
      x[a] += v;
      if (!std::isfinite(x[a]) || std::abs(x[a]) > tol.blowup_state)
        throw NumericalBlowUp("classical signal left the admissible range", i + 1, particle);
    }
    for (std::size_t q = 0; q < db; ++q) p.B[(i + 1) * db + q] = p.B[i * db + q] + dB[q];
    for (std::size_t w = 0; w < dw; ++w) p.W[(i + 1) * dw + w] = p.W[i * dw + w] + dW[w];
    for (std::size_t k = 0; k < dy; ++k) p.Y[(i + 1) * dy + k] = p.Y[i * dy + k] + dY[k];
    std::copy(x.begin(), x.end(), p.X.begin() + static_cast<std::ptrdiff_t>((i + 1) * dx));
    p.Z[i + 1] = p.Z[i] * factor;
    if (!std::isfinite(p.Z[i + 1]) || std::abs(p.Z[i + 1]) > tol.blowup_weight)
      throw NumericalBlowUp("classical weight left the admissible range", i + 1, particle);
  }
  return p;
}

// Inputs of the non-degenerate reduction. Layouts: fbar [i*dw + w], h2 [w], k [kk*dw + w];
// derivatives append the derivative index last. Missing derivative callables are filled
// by central differences.
struct ReductionInput {
  std::size_t dx = 1, dy = 1;  // dw = dy
  Field fbar, fbar_dx, fbar_dy, h2, h2_dx, h2_dy, k, k_dy;
};

struct ReducedFields {
  Field driver_field, driver_field_dy, driver_field_dx, obs_field, obs_field_dy, obs_field_dx;
  std::vector<double> condition_numbers;  // at the probes
};

namespace detail {
inline Eigen::MatrixXd inverse_at(const Field& k, std::size_t d, double t, std::span<const double> x,
                                  std::span<const double> y) {
  std::vector<double> km(d * d);
  k(t, x, y, km);
  Eigen::MatrixXd K(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) K(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = km[r * d + c];
  Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
  if (!lu.isInvertible()) {
    std::string where = "t=" + io::num(t) + " y=(";
    for (std::size_t a = 0; a < y.size(); ++a) where += (a ? "," : "") + io::num(y[a]);
    throw InputError("observation noise k is singular at " + where + ")");
  }
  return lu.inverse();
}

inline double condition_number(const Eigen::MatrixXd& K) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(K);
  const auto& s = svd.singularValues();
  return s(s.size() - 1) > 0 ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
}
}  // namespace detail

// f = fbar k^{-1}, h = h2^T k^{-1}, with D_y k^{-1} = -k^{-1} (D_y k) k^{-1}.
inline ReducedFields reduce_to_nondegenerate(ReductionInput in, std::size_t probes = 100,
                                             std::uint64_t seed = 17, double fd_step = 1e-5) {
  const std::size_t dx = in.dx, d = in.dy;
  if (!in.fbar || !in.h2 || !in.k) throw CapabilityError("reduction needs fbar, h2 and k");
  if (!in.fbar_dx) in.fbar_dx = detail::fd_derivative(in.fbar, dx * d, dx, true, fd_step);
  if (!in.fbar_dy) in.fbar_dy = detail::fd_derivative(in.fbar, dx * d, d, false, fd_step);
  if (!in.h2_dx) in.h2_dx = detail::fd_derivative(in.h2, d, dx, true, fd_step);
  if (!in.h2_dy) in.h2_dy = detail::fd_derivative(in.h2, d, d, false, fd_step);
  if (!in.k_dy) in.k_dy = detail::fd_derivative(in.k, d * d, d, false, fd_step);
  auto shared = std::make_shared<const ReductionInput>(std::move(in));

  ReducedFields out;
  std::vector<double> z(dx + d + 1);
  for (std::size_t q = 0; q < probes; ++q) {
    standard_normals(seed, Stream::probe, q, 0, z);
    std::vector<double> x(dx), y(d);
    for (std::size_t a = 0; a < dx; ++a) x[a] = std::clamp(z[a], -2.0, 2.0);
    for (std::size_t a = 0; a < d; ++a) y[a] = std::clamp(z[dx + a], -2.0, 2.0);
    const double t = unit_open(splitmix64(seed ^ q));
    std::vector<double> km(d * d);
    shared->k(t, x, y, km);
    Eigen::MatrixXd K = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        km.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    (void)detail::inverse_at(shared->k, d, t, x, y);
    out.condition_numbers.push_back(detail::condition_number(K));
  }

  // f^i_kk = sum_w fbar^i_w Kinv_{w kk}
  out.driver_field = [s = shared, dx, d](double t, std::span<const double> x, std::span<const double> y,
                                         std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    std::vector<double> fb(dx * d);
    s->fbar(t, x, y, fb);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t kk = 0; kk < d; ++kk) {
        double v = 0.0;
        for (std::size_t w = 0; w < d; ++w) v += fb[i * d + w] * Ki(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(kk));
        res[i * d + kk] = v;
      }
  };
  out.driver_field_dx = [s = shared, dx, d](double t, std::span<const double> x, std::span<const double> y,
                                            std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    std::vector<double> dfb(dx * d * dx);
    s->fbar_dx(t, x, y, dfb);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t kk = 0; kk < d; ++kk)
        for (std::size_t j = 0; j < dx; ++j) {
          double v = 0.0;
          for (std::size_t w = 0; w < d; ++w)
            v += dfb[(i * d + w) * dx + j] * Ki(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(kk));
          res[(i * d + kk) * dx + j] = v;
        }
  };
  // D_l Kinv = -Kinv (D_l k) Kinv
  auto dinv = [](const ReductionInput& s, const Eigen::MatrixXd& Ki, std::size_t d, double t,
                 std::span<const double> x, std::span<const double> y) {
    std::vector<double> dk(d * d * d);
    s.k_dy(t, x, y, dk);
    std::vector<Eigen::MatrixXd> out(d);
    for (std::size_t l = 0; l < d; ++l) {
      Eigen::MatrixXd D(d, d);
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c)
          D(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = dk[(r * d + c) * d + l];
      out[l] = -Ki * D * Ki;
    }
    return out;
  };
  out.driver_field_dy = [s = shared, dx, d, dinv](double t, std::span<const double> x,
                                                  std::span<const double> y, std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    const auto dKi = dinv(*s, Ki, d, t, x, y);
    std::vector<double> fb(dx * d), dfb(dx * d * d);
    s->fbar(t, x, y, fb);
    s->fbar_dy(t, x, y, dfb);
    for (std::size_t i = 0; i < dx; ++i)
      for (std::size_t kk = 0; kk < d; ++kk)
        for (std::size_t l = 0; l < d; ++l) {
          double v = 0.0;
          for (std::size_t w = 0; w < d; ++w) {
            const auto W = static_cast<Eigen::Index>(w), KK = static_cast<Eigen::Index>(kk);
            v += dfb[(i * d + w) * d + l] * Ki(W, KK) + fb[i * d + w] * dKi[l](W, KK);
          }
          res[(i * d + kk) * d + l] = v;
        }
  };
  out.obs_field = [s = shared, d](double t, std::span<const double> x, std::span<const double> y,
                                  std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    std::vector<double> h2(d);
    s->h2(t, x, y, h2);
    for (std::size_t kk = 0; kk < d; ++kk) {
      double v = 0.0;
      for (std::size_t w = 0; w < d; ++w) v += h2[w] * Ki(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(kk));
      res[kk] = v;
    }
  };
  out.obs_field_dx = [s = shared, dx, d](double t, std::span<const double> x, std::span<const double> y,
                                         std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    std::vector<double> dh(d * dx);
    s->h2_dx(t, x, y, dh);
    for (std::size_t kk = 0; kk < d; ++kk)
      for (std::size_t j = 0; j < dx; ++j) {
        double v = 0.0;
        for (std::size_t w = 0; w < d; ++w)
          v += dh[w * dx + j] * Ki(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(kk));
        res[kk * dx + j] = v;
      }
  };
  out.obs_field_dy = [s = shared, d, dinv](double t, std::span<const double> x, std::span<const double> y,
                                           std::span<double> res) {
    const Eigen::MatrixXd Ki = detail::inverse_at(s->k, d, t, x, y);
    const auto dKi = dinv(*s, Ki, d, t, x, y);
    std::vector<double> h2(d), dh(d * d);
    s->h2(t, x, y, h2);
    s->h2_dy(t, x, y, dh);
    for (std::size_t kk = 0; kk < d; ++kk)
      for (std::size_t l = 0; l < d; ++l) {
        double v = 0.0;
        for (std::size_t w = 0; w < d; ++w) {
          const auto W = static_cast<Eigen::Index>(w), KK = static_cast<Eigen::Index>(kk);
          v += dh[w * d + l] * Ki(W, KK) + h2[w] * dKi[l](W, KK);
        }
        res[kk * d + l] = v;
      }
  };
  return out;
}

// Installs reduced (f, h) into a coefficient set; drift must already be b = bbar - fbar h2.
inline CoefficientSet with_reduced_fields(CoefficientSet c, const ReducedFields& r) {
  c.driver_field = r.driver_field;
  c.driver_field_dx = r.driver_field_dx;
  c.driver_field_dy = r.driver_field_dy;
  c.obs_field = r.obs_field;
  c.obs_field_dx = r.obs_field_dx;
  c.obs_field_dy = r.obs_field_dy;
  return c;
}

struct KalmanPath {
  std::vector<double> mean, variance;  // per node
};

// Scalar Kalman-Bucy filter for dX = a X dt + sigma dB, dY = hmat X dt + k dW.
// Riccati  P' = 2 a P + sigma^2 - (hmat P)^2 / k^2  by RK4; mean by Euler on the observed increments.
inline KalmanPath kalman_bucy(const LinearGaussianParams& p, std::span<const double> Y, const TimeGrid& grid) {
  p.check();
  if (Y.size() != grid.nodes()) throw InputError("observation path does not match the grid");
  const double dt = grid.dt(), k2 = p.k * p.k;
  auto ric = [&](double P) { return 2.0 * p.a * P + p.sigma * p.sigma - p.hmat * p.hmat * P * P / k2; };
  KalmanPath out;
  out.mean.resize(grid.nodes());
  out.variance.resize(grid.nodes());
  double m = p.m0, P = p.P0;
  for (std::size_t i = 0;; ++i) {
    out.mean[i] = m;
    out.variance[i] = P;
    if (i == grid.steps) break;
    const double dY = Y[i + 1] - Y[i];
    m += p.a * m * dt + (P * p.hmat / k2) * (dY - p.hmat * m * dt);
    const double k1 = ric(P), kk2 = ric(P + 0.5 * dt * k1), k3 = ric(P + 0.5 * dt * kk2), k4 = ric(P + dt * k3);
    P += dt / 6.0 * (k1 + 2.0 * kk2 + 2.0 * k3 + k4);
  }
  return out;
}

// Positive root of 2 a P + sigma^2 - hmat^2 P^2 / k^2 = 0 (or sigma^2 / (-2a) when hmat = 0).
inline double riccati_steady_state(const LinearGaussianParams& p) {
  if (p.hmat == 0.0) {
    if (!(p.a < 0.0)) throw InputError("no steady state for a >= 0 without observations");
    return p.sigma * p.sigma / (-2.0 * p.a);
  }
  const double q = p.hmat * p.hmat / (p.k * p.k);
  return (p.a + std::sqrt(p.a * p.a + q * p.sigma * p.sigma)) / q;
}

// E[phi(X_t) Z_t | Y] at the coarse nodes by M Euler paths on the fine grid of a fixed Y.
// Fine step s of particle m draws B from (seed, m, s).
inline NodeMoments conditional_mc_filter(const Model& model, std::span<const double> Y_fine,
                                         const TimeGrid& coarse, std::size_t refine,
                                         const std::vector<TestFunction>& phis, std::size_t M,
                                         std::uint64_t seed, std::size_t threads = 1,
                                         const Tolerances& tol = default_tolerances()) {
  const CoefficientSet& c = model.coeffs;
  c.require_complete();
  const std::size_t dx = c.dx, dy = c.dy, db = c.db;
  const std::size_t fine_steps = coarse.steps * refine;
  if (Y_fine.size() != (fine_steps + 1) * dy) throw InputError("fine observation path has the wrong length");
  if (M < 1) throw InputError("particle count must be at least 1");
  const double dt = coarse.dt() / static_cast<double>(refine), sq = std::sqrt(dt);
  const std::size_t blocks = (M + kParticleBlock - 1) / kParticleBlock;
  TreeReducer<NodeMoments> reducer([](NodeMoments& a, NodeMoments&& b) { a.add(b); });
  run_blocks<NodeMoments>(
      blocks, threads,
      [&](std::size_t blk) {
        NodeMoments mom(coarse.nodes(), phis.size());
        std::vector<double> x(dx), dB(db), b(dx), sig(dx * db), f(dx * dy), h(dy), dY(dy);
        for (std::size_t m = blk * kParticleBlock; m < std::min(M, (blk + 1) * kParticleBlock); ++m) {
          ++mom.count;
          model.init.sample(seed, m, x);
          double z = 1.0;
          for (std::size_t s = 0;; ++s) {
            if (s % refine == 0) {
              const std::size_t r = s / refine;
              mom.mass1[r] += z;
              mom.mass2[r] += z * z;
              for (std::size_t j = 0; j < phis.size(); ++j) {
                const double g = phis[j].value(x) * z;
                const std::size_t idx = r * mom.funcs + j;
                mom.s1[idx] += g;
                mom.s2[idx] += g * g;
                mom.cross[idx] += g * z;
              }
            }
            if (s == fine_steps) break;
            const double t = static_cast<double>(s) * dt;
            const std::span<const double> y(&Y_fine[s * dy], dy);
            for (std::size_t k = 0; k < dy; ++k) dY[k] = Y_fine[(s + 1) * dy + k] - Y_fine[s * dy + k];
            standard_normals(seed, Stream::signal_noise, m, s, dB);
            c.drift(t, x, y, b);
            c.diffusion(t, x, y, sig);
            c.driver_field(t, x, y, f);
            c.obs_field(t, x, y, h);
            double factor = 1.0;
            for (std::size_t k = 0; k < dy; ++k) factor += h[k] * dY[k];
            for (std::size_t a = 0; a < dx; ++a) {
              double v = b[a] * dt;
              for (std::size_t q = 0; q < db; ++q) v += sig[a * db + q] * dB[q] * sq;
              for (std::size_t k = 0; k < dy; ++k) v += f[a * dy + k] * dY[k];
              x[a] += v;
              if (!std::isfinite(x[a]) || std::abs(x[a]) > tol.blowup_state)
                throw NumericalBlowUp("conditional MC signal left the admissible range", s + 1, m);
            }
            z *= factor;
            if (!std::isfinite(z) || std::abs(z) > tol.blowup_weight)
              throw NumericalBlowUp("conditional MC weight left the admissible range", s + 1, m);
          }
        }
        return mom;
      },
      [&](std::size_t, NodeMoments&& mom) { reducer.push(std::move(mom)); });
  return std::move(*reducer.finish());
}

struct ComparisonRow {
  double t = 0.0, rough = 0.0, classical = 0.0, diff = 0.0, budget = 0.0;
  bool pass = false;
};

struct ComparisonSeries {
  std::string phi;
  bool normalized = false;
  std::vector<ComparisonRow> rows;
  double max_excess = 0.0;  // max (|diff| - budget)
  bool pass = true;
};

struct RandomizationReport {
  std::size_t N = 0, refine = 0, M_rough = 0, M_classical = 0;
  std::vector<ComparisonSeries> series;
  bool pass = true;
};

// One observation path on the fine grid, its Ito lift, the rough filter on the lift and
// conditional MC on the same path; per node |diff| <= 3 combined stderr + allowance.
inline RandomizationReport randomization_harness(const ClassicalScenario& scn, const TimeGrid& grid,
                                                 std::size_t refine, std::size_t M_rough,
                                                 std::size_t M_classical, std::uint64_t master_seed,
                                                 const std::vector<TestFunction>& phis, double alpha = 0.45,
                                                 std::size_t threads = 1,
                                                 const Tolerances& tol = default_tolerances()) {
  const TimeGrid fine(grid.horizon, grid.steps * refine);
  const SystemPath sys = simulate_system(scn, fine, derive_seed(master_seed, "observation", 0));
  const RoughPath lift = lift_ito(grid, scn.model.coeffs.dy, sys.Y, refine, alpha,
                                  derive_seed(master_seed, "observation", 0));
  const NodeMoments rough =
      filter_moments(scn.model, lift, phis, M_rough, derive_seed(master_seed, "rough_filter", 0), threads);
  const NodeMoments cls = conditional_mc_filter(scn.model, sys.Y, grid, refine, phis, M_classical,
                                                derive_seed(master_seed, "conditional_mc", 0), threads, tol);
  RandomizationReport rep;
  rep.N = grid.steps;
  rep.refine = refine;
  rep.M_rough = M_rough;
  rep.M_classical = M_classical;
  for (int normalized = 0; normalized < 2; ++normalized)
    for (std::size_t j = 0; j < phis.size(); ++j) {
      ComparisonSeries s;
      s.phi = phis[j].name;
      s.normalized = normalized == 1;
      s.max_excess = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < grid.nodes(); ++i) {
        ComparisonRow row;
        row.t = grid.node(i);
        row.rough = s.normalized ? rough.ratio(i, j) : rough.mean(i, j);
        row.classical = s.normalized ? cls.ratio(i, j) : cls.mean(i, j);
        row.diff = row.rough - row.classical;
        const double se1 = s.normalized ? rough.ratio_stderr(i, j) : rough.stderr_of(i, j);
        const double se2 = s.normalized ? cls.ratio_stderr(i, j) : cls.stderr_of(i, j);
        row.budget = tol.noise_multiple * std::sqrt(se1 * se1 + se2 * se2) + tol.randomization_allowance;
        row.pass = std::abs(row.diff) <= row.budget;
        s.pass = s.pass && row.pass;
        s.max_excess = std::max(s.max_excess, std::abs(row.diff) - row.budget);
        s.rows.push_back(row);
      }
      rep.pass = rep.pass && s.pass;
      rep.series.push_back(std::move(s));
    }
  return rep;
}

// JSON: per-phi arrays of (t, rough, classical, diff, budget, pass).
inline nlohmann::json comparison_json(const std::vector<ComparisonSeries>& series) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : series) {
    nlohmann::json e{{"phi", s.phi}, {"normalized", s.normalized}, {"pass", s.pass}, {"max_excess", s.max_excess}};
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows)
      rows.push_back({{"t", r.t}, {"rough", r.rough}, {"classical", r.classical}, {"diff", r.diff},
                      {"budget", r.budget}, {"pass", r.pass}});
    e["rows"] = rows;
    j.push_back(e);
  }
  return j;
}

struct KalmanComparison {
  std::vector<ComparisonSeries> series;  // one series: normalized filter mean vs Kalman mean
  double steady_state = 0.0, riccati_terminal = 0.0;
  std::vector<double> checkpoint_variance;
  bool pass = true;
};

// Rough filter at the Ito lift of a physically simulated observation vs the Kalman mean.
inline KalmanComparison kalman_compare(const LinearGaussianParams& p, const TimeGrid& grid, std::size_t refine,
                                       std::size_t M, std::size_t checkpoints, std::uint64_t master_seed,
                                       double alpha = 0.45, std::size_t threads = 1,
                                       const Tolerances& tol = default_tolerances()) {
  if (checkpoints == 0 || grid.steps % checkpoints != 0)
    throw InputError("checkpoint count must divide the step count");
  const ClassicalScenario scn = lg_scenario(p, false);
  const TimeGrid fine(grid.horizon, grid.steps * refine);
  const SystemPath sys = simulate_system(scn, fine, derive_seed(master_seed, "observation", 0), true);
  const RoughPath lift = lift_ito(grid, 1, sys.Y, refine, alpha, derive_seed(master_seed, "observation", 0));
  const std::vector<TestFunction> phis{coordinate_function(0, 1)};
  const NodeMoments mom = filter_moments(scn.model, lift, phis, M, derive_seed(master_seed, "rough_filter", 0), threads);
  // Kalman-Bucy on the fine observation path, read off at the coarse nodes
  const KalmanPath kb = kalman_bucy(p, sys.Y, fine);
  KalmanComparison out;
  out.steady_state = riccati_steady_state(p);
  out.riccati_terminal = kb.variance.back();
  out.checkpoint_variance.reserve(checkpoints);
  ComparisonSeries s;
  s.phi = "identity";
  s.normalized = true;
  s.max_excess = -std::numeric_limits<double>::infinity();
  const std::size_t every = grid.steps / checkpoints;
  for (std::size_t c = 1; c <= checkpoints; ++c) {
    const std::size_t i = c * every;
    ComparisonRow row;
    row.t = grid.node(i);
    row.rough = mom.ratio(i, 0);
    row.classical = kb.mean[i * refine];
    row.diff = row.rough - row.classical;
    row.budget = tol.noise_multiple * mom.ratio_stderr(i, 0) + tol.kalman_allowance;
    row.pass = std::abs(row.diff) <= row.budget;
    s.pass = s.pass && row.pass;
    s.max_excess = std::max(s.max_excess, std::abs(row.diff) - row.budget);
    s.rows.push_back(row);
    out.checkpoint_variance.push_back(kb.variance[i * refine]);
  }
  out.pass = s.pass;
  out.series.push_back(std::move(s));
  return out;
}

}  // namespace roughfilter
