#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"
#include "tolerances.hpp"

namespace roughfilter {

// Layouts (row-major):
//   drift            [i]                       i < dx
//   diffusion        [i*db + q]
//   driver_field     [i*dy + k]                f^i_k
//   driver_field_dy  [(i*dy + k)*dy + l]       d/dy_l f^i_k
//   driver_field_dx  [(i*dy + k)*dx + j]       d/dx_j f^i_k
//   obs_field        [k]                       h_k
//   obs_field_dy     [k*dy + l]                d/dy_l h_k
//   obs_field_dx     [k*dx + j]                d/dx_j h_k
//   weight_drift     [0]                       scalar drift on log-weight
using Field = std::function<void(double t, std::span<const double> x, std::span<const double> y,
                                 std::span<double> out)>;

struct CoeffPoint {
  std::vector<double> drift, diffusion, driver_field, driver_field_dy, driver_field_dx, obs_field,
      obs_field_dy, obs_field_dx;
  double weight_drift = 0.0;

  void resize(std::size_t dx, std::size_t dy, std::size_t db) {
    drift.assign(dx, 0.0);
    diffusion.assign(dx * db, 0.0);
    driver_field.assign(dx * dy, 0.0);
    driver_field_dy.assign(dx * dy * dy, 0.0);
    driver_field_dx.assign(dx * dy * dx, 0.0);
    obs_field.assign(dy, 0.0);
    obs_field_dy.assign(dy * dy, 0.0);
    obs_field_dx.assign(dy * dx, 0.0);
    weight_drift = 0.0;
  }
};

struct CoefficientSet {
  std::string name = "custom";
  std::size_t dx = 1, dy = 1, db = 1;
  Field drift, diffusion, driver_field, driver_field_dy, driver_field_dx, obs_field, obs_field_dy,
      obs_field_dx, weight_drift;
  bool analytic_derivatives = true;
  bool bounded = true;  // false for linear oracle models outside the bounded-coefficient setting

  void require_complete() const {
    if (!drift || !diffusion || !driver_field || !obs_field)
      throw CapabilityError("coefficient set '" + name + "' lacks drift, diffusion, f or h");
    if (!driver_field_dy || !driver_field_dx || !obs_field_dy || !obs_field_dx)
      throw CapabilityError("coefficient set '" + name +
                            "' lacks derivative callables (D_y f, D_x f, D_y h or D_x h)");
  }

  void evaluate(double t, std::span<const double> x, std::span<const double> y,
                CoeffPoint& p) const {
    if (p.drift.size() != dx || p.driver_field.size() != dx * dy || p.diffusion.size() != dx * db)
      p.resize(dx, dy, db);
    drift(t, x, y, p.drift);
    diffusion(t, x, y, p.diffusion);
    driver_field(t, x, y, p.driver_field);
    driver_field_dy(t, x, y, p.driver_field_dy);
    driver_field_dx(t, x, y, p.driver_field_dx);
    obs_field(t, x, y, p.obs_field);
    obs_field_dy(t, x, y, p.obs_field_dy);
    obs_field_dx(t, x, y, p.obs_field_dx);
    if (weight_drift) {
      double c = 0.0;
      weight_drift(t, x, y, std::span<double>(&c, 1));
      p.weight_drift = c;
    } else {
      p.weight_drift = 0.0;
    }
  }
};

inline Field zero_field() {
  return [](double, std::span<const double>, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
  };
}

inline Field constant_field(std::vector<double> values) {
  return [values](double, std::span<const double>, std::span<const double>, std::span<double> out) {
    std::copy(values.begin(), values.end(), out.begin());
  };
}

namespace detail {
// Central difference of `field` (n outputs) along coordinate j of x (wrt_x) or y.
inline void central_difference(const Field& field, std::size_t n, double t, std::span<const double> x,
                               std::span<const double> y, bool wrt_x, std::size_t j, double h,
                               std::span<double> out) {
  std::vector<double> xp(x.begin(), x.end()), yp(y.begin(), y.end()), fp(n), fm(n);
  auto& v = wrt_x ? xp : yp;
  const double base = v[j];
  v[j] = base + h;
  field(t, xp, yp, fp);
  v[j] = base - h;
  field(t, xp, yp, fm);
  for (std::size_t k = 0; k < n; ++k) out[k] = (fp[k] - fm[k]) / (2.0 * h);
}

// Builds the derivative of `field` (outer size n) with derivative index appended last.
inline Field fd_derivative(Field field, std::size_t n, std::size_t dim, bool wrt_x, double h) {
  return [field, n, dim, wrt_x, h](double t, std::span<const double> x, std::span<const double> y,
                                   std::span<double> out) {
    std::vector<double> col(n);
    for (std::size_t j = 0; j < dim; ++j) {
      central_difference(field, n, t, x, y, wrt_x, j, h, col);
      for (std::size_t k = 0; k < n; ++k) out[k * dim + j] = col[k];
    }
  };
}
}  // namespace detail

// Fills missing derivative callables with central differences and marks the set accordingly.
inline CoefficientSet with_fd_derivatives(CoefficientSet c, double h = 1e-5) {
  bool filled = false;
  if (!c.driver_field_dy) {
    c.driver_field_dy = detail::fd_derivative(c.driver_field, c.dx * c.dy, c.dy, false, h);
    filled = true;
  }
  if (!c.driver_field_dx) {
    c.driver_field_dx = detail::fd_derivative(c.driver_field, c.dx * c.dy, c.dx, true, h);
    filled = true;
  }
  if (!c.obs_field_dy) {
    c.obs_field_dy = detail::fd_derivative(c.obs_field, c.dy, c.dy, false, h);
    filled = true;
  }
  if (!c.obs_field_dx) {
    c.obs_field_dx = detail::fd_derivative(c.obs_field, c.dy, c.dx, true, h);
    filled = true;
  }
  if (filled) c.analytic_derivatives = false;
  return c;
}

struct DerivativeCheckReport {
  double driver_dx_rel = 0.0;
  double driver_dy_rel = 0.0;
  double obs_dx_rel = 0.0;
  double obs_dy_rel = 0.0;
  bool all_finite = true;
  std::size_t probes = 0;
  bool pass(double tol = default_tolerances().derivative_check_rel) const {
    return all_finite && driver_dx_rel <= tol && driver_dy_rel <= tol && obs_dx_rel <= tol &&
           obs_dy_rel <= tol;
  }
};

// Analytic derivatives against central differences on random probes (x, y in [-2, 2], t in [0, 1]).
inline DerivativeCheckReport check_derivatives(const CoefficientSet& c, std::size_t probes = 100,
                                               std::uint64_t seed = 7,
                                               double step = default_tolerances().derivative_fd_step) {
  c.require_complete();
  DerivativeCheckReport rep;
  rep.probes = probes;
  std::vector<double> x(c.dx), y(c.dy), u(c.dx + c.dy + 1), analytic, fd, col;
  auto compare = [&](const Field& field, const Field& deriv, std::size_t n, std::size_t dim,
                     bool wrt_x, double t, double& worst) {
    analytic.assign(n * dim, 0.0);
    deriv(t, x, y, analytic);
    col.assign(n, 0.0);
    for (std::size_t j = 0; j < dim; ++j) {
      detail::central_difference(field, n, t, x, y, wrt_x, j, step, col);
      for (std::size_t k = 0; k < n; ++k) {
        const double a = analytic[k * dim + j];
        if (!std::isfinite(a) || !std::isfinite(col[k])) rep.all_finite = false;
        worst = std::max(worst, std::abs(a - col[k]) / std::max(1.0, std::abs(a)));
      }
    }
  };
  for (std::size_t p = 0; p < probes; ++p) {
    standard_normals(seed, Stream::probe, p, 0, u);
    for (std::size_t j = 0; j < c.dx; ++j) x[j] = std::clamp(u[j], -2.0, 2.0);
    for (std::size_t j = 0; j < c.dy; ++j) y[j] = std::clamp(u[c.dx + j], -2.0, 2.0);
    const double t = 0.5 * (1.0 + std::tanh(u[c.dx + c.dy]));
    compare(c.driver_field, c.driver_field_dx, c.dx * c.dy, c.dx, true, t, rep.driver_dx_rel);
    compare(c.driver_field, c.driver_field_dy, c.dx * c.dy, c.dy, false, t, rep.driver_dy_rel);
    compare(c.obs_field, c.obs_field_dx, c.dy, c.dx, true, t, rep.obs_dx_rel);
    compare(c.obs_field, c.obs_field_dy, c.dy, c.dy, false, t, rep.obs_dy_rel);
  }
  return rep;
}

}  // namespace roughfilter
