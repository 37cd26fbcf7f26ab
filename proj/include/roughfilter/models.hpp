#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "coefficients.hpp"
#include "rsde.hpp"

namespace roughfilter {

// Scalar (dx = dy = db = 1) coefficients given as plain functions of (t, x, y).
struct ScalarCoefficients {
  using Fn = std::function<double(double, double, double)>;
  static double zero(double, double, double) { return 0.0; }
  Fn drift = zero, diffusion = zero, driver = zero, driver_dy = zero, driver_dx = zero, obs = zero,
     obs_dy = zero, obs_dx = zero;
};

inline CoefficientSet make_scalar_coefficients(const ScalarCoefficients& s, std::string name) {
  auto wrap = [](ScalarCoefficients::Fn fn) -> Field {
    return [fn = std::move(fn)](double t, std::span<const double> x, std::span<const double> y,
                                std::span<double> out) { out[0] = fn(t, x[0], y[0]); };
  };
  CoefficientSet c;
  c.name = std::move(name);
  c.dx = c.dy = c.db = 1;
  c.drift = wrap(s.drift);
  c.diffusion = wrap(s.diffusion);
  c.driver_field = wrap(s.driver);
  c.driver_field_dy = wrap(s.driver_dy);
  c.driver_field_dx = wrap(s.driver_dx);
  c.obs_field = wrap(s.obs);
  c.obs_field_dy = wrap(s.obs_dy);
  c.obs_field_dx = wrap(s.obs_dx);
  return c;
}

inline ScalarCoefficients bounded_nonlinear_scalars() {
  ScalarCoefficients s;
  s.drift = [](double, double x, double y) { return -std::tanh(x) + 0.2 * std::cos(y); };
  s.diffusion = [](double, double x, double) { return 0.5 + 0.1 * std::sin(x); };
  s.driver = [](double, double x, double y) { return 0.4 * std::cos(x) + 0.2 * std::sin(y); };
  s.driver_dy = [](double, double, double y) { return 0.2 * std::cos(y); };
  s.driver_dx = [](double, double x, double) { return -0.4 * std::sin(x); };
  s.obs = [](double, double x, double y) { return 0.8 * std::tanh(x) + 0.2 * std::cos(y); };
  s.obs_dy = [](double, double, double y) { return -0.2 * std::sin(y); };
  s.obs_dx = [](double, double x, double) {
    const double c = 1.0 / std::cosh(x);
    return 0.8 * c * c;
  };
  return s;
}

// Bounded, smooth, correlated (f != 0) scalar model used by most acceptance runs.
inline Model bounded_nonlinear_model() {
  Model m;
  m.id = "bounded_nonlinear";
  m.coeffs = make_scalar_coefficients(bounded_nonlinear_scalars(), "bounded_nonlinear");
  m.init.mean = {0.5};
  m.init.stddev = {0.5};
  return m;
}

}  // namespace roughfilter
