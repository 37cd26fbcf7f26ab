#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "roughfilter/models.hpp"
#include "roughfilter/roughpath.hpp"
#include "roughfilter/rsde.hpp"

namespace support {

using namespace roughfilter;

// Scalar model with constant b, sigma, f, h and zero derivatives.
inline Model constant_model(double b, double sigma, double f, double h, double x0 = 0.0, double sd = 0.0) {
  ScalarCoefficients s;
  s.drift = [b](double, double, double) { return b; };
  s.diffusion = [sigma](double, double, double) { return sigma; };
  s.driver = [f](double, double, double) { return f; };
  s.obs = [h](double, double, double) { return h; };
  Model m;
  m.id = "constant";
  m.coeffs = make_scalar_coefficients(s, "constant");
  m.init.mean = {x0};
  m.init.stddev = {sd};
  return m;
}

// Lift of Y_t = slope * t on [0, T].
inline RoughPath linear_path(double T, std::size_t N, double slope = 1.0, double alpha = 0.5) {
  const TimeGrid g(T, N);
  std::vector<double> y(g.nodes());
  for (std::size_t i = 0; i < g.nodes(); ++i) y[i] = slope * g.node(i);
  return lift_piecewise_linear(g, 1, y, alpha);
}

inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("roughfilter_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace support
