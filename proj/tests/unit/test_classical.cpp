#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "roughfilter/classical.hpp"
#include "roughfilter/filter.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Approx;

namespace {

ReductionInput scalar_reduction(double fbar, double h2, double k) {
  ReductionInput in;
  in.fbar = constant_field({fbar});
  in.h2 = constant_field({h2});
  in.k = constant_field({k});
  return in;
}

double eval1(const Field& f, double x = 0.3, double y = -0.2) {
  std::vector<double> xs{x}, ys{y}, out(1);
  f(0.5, xs, ys, out);
  return out[0];
}

}  // namespace

TEST_CASE("scalar reduction divides by k", "[classical]") {
  const auto r = reduce_to_nondegenerate(scalar_reduction(2.0, 3.0, 2.0));
  CHECK(eval1(r.driver_field) == Approx(1.0).margin(1e-14));
  CHECK(eval1(r.obs_field) == Approx(1.5).margin(1e-14));
  CHECK(eval1(r.driver_field_dy) == Approx(0.0).margin(1e-8));
  CHECK(eval1(r.obs_field_dx) == Approx(0.0).margin(1e-8));
  for (double c : r.condition_numbers) CHECK(c == Approx(1.0));
}

TEST_CASE("identity k leaves fields unchanged", "[classical]") {
  ReductionInput in;
  in.dx = 1;
  in.dy = 2;
  in.fbar = [](double, std::span<const double> x, std::span<const double>, std::span<double> r) {
    r[0] = std::sin(x[0]);
    r[1] = 0.5;
  };
  in.h2 = [](double, std::span<const double> x, std::span<const double> y, std::span<double> r) {
    r[0] = x[0];
    r[1] = y[1];
  };
  in.k = constant_field({1.0, 0.0, 0.0, 1.0});
  const auto red = reduce_to_nondegenerate(in);
  std::vector<double> x{0.7}, y{0.1, -0.4}, f(2), h(2), hdy(4);
  red.driver_field(0.0, x, y, f);
  red.obs_field(0.0, x, y, h);
  red.obs_field_dy(0.0, x, y, hdy);
  CHECK(f[0] == Approx(std::sin(0.7)).margin(1e-14));
  CHECK(f[1] == Approx(0.5).margin(1e-14));
  CHECK(h[0] == Approx(0.7).margin(1e-14));
  CHECK(h[1] == Approx(-0.4).margin(1e-14));
  CHECK(hdy[0 * 2 + 0] == Approx(0.0).margin(1e-8));
  CHECK(hdy[1 * 2 + 1] == Approx(1.0).margin(1e-8));
}

TEST_CASE("y-dependent k differentiates the inverse", "[classical]") {
  ReductionInput in = scalar_reduction(1.0, 1.0, 1.0);
  in.k = [](double, std::span<const double>, std::span<const double> y, std::span<double> r) { r[0] = 3.0 + y[0]; };
  const auto red = reduce_to_nondegenerate(in);
  // f = 1 / (3 + y), df/dy = -1 / (3 + y)^2
  CHECK(eval1(red.driver_field, 0.0, 0.5) == Approx(1.0 / 3.5).margin(1e-14));
  CHECK(eval1(red.driver_field_dy, 0.0, 0.5) == Approx(-1.0 / 12.25).margin(1e-7));
  CHECK(eval1(red.obs_field_dy, 0.0, 0.5) == Approx(-1.0 / 12.25).margin(1e-7));
}

TEST_CASE("singular k is rejected", "[classical]") {
  CHECK_THROWS_AS(reduce_to_nondegenerate(scalar_reduction(1.0, 1.0, 0.0)), InputError);
  ReductionInput in;
  in.dy = 2;
  in.fbar = constant_field({1.0, 1.0});
  in.h2 = constant_field({0.0, 0.0});
  in.k = constant_field({1.0, 2.0, 2.0, 4.0});
  CHECK_THROWS_AS(reduce_to_nondegenerate(in), InputError);
  CHECK_THROWS_AS(reduce_to_nondegenerate(ReductionInput{}), CapabilityError);
}

TEST_CASE("Riccati steady state", "[classical][kalman]") {
  LinearGaussianParams p;  // a = -1, sigma = 1, hmat = 1, k = 1
  CHECK(riccati_steady_state(p) == Approx(std::sqrt(2.0) - 1.0).margin(1e-15));
  const TimeGrid g(10.0, 4096);
  const std::vector<double> Y(g.nodes(), 0.0);
  const auto kb = kalman_bucy(p, Y, g);
  CHECK(std::abs(kb.variance.back() - (std::sqrt(2.0) - 1.0)) <= 1e-4);

  SECTION("no observation") {
    p.hmat = 0.0;
    CHECK(riccati_steady_state(p) == Approx(0.5));
    CHECK(std::abs(kalman_bucy(p, Y, g).variance.back() - 0.5) <= 1e-4);
  }
  SECTION("no signal noise from a point mass") {
    p.sigma = 0.0;
    p.P0 = 0.0;
    p.m0 = 2.0;
    const TimeGrid g1(1.0, 1000);
    std::vector<double> Yr(g1.nodes());
    for (std::size_t i = 0; i < g1.nodes(); ++i) Yr[i] = std::sin(7.0 * g1.node(i));
    const auto k0 = kalman_bucy(p, Yr, g1);
    for (double v : k0.variance) CHECK(v == 0.0);
    // zero gain: Euler for m' = a m
    CHECK(k0.mean.back() == Approx(2.0 * std::pow(1.0 - 1e-3, 1000)).epsilon(1e-12));
  }
  SECTION("errors") {
    p.P0 = -1.0;
    CHECK_THROWS_AS(kalman_bucy(p, Y, g), InputError);
    p.P0 = 1.0;
    p.k = 0.0;
    CHECK_THROWS_AS(kalman_bucy(p, Y, g), InputError);
    p.k = 1.0;
    CHECK_THROWS_AS(kalman_bucy(p, std::vector<double>(3, 0.0), g), InputError);
  }
}

TEST_CASE("Kalman variance does not see the observations", "[classical][kalman]") {
  LinearGaussianParams p;
  const TimeGrid g(2.0, 512);
  std::vector<double> Y0(g.nodes(), 0.0), Y1(g.nodes());
  for (std::size_t i = 0; i < g.nodes(); ++i) Y1[i] = 3.0 * std::cos(5.0 * g.node(i)) - 3.0;
  const auto a = kalman_bucy(p, Y0, g), b = kalman_bucy(p, Y1, g);
  CHECK(a.variance == b.variance);
  CHECK(a.mean != b.mean);
}

TEST_CASE("system simulation with k = 0", "[classical]") {
  const ClassicalScenario scn = scalar_scenario(bounded_nonlinear_model(), 0.0);
  const TimeGrid g(1.0, 256);
  const auto sys = simulate_system(scn, g, 5);
  for (double y : sys.Y) CHECK(y == 0.0);
  for (double z : sys.Z) CHECK(z == 1.0);
  double w = 0.0;
  for (double v : sys.W) w = std::max(w, std::abs(v));
  CHECK(w > 0.0);
}

TEST_CASE("system weight has unit mean under the reference measure", "[classical]") {
  LinearGaussianParams p;
  const ClassicalScenario scn = lg_scenario(p, false);
  const TimeGrid g(1.0, 64);
  const std::size_t M = 4000;
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const double z = simulate_system(scn, g, 99, false, m).Z.back();
    s1 += z;
    s2 += z * z;
  }
  const double mean = s1 / M, se = std::sqrt((s2 / M - mean * mean) / M);
  CHECK(std::abs(mean - 1.0) <= 4.0 * se);
}

TEST_CASE("conditional MC with zero sensor is unit mass", "[classical]") {
  const Model m = support::constant_model(0.1, 1.0, 0.0, 0.0);
  const TimeGrid g(1.0, 16);
  const std::size_t refine = 4;
  std::vector<double> Y(g.steps * refine + 1);
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = std::sin(0.3 * i);
  const auto mom = conditional_mc_filter(m, Y, g, refine, {constant_function(1.0)}, 300, 3);
  for (std::size_t i = 0; i < g.nodes(); ++i) {
    CHECK(mom.mean(i, 0) == 1.0);
    CHECK(mom.mass(i) == 1.0);
  }
  CHECK_THROWS_AS(conditional_mc_filter(m, std::vector<double>(5, 0.0), g, refine, {}, 10, 3), InputError);
}

TEST_CASE("randomization harness agrees on a small problem", "[classical][slow]") {
  const ClassicalScenario scn = scalar_scenario(bounded_nonlinear_model(), 1.0);
  const TimeGrid g(1.0, 64);
  const auto rep = randomization_harness(scn, g, 16, 3000, 3000, 20240601,
                                         {constant_function(1.0), gaussian_bump(), tanh_function()});
  CHECK(rep.series.size() == 6);
  for (const auto& s : rep.series) {
    INFO(s.phi << " normalized=" << s.normalized << " max_excess=" << s.max_excess);
    CHECK(s.rows.size() == g.nodes());
    CHECK(s.pass);
  }
  CHECK(rep.pass);
  const auto j = comparison_json(rep.series);
  CHECK(j.size() == 6);
  CHECK(j[0]["rows"].size() == g.nodes());
}

TEST_CASE("rough filter tracks the Kalman mean", "[classical][kalman][slow]") {
  LinearGaussianParams p;
  const TimeGrid g(1.0, 128);
  const auto cmp = kalman_compare(p, g, 16, 4000, 4, 7);
  REQUIRE(cmp.series.size() == 1);
  CHECK(cmp.series[0].rows.size() == 4);
  CHECK(cmp.checkpoint_variance.size() == 4);
  CHECK(cmp.steady_state == Approx(std::sqrt(2.0) - 1.0));
  for (const auto& r : cmp.series[0].rows) INFO("t=" << r.t << " diff=" << r.diff << " budget=" << r.budget);
  CHECK(cmp.pass);
  CHECK_THROWS_AS(kalman_compare(p, g, 16, 10, 3, 7), InputError);
}
