#include <catch_amalgamated.hpp>

#include <cmath>

#include "roughfilter/classical.hpp"
#include "roughfilter/controlled.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::WithinAbs;

TEST_CASE("constant integrand integrates exactly", "[rough_integral]") {
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 2, 16, 0.45, 2);
  ControlledPath c(rp.grid(), 1, 2);
  for (std::size_t i = 0; i <= 128; ++i) {
    c.value(i, 0, 0) = 1.5;
    c.value(i, 0, 1) = -0.25;
  }
  const auto I = rough_integral(c, rp);
  const double expect = 1.5 * (rp.value(128)[0] - rp.value(0)[0]) - 0.25 * (rp.value(128)[1] - rp.value(0)[1]);
  CHECK_THAT(I.back(), WithinAbs(expect, 1e-12));
}

TEST_CASE("integral of Y against a smooth Y", "[rough_integral]") {
  const RoughPath rp = support::linear_path(1.0, 64);
  const auto c = controlled_gradient(
      rp, [](std::span<const double> y, std::span<double> g) { g[0] = y[0]; },
      [](std::span<const double>, std::span<double> h) { h[0] = 1.0; });
  CHECK_THAT(rough_integral(c, rp).back(), WithinAbs(0.5, 1e-13));
}

TEST_CASE("integral of Y against the Ito lift matches the fine Ito sum", "[rough_integral]") {
  const std::size_t N = 1024, R = 16;
  const TimeGrid g(1.0, N);
  const auto fine = brownian_path(8, Stream::observation_noise, 0, N * R, 1, g.dt() / R);
  const RoughPath rp = lift_ito(g, 1, fine, R, 0.45);
  const auto c = controlled_gradient(
      rp, [](std::span<const double> y, std::span<double> gr) { gr[0] = y[0]; },
      [](std::span<const double>, std::span<double> h) { h[0] = 1.0; });
  double ito = 0.0;
  for (std::size_t j = 0; j < N * R; ++j) ito += fine[j] * (fine[j + 1] - fine[j]);
  CHECK_THAT(rough_integral(c, rp).back(), WithinAbs(ito, 1e-2));
}

TEST_CASE("dimension mismatch is an input error", "[rough_integral]") {
  const RoughPath rp = support::linear_path(1.0, 8);
  ControlledPath c(TimeGrid(1.0, 4), 1, 1);
  CHECK_THROWS_AS(rough_integral(c, rp), InputError);
}

TEST_CASE("young integral against the bracket", "[young]") {
  const std::size_t N = 100;
  const TimeGrid g(1.0, N);
  std::vector<double> bracket(N + 1), gt(N + 1), gc(N + 1, 2.0);
  for (std::size_t i = 0; i <= N; ++i) {
    bracket[i] = g.node(i);
    gt[i] = g.node(i);
  }
  CHECK_THAT(young_integral(gc, bracket, N, 1, 1).back(), WithinAbs(2.0, 1e-13));
  CHECK_THAT(young_integral(gt, bracket, N, 1, 1).back(), WithinAbs(0.5, g.dt()));
  const RoughPath smooth = support::linear_path(1.0, N);
  CHECK(young_integral(gc, smooth, 1).back() == 0.0);
}

TEST_CASE("dyadic refinement", "[refine]") {
  auto family = [](auto&& grad, auto&& hess, auto&& driver_at) {
    std::vector<ControlledPath> cs;
    std::vector<RoughPath> rps;
    for (std::size_t N = 16; N <= 512; N *= 2) {
      rps.push_back(driver_at(N));
      cs.push_back(controlled_gradient(rps.back(), grad, hess));
    }
    return std::make_pair(cs, rps);
  };
  auto smooth = [](std::size_t N) {
    const TimeGrid g(1.0, N);
    std::vector<double> y(N + 1);
    for (std::size_t i = 0; i <= N; ++i) y[i] = std::sin(g.node(i));
    return lift_piecewise_linear(g, 1, y);
  };
  SECTION("constant integrand gives zero differences") {
    auto [cs, rps] = family([](std::span<const double>, std::span<double> gr) { gr[0] = 1.0; },
                            [](std::span<const double>, std::span<double> h) { h[0] = 0.0; }, smooth);
    const auto t = refine_convergence(cs, rps);
    for (std::size_t k = 1; k < t.rows.size(); ++k) CHECK(std::abs(t.rows[k].diff) < 1e-14);
  }
  SECTION("sin(Y) on a smooth driver converges at rate two") {
    auto [cs, rps] = family([](std::span<const double> y, std::span<double> gr) { gr[0] = std::sin(y[0]); },
                            [](std::span<const double> y, std::span<double> h) { h[0] = std::cos(y[0]); }, smooth);
    const auto t = refine_convergence(cs, rps);
    CHECK_THAT(t.fitted_rate, WithinAbs(2.0, 0.3));
  }
  SECTION("Y against a common Brownian path") {
    const RoughPath finest = brownian_ito_lift(TimeGrid(1.0, 512), 1, 16, 0.45, 31);
    auto [cs, rps] = family([](std::span<const double> y, std::span<double> gr) { gr[0] = y[0]; },
                            [](std::span<const double>, std::span<double> h) { h[0] = 1.0; },
                            [&](std::size_t N) { return coarsen(finest, 512 / N); });
    const auto t = refine_convergence(cs, rps);
    CHECK(t.fitted_rate >= 3 * 0.45 - 1 - 0.15);
  }
  SECTION("two levels are rejected") {
    auto [cs, rps] = family([](std::span<const double>, std::span<double> gr) { gr[0] = 1.0; },
                            [](std::span<const double>, std::span<double> h) { h[0] = 0.0; }, smooth);
    cs.resize(2);
    rps.resize(2);
    CHECK_THROWS_AS(refine_convergence(cs, rps), InputError);
  }
}

TEST_CASE("remainder of a smooth controlled path", "[remainder]") {
  const RoughPath rp = support::linear_path(1.0, 256);
  const auto c = controlled_gradient(
      rp, [](std::span<const double> y, std::span<double> gr) { gr[0] = std::sin(y[0]); },
      [](std::span<const double> y, std::span<double> h) { h[0] = std::cos(y[0]); });
  CHECK_THAT(remainder_exponent(c, rp).exponent, WithinAbs(2.0, 0.2));
}
