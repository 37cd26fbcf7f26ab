#include <catch_amalgamated.hpp>

#include <cmath>

#include "roughfilter/classical.hpp"
#include "roughfilter/rsde.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {
Model scalar_model(ScalarCoefficients s, double x0 = 0.0) {
  Model m;
  m.coeffs = make_scalar_coefficients(s, "test");
  m.init.mean = {x0};
  m.init.stddev = {0.0};
  return m;
}
}  // namespace

TEST_CASE("additive rough noise is integrated exactly", "[signal]") {
  const Model m = support::constant_model(0.0, 0.0, 0.7, 0.0);
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 256), 1, 16, 0.45, 1);
  const std::vector<double> x0{0.3};
  const auto sol = solve_signal(m.coeffs, rp, x0, 5);
  CHECK_THAT(sol.state(256)[0], WithinAbs(0.3 + 0.7 * (rp.value(256)[0] - rp.value(0)[0]), 1e-12));
}

TEST_CASE("linear decay matches the exact flow", "[signal]") {
  ScalarCoefficients s;
  s.drift = [](double, double x, double) { return -x; };
  const Model m = scalar_model(s);
  const std::vector<double> x0{1.0};
  const auto sol = solve_signal(m.coeffs, support::linear_path(1.0, 1024), x0, 1);
  CHECK_THAT(sol.state(1024)[0], WithinAbs(std::exp(-1.0), 5e-3));
}

TEST_CASE("linear rough equation on a geometric driver", "[signal]") {
  ScalarCoefficients s;
  s.driver = [](double, double x, double) { return x; };
  s.driver_dx = [](double, double, double) { return 1.0; };
  const Model m = scalar_model(s);
  const TimeGrid g(1.0, 1024);
  std::vector<double> y(g.nodes());
  for (std::size_t i = 0; i < g.nodes(); ++i) y[i] = std::sin(2.0 * g.node(i));
  const RoughPath rp = geometrify(lift_piecewise_linear(g, 1, y));
  const std::vector<double> x0{1.5};
  const auto sol = solve_signal(m.coeffs, rp, x0, 1);
  CHECK_THAT(sol.state(1024)[0], WithinRel(1.5 * std::exp(y.back()), 1e-5));
}

TEST_CASE("weights", "[weight]") {
  SECTION("h = 0 gives unit weight") {
    const Model m = support::constant_model(0.1, 0.5, 0.3, 0.0);
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 1, 16, 0.45, 2);
    const std::vector<double> x0{0.0};
    const auto sig = solve_signal(m.coeffs, rp, x0, 3);
    for (double z : solve_weight_davie(m.coeffs, rp, sig)) CHECK(z == 1.0);
    for (double z : solve_weight_exponential(m.coeffs, rp, sig)) CHECK(z == 1.0);
  }
  SECTION("constant h on a smooth driver") {
    const Model m = support::constant_model(0.0, 0.0, 0.0, 1.0);
    const RoughPath rp = support::linear_path(1.0, 1024);
    const std::vector<double> x0{0.0};
    const auto sig = solve_signal(m.coeffs, rp, x0, 3);
    CHECK_THAT(solve_weight_davie(m.coeffs, rp, sig).back(), WithinAbs(std::exp(1.0), 1e-3));
    const Model m2 = support::constant_model(0.0, 0.0, 0.0, 2.0);
    CHECK_THAT(solve_weight_exponential(m2.coeffs, rp, sig).back(), WithinAbs(std::exp(2.0), 1e-6));
  }
  SECTION("constant h against the Ito Brownian lift") {
    const Model m = support::constant_model(0.0, 0.0, 0.0, 1.0);
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 4096), 1, 16, 0.45, 11);
    const std::vector<double> x0{0.0};
    const auto sig = solve_signal(m.coeffs, rp, x0, 3);
    const auto Z = solve_weight_davie(m.coeffs, rp, sig);
    double worst = 0.0;
    for (std::size_t i = 0; i <= 4096; ++i) {
      const double exact = std::exp(rp.value(i)[0] - rp.grid().node(i) / 2);
      worst = std::max(worst, std::abs(Z[i] - exact) / exact);
    }
    CHECK(worst <= 2e-2);
  }
  SECTION("vanishing observation scale gives unit weight") {
    ScalarCoefficients s = bounded_nonlinear_scalars();
    s.obs = ScalarCoefficients::zero;
    s.obs_dx = ScalarCoefficients::zero;
    s.obs_dy = ScalarCoefficients::zero;
    const Model m = scalar_model(s, 0.2);
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 1, 16, 0.45, 2);
    const std::vector<double> x0{0.2};
    for (double z : solve_from(m.coeffs, rp, 0, x0, 9).weights) CHECK(z == 1.0);
  }
}

TEST_CASE("solve_from", "[solve_from]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 64), 1, 16, 0.45, 8);
  const std::vector<double> x0{0.4};
  SECTION("start at the terminal node") {
    const auto sol = solve_from(m.coeffs, rp, 64, x0, 1);
    CHECK(sol.length() == 1);
    CHECK(sol.weights == std::vector<double>{1.0});
  }
  SECTION("start at zero reproduces the split solve") {
    const auto full = solve_from(m.coeffs, rp, 0, x0, 17, 3);
    const auto sig = solve_signal(m.coeffs, rp, x0, 17, 3);
    CHECK(full.states == sig.states);
    CHECK(full.weights == solve_weight_davie(m.coeffs, rp, sig));
  }
  SECTION("deterministic shifted start matches the whole flow") {
    ScalarCoefficients s;
    s.drift = [](double, double x, double) { return -0.5 * x; };
    s.driver = [](double, double x, double) { return 0.3 * x; };
    s.driver_dx = [](double, double, double) { return 0.3; };
    const Model lin = scalar_model(s);
    const auto whole = solve_from(lin.coeffs, rp, 0, x0, 1);
    const std::vector<double> mid{whole.state(20)[0]};
    const auto tail = solve_from(lin.coeffs, rp, 20, mid, 1);
    double worst = 0.0;
    for (std::size_t k = 0; k < tail.length(); ++k)
      worst = std::max(worst, std::abs(tail.state(k)[0] - whole.state(20 + k)[0]));
    CHECK(worst == 0.0);
  }
  SECTION("same seed gives identical paths") {
    CHECK(solve_from(m.coeffs, rp, 0, x0, 5, 2).states == solve_from(m.coeffs, rp, 0, x0, 5, 2).states);
    CHECK(solve_from(m.coeffs, rp, 0, x0, 5, 2).states != solve_from(m.coeffs, rp, 0, x0, 5, 3).states);
  }
  SECTION("bad start is rejected") {
    CHECK_THROWS_AS(solve_from(m.coeffs, rp, 65, x0, 1), InputError);
  }
}

TEST_CASE("blow-up names the step", "[signal]") {
  ScalarCoefficients s;
  s.drift = [](double, double x, double) { return x * x; };
  const Model m = scalar_model(s);
  const std::vector<double> x0{10.0};
  try {
    solve_signal(m.coeffs, support::linear_path(1.0, 64), x0, 1);
    FAIL("expected a blow-up");
  } catch (const NumericalBlowUp& e) {
    CHECK(e.step() > 0);
    CHECK(e.step() <= 64);
  }
}

TEST_CASE("missing derivative callables are a capability error", "[signal]") {
  CoefficientSet c = bounded_nonlinear_model().coeffs;
  c.driver_field_dy = nullptr;
  const std::vector<double> x0{0.0};
  CHECK_THROWS_AS(solve_signal(c, support::linear_path(1.0, 8), x0, 1), CapabilityError);
}

TEST_CASE("Stratonovich transform", "[stratonovich]") {
  SECTION("zero bracket leaves the coefficients alone") {
    const Model m = bounded_nonlinear_model();
    const RoughPath rp = support::linear_path(1.0, 32);
    const auto sf = stratonovich_transform(m.coeffs, rp);
    CoeffPoint a, b;
    const std::vector<double> x{0.3}, y{0.2};
    m.coeffs.evaluate(0.25, x, y, a);
    sf.coeffs.evaluate(0.25, x, y, b);
    CHECK(a.drift == b.drift);
    CHECK(b.weight_drift == 0.0);
  }
  SECTION("constant rough noise has no drift correction") {
    const Model m = support::constant_model(0.4, 1.0, 0.8, 0.0);
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 32), 1, 16, 0.45, 4);
    const auto sf = stratonovich_transform(m.coeffs, rp);
    CoeffPoint p;
    const std::vector<double> x{0.3}, y{0.2};
    sf.coeffs.evaluate(0.5, x, y, p);
    CHECK(p.drift[0] == 0.4);
  }
  SECTION("Ito and transformed geometric solves agree") {
    const Model m = bounded_nonlinear_model();
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 256), 1, 16, 0.45, 4);
    const auto sf = stratonovich_transform(m.coeffs, rp);
    const std::vector<double> x0{0.5};
    const auto ito = solve_from(m.coeffs, rp, 0, x0, 3);
    const auto str = solve_from(sf.coeffs, sf.driver, 0, x0, 3);
    CHECK_THAT(str.state(256)[0], WithinAbs(ito.state(256)[0], 1e-8));
    CHECK_THAT(str.weights.back(), WithinRel(ito.weights.back(), 1e-8));
  }
}
