#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "roughfilter/classical.hpp"
#include "roughfilter/filter.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::WithinAbs;

namespace {
RoughPath driver(std::size_t N = 128, std::uint64_t seed = 6) {
  return brownian_ito_lift(TimeGrid(1.0, N), 1, 16, 0.45, seed);
}
}  // namespace

TEST_CASE("single particle without observation weight", "[mu]") {
  const Model m = support::constant_model(0.2, 0.7, 0.5, 0.0, 0.1, 0.3);
  const RoughPath rp = driver();
  const auto ens = run_filter(m, rp, 1, 4);
  const TestFunction phi = gaussian_bump();
  for (std::size_t i : {0, 50, 128}) CHECK(mu(ens, phi, i) == phi.value(ens.state(0, i)));
}

TEST_CASE("unit mass when h vanishes", "[mu]") {
  const Model m = support::constant_model(0.2, 0.7, 0.5, 0.0, 0.1, 0.3);
  const auto ens = run_filter(m, driver(), 200, 4);
  const TestFunction one = constant_function(1.0);
  for (std::size_t i = 0; i <= 128; ++i) CHECK(mu(ens, one, i) == 1.0);
  CHECK(mc_stderr(ens, one, 128) == 0.0);
  const TestFunction bump = gaussian_bump();
  double mean = 0.0;
  for (std::size_t p = 0; p < 200; ++p) mean += bump.value(ens.state(p, 77));
  CHECK_THAT(sigma(ens, bump, 77), WithinAbs(mean / 200, 1e-12));
}

TEST_CASE("normalised filter of the constant is one", "[sigma]") {
  const auto ens = run_filter(bounded_nonlinear_model(), driver(), 300, 9);
  for (std::size_t i = 0; i <= 128; i += 16) CHECK(sigma(ens, constant_function(1.0), i) == 1.0);
}

TEST_CASE("mass is consistent across seeds", "[mu]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = driver(128);
  const std::vector<TestFunction> one{constant_function(1.0)};
  const NodeMoments a = filter_moments(m, rp, one, 10000, 1);
  const NodeMoments b = filter_moments(m, rp, one, 10000, 2);
  const double se = std::hypot(a.stderr_of(128, 0), b.stderr_of(128, 0));
  CHECK(std::abs(a.mean(128, 0) - b.mean(128, 0)) <= 3 * se);
}

TEST_CASE("symmetric model has centred first moment", "[mu]") {
  ScalarCoefficients s;
  s.drift = [](double, double x, double) { return -x; };
  s.diffusion = [](double, double, double) { return 1.0; };
  Model m;
  m.coeffs = make_scalar_coefficients(s, "ou");
  m.init.mean = {0.0};
  m.init.stddev = {1.0};
  const std::vector<TestFunction> id{coordinate_function(0)};
  const NodeMoments mom = filter_moments(m, driver(), id, 5000, 3);
  CHECK(std::abs(mom.mean(128, 0)) <= 3 * mom.stderr_of(128, 0));
}

TEST_CASE("mass averages to one over reference-measure drivers", "[mu]") {
  const Model m = lg_model(LinearGaussianParams{}, false);
  const std::vector<TestFunction> one{constant_function(1.0)};
  std::vector<double> masses;
  for (std::uint64_t d = 0; d < 200; ++d) {
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 64), 1, 16, 0.45, derive_seed(99, "observation", d));
    masses.push_back(filter_moments(m, rp, one, 200, derive_seed(99, "rough_filter", d)).mass(64));
  }
  const double mean = pairwise_sum(masses) / masses.size();
  CHECK(std::abs(mean - 1.0) <= 3 * sample_stderr(masses));
}

TEST_CASE("moments do not depend on the thread count", "[determinism]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = driver();
  const auto lib = test_function_library();
  const NodeMoments a = filter_moments(m, rp, lib, 1500, 12, 1);
  const NodeMoments b = filter_moments(m, rp, lib, 1500, 12, 3);
  CHECK(a.s1 == b.s1);
  CHECK(a.s2 == b.s2);
  CHECK(a.mass1 == b.mass1);
  const auto ens = run_filter(m, rp, 1500, 12, 2);
  const NodeMoments c = filter_moments(ens, lib);
  CHECK(c.s1 == a.s1);
}

TEST_CASE("degenerate mass and small ensembles are reported", "[errors]") {
  auto ens = run_filter(bounded_nonlinear_model(), driver(), 4, 1);
  std::fill(ens.weights.begin(), ens.weights.end(), 0.0);
  CHECK_THROWS_AS(sigma(ens, gaussian_bump(), 5), DegenerateMass);
  const auto one = run_filter(bounded_nonlinear_model(), driver(), 1, 1);
  CHECK_THROWS_AS(mc_stderr(one, gaussian_bump(), 5), InputError);
  CHECK_THROWS_AS(mu(one, gaussian_bump(), 500), InputError);
}

TEST_CASE("robustness probe", "[robustness]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = driver(256);
  SECTION("zero shift changes nothing") {
    const auto t = robustness_probe(m, rp, PerturbationSpec{{0.0}, false, 0}, gaussian_bump(), 500, 3);
    CHECK(t.rows.at(0).diff == 0.0);
    CHECK(t.rows.at(0).rho == 0.0);
  }
  SECTION("geometrified lift is distinguishable when f is nonzero") {
    const auto t = robustness_probe(m, rp, PerturbationSpec{{}, true, 0}, gaussian_bump(), 5000, 3);
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].diff > 3 * t.rows[0].diff_stderr);
  }
  SECTION("shift sweep decays") {
    const auto t = robustness_probe(m, rp, PerturbationSpec{{0.4, 0.2, 0.1, 0.05, 0.025}, true, 0},
                                    gaussian_bump(), 5000, 3);
    const auto v = assess_robustness(t);
    CHECK(v.monotone);
    CHECK(v.ratios_bounded);
    CHECK(v.lift_detected);
  }
  SECTION("smoothing row") {
    const auto t = robustness_probe(m, rp, PerturbationSpec{{}, false, 8}, gaussian_bump(), 200, 3);
    REQUIRE(t.rows.size() == 1);
    CHECK(t.rows[0].rho > 0.0);
  }
}

TEST_CASE("filter csv has unit normalised mass", "[io]") {
  const auto dir = support::scratch("filter_csv");
  const auto lib = test_function_library();
  const RoughPath rp = driver(64);
  const NodeMoments mom = filter_moments(bounded_nonlinear_model(), rp, lib, 200, 5);
  write_filter_csv(mom, lib, rp.grid(), 1, dir / "filter.csv");
  std::ifstream in(dir / "filter.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "t,phi_name,mu,sigma,stderr");
  std::size_t ones = 0;
  while (std::getline(in, line)) {
    const auto cells = io::split_csv(line);
    if (cells.at(1) == "one") {
      CHECK(std::stod(cells.at(3)) == 1.0);
      ++ones;
    }
  }
  CHECK(ones == 65);
}
