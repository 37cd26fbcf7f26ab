#include <catch_amalgamated.hpp>

#include <cmath>

#include "roughfilter/classical.hpp"
#include "roughfilter/residuals.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::WithinAbs;

namespace {
const std::vector<std::size_t> kSpans{4, 8, 16, 32, 64};

Model h_free_model() {
  ScalarCoefficients s = bounded_nonlinear_scalars();
  s.obs = ScalarCoefficients::zero;
  s.obs_dx = ScalarCoefficients::zero;
  s.obs_dy = ScalarCoefficients::zero;
  Model m;
  m.coeffs = make_scalar_coefficients(s, "h_free");
  m.init.mean = {0.5};
  m.init.stddev = {0.5};
  return m;
}
}  // namespace

TEST_CASE("static measure has zero Zakai residual", "[zakai]") {
  const Model m = support::constant_model(0, 0, 0, 0, 0.2, 1.0);
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 256), 1, 16, 0.45, 3);
  const auto r = zakai_davie_residual(m, rp, gaussian_bump(), kSpans, 500, 4);
  for (const auto& w : r.windows) CHECK(std::abs(w.residual) <= 1e-13);
  CHECK(r.inconclusive);
}

TEST_CASE("Zakai residual scaling on the bounded model", "[zakai]") {
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 1024), 1, 16, 0.45, derive_seed(3, "observation"));
  const std::vector<std::size_t> spans{16, 32, 64, 128, 256};
  const auto r = zakai_davie_residual(bounded_nonlinear_model(), rp, gaussian_bump(), spans, 4000, 8);
  REQUIRE_FALSE(r.inconclusive);
  CHECK(r.exponent >= 3 * 0.45 - 0.2);
}

TEST_CASE("span outside the grid is an input error", "[zakai]") {
  const RoughPath rp = support::linear_path(1.0, 32);
  const std::vector<std::size_t> spans{64};
  CHECK_THROWS_AS(zakai_davie_residual(bounded_nonlinear_model(), rp, gaussian_bump(), spans, 10, 1), InputError);
}

TEST_CASE("Kushner-Stratonovich stack identities", "[ks]") {
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 1, 16, 0.45, 5);
  SECTION("h = 0 has no Psi") {
    const KSMoments mom = ks_moments(h_free_model(), rp, gaussian_bump(), 500, 6);
    const KSDerivativeStack st = build_ks_stack(mom, mom.batches);
    for (double v : st.Psi) CHECK(v == 0.0);
    for (double v : st.mass) CHECK(v == 1.0);
  }
  SECTION("constant test function has no Phi") {
    const KSMoments mom = ks_moments(bounded_nonlinear_model(), rp, constant_function(1.0), 500, 6);
    const KSDerivativeStack st = build_ks_stack(mom, mom.batches);
    for (double v : st.Phi) CHECK_THAT(v, WithinAbs(0.0, 1e-12));
    const auto r = ks_davie_residual(mom, rp, kSpans);
    for (const auto& w : r.windows) CHECK(std::abs(w.residual) <= 1e-12);
  }
}

TEST_CASE("KS residual reduces to the Zakai residual when h = 0", "[ks]") {
  const Model m = h_free_model();
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 1, 16, 0.45, 5);
  const auto ens = run_filter(m, rp, 400, 7);
  const OperatorContext ctx(m.coeffs, rp);
  const auto z = zakai_davie_residual(ens, ctx, gaussian_bump(), kSpans);
  const auto k = ks_davie_residual(ens, ctx, gaussian_bump(), kSpans);
  REQUIRE(z.windows.size() == k.windows.size());
  for (std::size_t w = 0; w < z.windows.size(); ++w)
    CHECK_THAT(k.windows[w].residual, WithinAbs(z.windows[w].residual, 1e-12));
}

TEST_CASE("total mass equation", "[total_mass]") {
  SECTION("h = 0") {
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 128), 1, 16, 0.45, 5);
    const KSMoments mom = ks_moments(h_free_model(), rp, constant_function(1.0), 300, 2, test_function_library());
    const auto rep = total_mass_rde(mom, rp);
    for (double z : rep.total_mass) CHECK_THAT(z, WithinAbs(1.0, 1e-14));
    CHECK(rep.max_mass_gap <= 1e-14);
  }
  SECTION("constant h on a smooth driver") {
    const Model m = support::constant_model(0, 1, 0, 0.8, 0.0, 1.0);
    const RoughPath rp = support::linear_path(1.0, 1024, 0.5);
    const KSMoments mom = ks_moments(m, rp, constant_function(1.0), 100, 2);
    const auto rep = total_mass_rde(mom, rp);
    CHECK_THAT(rep.total_mass.back(), WithinAbs(std::exp(0.8 * 0.5), 1e-3));
  }
  SECTION("bounded model") {
    const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 1024), 1, 16, 0.45, 5);
    const KSMoments mom = ks_moments(bounded_nonlinear_model(), rp, constant_function(1.0), 2000, 2,
                                     test_function_library());
    CHECK(total_mass_rde(mom, rp).pass());
  }
}
