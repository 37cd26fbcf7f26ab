#include <catch_amalgamated.hpp>

#include <cmath>

#include "roughfilter/backward.hpp"
#include "roughfilter/classical.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::WithinAbs;

namespace {
SpatialGrid box(double lo, double hi, std::size_t K) {
  SpatialGrid g;
  g.lo = {lo};
  g.hi = {hi};
  g.K = K;
  return g;
}
}  // namespace

TEST_CASE("terminal slice is the test function", "[backward]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 64), 1, 16, 0.45, 3);
  const OperatorContext ctx(m.coeffs, rp);
  const TestFunction phi = tanh_function();
  const auto u = solve_backward_fk(ctx, phi, box(-3, 3, 17), checkpoint_nodes(64, 16), 200, 5);
  const std::size_t last = u.slot_of(64);
  for (std::size_t g = 0; g < 17; ++g) CHECK(u.value(last, g) == phi.value(u.space.point(g)));
}

TEST_CASE("frozen dynamics", "[backward]") {
  const Model m = support::constant_model(0, 0, 0, 0, 0.0, 0.7);
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 32), 1, 16, 0.45, 3);
  const OperatorContext ctx(m.coeffs, rp);
  const TestFunction phi = gaussian_bump();
  const auto u = solve_backward_fk(ctx, phi, box(-4, 4, 33), checkpoint_nodes(32, 1), 50, 5);
  for (std::size_t k = 0; k < u.slots(); ++k)
    for (std::size_t g = 0; g < 33; ++g) CHECK_THAT(u.value(k, g), WithinAbs(phi.value(u.space.point(g)), 1e-14));
  const std::vector<std::size_t> spans{2, 4, 8};
  const auto r = backward_davie_residual(u, ctx, spans);
  const auto uc = solve_backward_fk(ctx, constant_function(1.0), box(-4, 4, 9), checkpoint_nodes(32, 1), 50, 5);
  for (const auto& w : backward_davie_residual(uc, ctx, spans).windows) CHECK(w.residual == 0.0);
  // Linear test functions are reproduced exactly by the interpolation; the bump only up to
  // the interpolation term of the budget.
  const TestFunction id = coordinate_function(0);
  const auto ui = solve_backward_fk(ctx, id, box(-4, 4, 33), checkpoint_nodes(32, 8), 50, 5);
  const std::vector<GridFunction> us{ui, solve_backward_fk(ctx, phi, box(-4, 4, 33), checkpoint_nodes(32, 8), 50, 5)};
  const std::vector<TestFunction> phis{id, phi};
  const auto rep = duality_check(m, rp, us, phis, 1000, 7);
  CHECK(rep.at(0).max_deviation <= 1e-14);
  CHECK(rep.at(0).pass);
  for (const auto& row : rep.at(1).rows) CHECK(std::abs(row.deviation) <= row.interpolation);
}

TEST_CASE("heat semigroup oracle", "[backward]") {
  const Model m = support::constant_model(0, 1, 0, 0, 0.0, 1.0);
  const RoughPath rp = support::linear_path(1.0, 64);
  const OperatorContext ctx(m.coeffs, rp);
  const auto u = solve_backward_fk(ctx, gaussian_bump(), box(-3, 3, 13), checkpoint_nodes(64, 16), 4000, 9);
  for (std::size_t k = 0; k < u.slots(); ++k) {
    const double tau = 1.0 - u.time[k];
    for (std::size_t g = 0; g < 13; ++g) {
      const double x = u.space.point(g)[0];
      const double exact = std::exp(-x * x / (2 * (1 + tau))) / std::sqrt(1 + tau);
      CHECK(std::abs(u.value(k, g) - exact) <= 3 * u.stderr_at(k, g) + 1e-12);
    }
  }
}

TEST_CASE("duality on a diffusion without observation weight", "[duality]") {
  const Model m = support::constant_model(0, 1, 0, 0, 0.0, 1.0);
  const RoughPath rp = support::linear_path(1.0, 64);
  const OperatorContext ctx(m.coeffs, rp);
  const std::vector<TestFunction> phis{gaussian_bump()};
  const SpatialGrid sg = auto_box(m, rp, 64, 2000, 11);
  const auto us = solve_backward_fk(ctx, phis, sg, checkpoint_nodes(64, 16), 2000, 12);
  const auto rep = duality_check(m, rp, us, phis, 2000, 13);
  CHECK(rep.at(0).pass);
  CHECK(rep.at(0).max_deviation <= rep.at(0).budget_at_max);
}

TEST_CASE("too many box exits invalidate the run", "[duality]") {
  const Model m = support::constant_model(0, 1, 0, 0, 0.0, 1.0);
  const RoughPath rp = support::linear_path(1.0, 16);
  const OperatorContext ctx(m.coeffs, rp);
  const std::vector<TestFunction> phis{gaussian_bump()};
  const auto us = solve_backward_fk(ctx, phis, box(-0.2, 0.2, 5), checkpoint_nodes(16, 8), 50, 1);
  CHECK_THROWS_AS(duality_check(m, rp, us, phis, 500, 2), InvalidRun);
}

TEST_CASE("checkpoint spacing must divide the grid", "[backward]") {
  CHECK(checkpoint_nodes(64, 32) == std::vector<std::size_t>{0, 32, 64});
  CHECK_THROWS_AS(checkpoint_nodes(64, 24), InputError);
  CHECK_THROWS_AS(checkpoint_nodes(64, 0), InputError);
}

TEST_CASE("box covers the pilot spread", "[backward]") {
  const Model m = bounded_nonlinear_model();
  const RoughPath rp = brownian_ito_lift(TimeGrid(1.0, 64), 1, 16, 0.45, 3);
  const SpatialGrid sg = auto_box(m, rp, 32, 1000, 4);
  CHECK(sg.K == 32);
  CHECK(sg.lo[0] < 0.0);
  CHECK(sg.hi[0] > 1.0);
}
