#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "roughfilter/degenerate.hpp"
#include "roughfilter/filter.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Approx;

namespace {

// Fine Brownian samples of dimension dim on grid x refine.
std::vector<double> fine_brownian(const TimeGrid& g, std::size_t refine, std::size_t dim, std::uint64_t seed) {
  return brownian_path(seed, Stream::observation_noise, 0, g.steps * refine, dim,
                       g.dt() / static_cast<double>(refine));
}

// Y = k W with constant row-major k (dy x dw).
std::vector<double> apply_k(const std::vector<double>& W, const std::vector<double>& k, std::size_t dy, std::size_t dw) {
  const std::size_t n = W.size() / dw;
  std::vector<double> Y(n * dy, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < dy; ++a)
      for (std::size_t w = 0; w < dw; ++w) Y[s * dy + a] += k[a * dw + w] * W[s * dw + w];
  return Y;
}

}  // namespace

TEST_CASE("pseudo-inverse examples", "[degenerate]") {
  Eigen::MatrixXd a(2, 2);
  a << 2, 0, 0, 0;
  std::size_t rank = 9;
  const Eigen::MatrixXd g = moore_penrose(a, 1e-12, &rank);
  CHECK(rank == 1);
  CHECK(g(0, 0) == Approx(0.5).margin(1e-15));
  CHECK(g(0, 1) == 0.0);
  CHECK(g(1, 0) == 0.0);
  CHECK(g(1, 1) == 0.0);

  Eigen::MatrixXd b(2, 2);
  b << 3, 1, 1, 2;
  const Eigen::MatrixXd bi = moore_penrose(b);
  CHECK((bi - b.inverse()).cwiseAbs().maxCoeff() <= 1e-14);

  const std::vector<double> flat{1.0, 0.5};  // 1 x 2 row
  const auto p = moore_penrose(flat, 1, 2);
  REQUIRE(p.size() == 2);
  CHECK(p[0] == Approx(1.0 / 1.25).margin(1e-15));
  CHECK(p[1] == Approx(0.5 / 1.25).margin(1e-15));
  CHECK_THROWS_AS(moore_penrose(flat, 2, 2), InputError);

  CHECK(moore_penrose(Eigen::MatrixXd::Zero(2, 3)).isZero());
}

TEST_CASE("Penrose identities on random matrices", "[degenerate]") {
  std::vector<double> z(6);
  for (std::uint64_t k = 0; k < 50; ++k) {
    standard_normals(123, Stream::probe, k, 0, z);
    Eigen::MatrixXd a(3, 2);
    a << z[0], z[1], z[2], z[3], z[4], z[5];
    if (k % 5 == 0) a.col(1) = 2.0 * a.col(0);  // rank deficient
    const auto r = penrose_residuals(a, moore_penrose(a));
    CHECK(r.max() <= 1e-8);
  }
}

TEST_CASE("hat lift blocks", "[degenerate]") {
  const TimeGrid g(1.0, 32);
  const std::size_t refine = 16;

  SECTION("invertible k leaves the kernel block empty") {
    const std::vector<double> k{2.0, 0.5, -0.3, 1.0};
    const auto W = fine_brownian(g, refine, 2, 11);
    const auto Y = apply_k(W, k, 2, 2);
    const auto hat = build_hat_lift(Y, W, constant_field(k), nullptr, 2, 2, g, refine);
    CHECK(hat.path.dim() == 6);
    CHECK(hat.min_rank == 2);
    CHECK(hat.max_penrose <= 1e-12);
    for (std::size_t i = 0; i < g.nodes(); ++i) {
      CHECK(std::abs(hat.path.value(i)[4]) <= 1e-12);
      CHECK(std::abs(hat.path.value(i)[5]) <= 1e-12);
      // k^+ Y recovers W
      CHECK(hat.path.value(i)[2] == Approx(W[i * refine * 2 + 0]).margin(1e-12));
      CHECK(hat.path.value(i)[3] == Approx(W[i * refine * 2 + 1]).margin(1e-12));
    }
  }
  SECTION("identity k copies Y") {
    const auto W = fine_brownian(g, refine, 1, 12);
    const auto hat = build_hat_lift(W, W, constant_field({1.0}), nullptr, 1, 1, g, refine);
    for (std::size_t i = 0; i < g.nodes(); ++i) {
      CHECK(hat.path.value(i)[1] == Approx(hat.path.value(i)[0]).margin(1e-14));
      CHECK(hat.path.value(i)[2] == 0.0);
    }
  }
  SECTION("rank one k puts the lost component in the kernel block") {
    const std::vector<double> k{1.0, 0.0, 0.0, 0.0};
    const auto W = fine_brownian(g, refine, 2, 13);
    const auto Y = apply_k(W, k, 2, 2);
    const auto hat = build_hat_lift(Y, W, constant_field(k), nullptr, 2, 2, g, refine);
    CHECK(hat.min_rank == 1);
    CHECK(hat.max_rank == 1);
    for (std::size_t i = 0; i < g.nodes(); ++i) {
      const double w1 = W[i * refine * 2], w2 = W[i * refine * 2 + 1];
      CHECK(hat.path.value(i)[2] == Approx(w1).margin(1e-14));
      CHECK(hat.path.value(i)[3] == 0.0);
      CHECK(hat.path.value(i)[4] == 0.0);
      CHECK(hat.path.value(i)[5] == Approx(w2).margin(1e-14));
    }
  }
  SECTION("length mismatch") {
    std::vector<double> short_path(10, 0.0);
    CHECK_THROWS_AS(build_hat_lift(short_path, short_path, constant_field({1.0}), nullptr, 1, 1, g, refine),
                    InputError);
  }
}

TEST_CASE("zero sensor keeps unit weights on the extended model", "[degenerate]") {
  DegenerateScenario s = degenerate_rank1();
  s.h2 = constant_field({0.0, 0.0});
  s.h2_dx = nullptr;
  const TimeGrid g(1.0, 32);
  const TimeGrid fine(1.0, 32 * 16);
  const auto obs = simulate_observation(s, fine, 4);
  const auto hat = build_hat_lift(s, obs, g, 16);
  CHECK(hat.path.dim() == s.hat_dim());
  const auto ens = run_filter(extended_model(s), hat.path, 64, 9);
  for (double w : ens.weights) CHECK(w == Approx(1.0).margin(1e-14));
}

TEST_CASE("extended coefficients place fields on blocks", "[degenerate]") {
  const DegenerateScenario s = degenerate_rank1();
  const CoefficientSet c = extended_coefficients(s);
  CHECK(c.dy == 5);
  std::vector<double> x{0.4}, yh{0.2, 9.0, 9.0, 9.0, 9.0}, f(5), h(5);
  c.driver_field(0.0, x, yh, f);
  c.obs_field(0.0, x, yh, h);
  CHECK(f[0] == 0.0);
  CHECK(h[0] == 0.0);
  CHECK(f[1] == Approx(0.4 * std::cos(0.4)));
  CHECK(f[3] == f[1]);
  CHECK(f[2] == Approx(0.3 + 0.1 * std::sin(0.2)));
  CHECK(f[4] == f[2]);
  CHECK(h[1] == Approx(0.8 * std::tanh(0.4)));
  CHECK(h[3] == h[1]);
  CHECK(h[4] == h[2]);
  CHECK_THROWS_AS(nondegenerate_model(s), CapabilityError);
  CHECK_THROWS_AS(extended_coefficients(DegenerateScenario{}), CapabilityError);
}

TEST_CASE("degenerate filter reports rank and unit mass for phi = 1", "[degenerate]") {
  const DegenerateScenario s = degenerate_rank1();
  const TimeGrid g(1.0, 64);
  const TimeGrid fine(1.0, 64 * 16);
  const auto obs = simulate_observation(s, fine, 21);
  const auto hat = build_hat_lift(s, obs, g, 16);
  const auto res = degenerate_filter(s, hat, {constant_function(1.0), tanh_function()}, 500, 3);
  CHECK(res.min_rank == 1);
  CHECK(res.max_rank == 1);
  CHECK(res.max_penrose <= 1e-8);
  for (std::size_t i = 0; i < g.nodes(); ++i) CHECK(res.moments.ratio(i, 0) == Approx(1.0).margin(1e-12));
  const RoughPath wrong = support::linear_path(1.0, 64);
  CHECK_THROWS_AS(degenerate_filter(s, HatRoughPath{wrong, {}, 1, 1, 0.0, 0, 0}, {}, 10, 3), InputError);
}

TEST_CASE("invertible scenario: extended and reduced agree", "[degenerate][slow]") {
  const auto r = reduction_consistency(invertible_scalar_scenario(), TimeGrid(1.0, 128), 16, 3000, 20240601);
  CHECK(r.phis.size() == 5);
  INFO("max_diff=" << r.max_diff << " tol=" << r.tolerance);
  CHECK(r.max_penrose <= 1e-8);
  CHECK(r.pass);
}

TEST_CASE("kernel block integral averages to zero", "[degenerate][slow]") {
  const auto chk = kernel_projection_check(degenerate_rank1(), TimeGrid(1.0, 32), 16, gaussian_bump(), 24, 200, 5);
  CHECK(chk.integrals.size() == 24);
  INFO("mean=" << chk.mean << " se=" << chk.std_error);
  CHECK(chk.std_error > 0.0);
  CHECK(chk.pass);
  CHECK_THROWS_AS(kernel_projection_check(degenerate_rank1(), TimeGrid(1.0, 32), 16, gaussian_bump(), 1, 10, 5),
                  InputError);
}
