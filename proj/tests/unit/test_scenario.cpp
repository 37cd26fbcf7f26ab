#include <catch_amalgamated.hpp>

#include <fstream>
#include <string>

#include "roughfilter/hash.hpp"
#include "roughfilter/scenario.hpp"
#include "support.hpp"

using namespace roughfilter;
using Catch::Matchers::ContainsSubstring;

namespace {

ScenarioConfig small_filter_config(std::uint64_t seed = 11) {
  return parse_config(R"({"model": "bounded_nonlinear", "grid": {"T": 1.0, "N": 32},
                          "driver": {"kind": "ito", "refine_factor": 16},
                          "particles": 300, "seed": )" +
                      std::to_string(seed) + "}");
}

}  // namespace

TEST_CASE("git blob hash", "[scenario]") {
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("config parsing", "[scenario][config]") {
  SECTION("defaults") {
    const auto c = parse_config("{}");
    CHECK(c.model == "bounded_nonlinear");
    CHECK(c.driver.kind == LiftKind::ito);
    CHECK(c.driver.refine_factor == 16);
    CHECK(c.alpha == 0.45);
  }
  SECTION("unknown field names the field") {
    CHECK_THROWS_WITH(parse_config(R"({"grid": {"T": 1, "steps": 8}})"), ContainsSubstring("grid.steps"));
    CHECK_THROWS_AS(parse_config(R"({"particle": 10})"), ConfigError);
  }
  SECTION("unknown model lists the builtins") {
    CHECK_THROWS_WITH(parse_config(R"({"model": "van_der_pol"})"),
                      ContainsSubstring("van_der_pol") && ContainsSubstring("bounded_nonlinear"));
  }
  SECTION("syntax errors carry line and column") {
    CHECK_THROWS_WITH(parse_config("{\n  \"seed\": 1,\n  ]\n}", "bad.json"),
                      ContainsSubstring("bad.json") && ContainsSubstring("line 3"));
  }
  SECTION("types and ranges") {
    CHECK_THROWS_AS(parse_config(R"({"seed": "x"})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"grid": {"T": -1}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"alpha": 0.3})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"driver": {"kind": "stratonovich"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"driver": {"kind": "file"}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"phis": ["nope"]})"), ConfigError);
  }
  SECTION("tolerance overrides") {
    const auto c = parse_config(R"({"tolerances": {"mass_floor": 1e-9, "min_fit_scales": 4}})");
    CHECK(c.tol.min_fit_scales == 4);
    CHECK(c.tol.mass_floor == 1e-9);
    CHECK_THROWS_WITH(parse_config(R"({"tolerances": {"min_ito_refine": 4}})"), ContainsSubstring("min_ito_refine"));
    CHECK_THROWS_AS(parse_config(R"({"tolerances": {"mass_floor": -1}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"tolerances": {"nonsense": 1}})"), ConfigError);
  }
  SECTION("Ito refinement floor") {
    const auto c = parse_config(R"({"grid": {"T": 1, "N": 16}, "driver": {"kind": "ito", "refine_factor": 8}})");
    bool cfg = false;
    const auto rep = run_command("lift", c, RunOptions{support::scratch("refine8"), 1}, &cfg);
    CHECK(rep.status == RunStatus::error);
    CHECK(cfg);
    CHECK(exit_code(rep.status, cfg) == 2);
  }
  SECTION("span ladder") {
    auto c = parse_config(R"({"grid": {"T": 1, "N": 128}})");
    for (std::size_t s : c.ladder()) CHECK(4 * s <= 128);
    c = parse_config(R"({"grid": {"T": 1, "N": 128}, "spans": [16, 32, 64, 128]})");
    CHECK(c.ladder().size() == 4);
  }
  SECTION("inline affine model") {
    const auto c = parse_config(R"({"model": {"name": "ou", "drift": [0, -1, 0], "diffusion": [1, 0, 0],
                                              "driver": [0.5, 0, 0], "obs": [0, 1, 0]}})");
    const Model m = resolve_model(c);
    std::vector<double> x{2.0}, y{0.0}, b(1);
    m.coeffs.drift(0.0, x, y, b);
    CHECK(b[0] == -2.0);
    CHECK_THROWS_AS(parse_config(R"({"model": {"name": "ou", "drift": [0, -1]}})"), ConfigError);
  }
}

TEST_CASE("exit codes", "[scenario]") {
  CHECK(exit_code(RunStatus::pass) == 0);
  CHECK(exit_code(RunStatus::fail) == 1);
  CHECK(exit_code(RunStatus::error) == 1);
  CHECK(exit_code(RunStatus::inconclusive) == 3);
  CHECK(exit_code(RunStatus::pass, true) == 2);
}

TEST_CASE("runs are reproducible", "[scenario]") {
  const auto c = small_filter_config();
  const auto a = run_command("filter", c, RunOptions{support::scratch("rep_a"), 1});
  const auto b = run_command("filter", c, RunOptions{support::scratch("rep_b"), 1});
  REQUIRE(a.status == RunStatus::pass);
  CHECK(a.input_hash == b.input_hash);
  CHECK(a.input_hash.size() == 40);
  CHECK(a.metrics.dump() == b.metrics.dump());
  CHECK(run_command("filter", small_filter_config(12), RunOptions{support::scratch("rep_c"), 1}).input_hash !=
        a.input_hash);
  CHECK(run_command("lift", c, RunOptions{support::scratch("rep_d"), 1}).input_hash != a.input_hash);
}

TEST_CASE("filter subcommand writes unit mass for phi = 1", "[scenario]") {
  const auto dir = support::scratch("filter_cmd");
  const auto rep = run_command("filter", small_filter_config(), RunOptions{dir, 1});
  REQUIRE(rep.status == RunStatus::pass);
  write_report(rep, dir);
  CHECK(std::filesystem::exists(dir / "filter_report.json"));
  REQUIRE(std::filesystem::exists(dir / "filter.csv"));
  std::ifstream in(dir / "filter_report.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["status"] == "pass");
  CHECK(j["input_hash"] == rep.input_hash);
  CHECK(j.contains("wall_time_s"));
  REQUIRE(j["metrics"]["terminal"].contains("one"));
  CHECK(j["metrics"]["terminal"]["one"]["sigma_T"].get<double>() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("lift subcommand on a piecewise-linear driver", "[scenario]") {
  const auto c = parse_config(R"({"grid": {"T": 1.0, "N": 1024}, "driver": {"kind": "piecewise_linear"}, "seed": 7})");
  const auto dir = support::scratch("lift_cmd");
  const auto rep = run_command("lift", c, RunOptions{dir, 1});
  CHECK(rep.status == RunStatus::pass);
  CHECK(rep.metrics["chen_pass"] == true);
  CHECK(rep.metrics["bracket_pass"] == true);
  CHECK(std::filesystem::exists(dir / "rough_path.csv"));
  CHECK(std::filesystem::exists(dir / "validation.json"));
}

TEST_CASE("unknown subcommand is a configuration error", "[scenario]") {
  bool cfg = false;
  const auto rep = run_command("smooth", parse_config("{}"), RunOptions{support::scratch("unknown_cmd"), 1}, &cfg);
  CHECK(cfg);
  CHECK_THAT(rep.message, ContainsSubstring("smooth"));
}
