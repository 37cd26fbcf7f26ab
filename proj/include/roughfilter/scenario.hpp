#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "backward.hpp"
#include "classical.hpp"
#include "degenerate.hpp"
#include "errors.hpp"
#include "filter.hpp"
#include "hash.hpp"
#include "io.hpp"
#include "models.hpp"
#include "operators.hpp"
#include "residuals.hpp"
#include "roughpath.hpp"
#include "test_functions.hpp"
#include "tolerances.hpp"

namespace roughfilter {

inline const std::vector<std::string>& builtin_models() {
  static const std::vector<std::string> ids{"lg_uncorrelated", "lg_correlated", "bounded_nonlinear",
                                            "degenerate_rank1"};
  return ids;
}

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> cmds{"lift",       "filter",    "zakai_residual", "ks_residual",
                                             "duality",    "robustness", "randomize",      "kalman_compare",
                                             "degenerate"};
  return cmds;
}

struct DriverConfig {
  LiftKind kind = LiftKind::ito;
  std::size_t refine_factor = 16;
  double area_shift = 0.0;
  std::string file, header;
};

struct DualityConfig {
  std::size_t K = 64, checkpoint_every = 32, pilot = 2000;
};

struct RobustnessConfig {
  std::vector<double> area_shifts{0.4, 0.2, 0.1, 0.05, 0.025};
  bool ito_vs_geometrified = true;
  std::size_t smoothing_window = 0;
};

struct RandomizeConfig {
  std::size_t refine_factor = 64;
  std::size_t classical_particles = 0;  // 0: same as particles
};

struct KalmanConfig {
  std::size_t checkpoints = 8;
  std::size_t refine_factor = 16;
};

struct ScenarioConfig {
  std::string experiment = "run";
  std::string model = "bounded_nonlinear";
  std::optional<nlohmann::json> inline_model;
  double T = 1.0;
  std::size_t N = 256;
  DriverConfig driver;
  std::size_t M = 1000, M_inner = 1000;
  double alpha = 0.45;
  std::uint64_t seed = 1;
  std::optional<std::size_t> threads;
  std::string output;
  Tolerances tol = default_tolerances();
  std::vector<std::string> phis;
  std::vector<std::size_t> spans{16, 32, 64, 128, 256, 512};
  bool spans_given = false;

  // Default ladder keeps at least four windows per span.
  std::vector<std::size_t> ladder() const {
    if (spans_given) return spans;
    std::vector<std::size_t> out;
    for (std::size_t S : spans)
      if (4 * S <= N) out.push_back(S);
    return out;
  }
  LinearGaussianParams lg;
  bool lg_given = false;
  DualityConfig duality;
  RobustnessConfig robustness;
  RandomizeConfig randomize;
  KalmanConfig kalman;
  nlohmann::json raw;

  TimeGrid grid() const { return TimeGrid(T, N); }
};

namespace detail {
inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t k = 0; k < std::min(byte, text.size()); ++k) {
    if (text[k] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

// Strict object reader: every key must be consumed or listed, else ConfigError.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("field '" + name() + "': expected an object");
  }

  void allow(std::initializer_list<const char*> keys) {
    std::vector<std::string> allowed(keys.begin(), keys.end());
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
        std::string list;
        for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
        throw ConfigError("unknown field '" + field(it.key()) + "' (allowed: " + list + ")");
      }
  }

  bool has(const char* k) const { return j_.contains(k); }
  const nlohmann::json& at(const char* k) const { return j_.at(k); }
  std::string field(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  double number(const char* k, double fallback) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_number()) throw ConfigError("field '" + field(k) + "': expected a number");
    return v.get<double>();
  }
  std::size_t count(const char* k, std::size_t fallback, std::size_t min_value = 0) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError("field '" + field(k) + "': expected a nonnegative integer");
    const auto n = v.get<std::size_t>();
    if (n < min_value)
      throw ConfigError("field '" + field(k) + "': must be at least " + std::to_string(min_value));
    return n;
  }
  std::uint64_t u64(const char* k, std::uint64_t fallback) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError("field '" + field(k) + "': expected an unsigned 64-bit integer");
    return v.get<std::uint64_t>();
  }
  std::string text(const char* k, const std::string& fallback) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_string()) throw ConfigError("field '" + field(k) + "': expected a string");
    return v.get<std::string>();
  }
  bool flag(const char* k, bool fallback) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_boolean()) throw ConfigError("field '" + field(k) + "': expected true or false");
    return v.get<bool>();
  }
  template <class T>
  std::vector<T> list(const char* k, std::vector<T> fallback) const {
    if (!has(k)) return fallback;
    const auto& v = j_.at(k);
    if (!v.is_array()) throw ConfigError("field '" + field(k) + "': expected an array");
    std::vector<T> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto& e = v[i];
      const std::string where = field(k) + "[" + std::to_string(i) + "]";
      if constexpr (std::is_same_v<T, std::string>) {
        if (!e.is_string()) throw ConfigError("field '" + where + "': expected a string");
      } else if constexpr (std::is_integral_v<T>) {
        if (!e.is_number_unsigned()) throw ConfigError("field '" + where + "': expected a nonnegative integer");
      } else {
        if (!e.is_number()) throw ConfigError("field '" + where + "': expected a number");
      }
      out.push_back(e.get<T>());
    }
    return out;
  }

 private:
  std::string name() const { return path_.empty() ? "<root>" : path_; }
  const nlohmann::json& j_;
  std::string path_;
};

inline void apply_tolerance_overrides(const nlohmann::json& j, Tolerances& t) {
  const std::map<std::string, double Tolerances::*> doubles{
      {"chen_residual", &Tolerances::chen_residual},
      {"bracket_identity", &Tolerances::bracket_identity},
      {"bracket_symmetry", &Tolerances::bracket_symmetry},
      {"derivative_check_rel", &Tolerances::derivative_check_rel},
      {"derivative_fd_step", &Tolerances::derivative_fd_step},
      {"mass_floor", &Tolerances::mass_floor},
      {"blowup_state", &Tolerances::blowup_state},
      {"blowup_weight", &Tolerances::blowup_weight},
      {"penrose_identity", &Tolerances::penrose_identity},
      {"svd_relative_threshold", &Tolerances::svd_relative_threshold},
      {"psd_tolerance", &Tolerances::psd_tolerance},
      {"noise_multiple", &Tolerances::noise_multiple},
      {"box_exit_fraction", &Tolerances::box_exit_fraction},
      {"box_half_width_std", &Tolerances::box_half_width_std},
      {"randomization_allowance", &Tolerances::randomization_allowance},
      {"kalman_allowance", &Tolerances::kalman_allowance},
      {"degenerate_scheme", &Tolerances::degenerate_scheme},
      {"total_mass_relative", &Tolerances::total_mass_relative},
      {"exponential_relative", &Tolerances::exponential_relative},
      {"closed_form_relative", &Tolerances::closed_form_relative}};
  if (!j.is_object()) throw ConfigError("field 'tolerances': expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string where = "tolerances." + it.key();
    if (it.key() == "min_fit_scales") {
      if (!it->is_number_unsigned() || it->get<int>() < 2)
        throw ConfigError("field '" + where + "': expected an integer >= 2");
      t.min_fit_scales = it->get<int>();
      continue;
    }
    if (it.key() == "min_ito_refine")
      throw ConfigError("field '" + where + "': the Ito refinement floor is fixed and cannot be overridden");
    const auto f = doubles.find(it.key());
    if (f == doubles.end()) throw ConfigError("unknown field '" + where + "'");
    if (!it->is_number() || !(it->get<double>() > 0.0))
      throw ConfigError("field '" + where + "': expected a positive number");
    t.*(f->second) = it->get<double>();
  }
}
}  // namespace detail

// Parses a strict JSON scenario. `source` names the document in diagnostics.
inline ScenarioConfig parse_config(const std::string& text, const std::string& source = "config") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(source + ": JSON syntax error at " + detail::line_col(text, e.byte) + ": " + e.what());
  }
  ScenarioConfig c;
  c.raw = j;
  detail::ObjectReader r(j, "");
  r.allow({"experiment", "model", "grid", "driver", "particles", "inner_particles", "alpha", "seed", "threads",
           "output", "tolerances", "phis", "spans", "lg", "duality", "robustness", "randomize", "kalman"});
  c.experiment = r.text("experiment", c.experiment);
  if (r.has("model")) {
    const auto& m = r.at("model");
    if (m.is_string()) {
      c.model = m.get<std::string>();
      if (std::find(builtin_models().begin(), builtin_models().end(), c.model) == builtin_models().end()) {
        std::string list;
        for (const auto& b : builtin_models()) list += (list.empty() ? "" : ", ") + b;
        throw ConfigError("field 'model': unknown model '" + c.model + "' (builtins: " + list +
                          "; or an inline affine object)");
      }
    } else if (m.is_object()) {
      detail::ObjectReader mr(m, "model");
      mr.allow({"name", "drift", "diffusion", "driver", "obs", "init_mean", "init_stddev"});
      for (const char* k : {"drift", "diffusion", "driver", "obs"}) {
        if (!mr.has(k)) throw ConfigError("field 'model." + std::string(k) + "': required for an inline model");
        const auto v = mr.list<double>(k, {});
        if (v.size() != 3)
          throw ConfigError("field 'model." + std::string(k) + "': expected [c0, c_x, c_y]");
      }
      c.model = mr.text("name", "inline_affine");
      c.inline_model = m;
    } else {
      throw ConfigError("field 'model': expected a builtin id or an inline object");
    }
  }
  if (r.has("grid")) {
    detail::ObjectReader g(r.at("grid"), "grid");
    g.allow({"T", "N"});
    c.T = g.number("T", c.T);
    c.N = g.count("N", c.N);
    if (!(c.T > 0.0)) throw ConfigError("field 'grid.T': must be positive");
    if (c.N < 2) throw ConfigError("field 'grid.N': must be at least 2");
  }
  if (r.has("driver")) {
    detail::ObjectReader d(r.at("driver"), "driver");
    d.allow({"kind", "refine_factor", "area_shift", "file", "header"});
    const std::string kind = d.text("kind", "ito");
    if (kind == "ito") c.driver.kind = LiftKind::ito;
    else if (kind == "piecewise_linear") c.driver.kind = LiftKind::piecewise_linear;
    else if (kind == "geometrified") c.driver.kind = LiftKind::geometrified;
    else if (kind == "file") c.driver.kind = LiftKind::file;
    else
      throw ConfigError("field 'driver.kind': unknown kind '" + kind +
                        "' (allowed: ito, piecewise_linear, geometrified, file)");
    c.driver.refine_factor = d.count("refine_factor", c.driver.refine_factor, 1);
    c.driver.area_shift = d.number("area_shift", 0.0);
    c.driver.file = d.text("file", "");
    c.driver.header = d.text("header", "");
    if (c.driver.kind == LiftKind::file && c.driver.file.empty())
      throw ConfigError("field 'driver.file': required for kind 'file'");
  }
  c.M = r.count("particles", c.M, 1);
  c.M_inner = r.count("inner_particles", c.M_inner, 1);
  c.alpha = r.number("alpha", c.alpha);
  if (!(c.alpha > 1.0 / 3.0 && c.alpha <= 0.5)) throw ConfigError("field 'alpha': must lie in (1/3, 1/2]");
  c.seed = r.u64("seed", c.seed);
  if (r.has("threads")) c.threads = r.count("threads", 1, 1);
  c.output = r.text("output", "");
  if (r.has("tolerances")) detail::apply_tolerance_overrides(r.at("tolerances"), c.tol);
  c.phis = r.list<std::string>("phis", {});
  for (const auto& name : c.phis) {
    try {
      (void)library_function(name);
    } catch (const InputError& e) {
      throw ConfigError(std::string("field 'phis': ") + e.what());
    }
  }
  c.spans_given = r.has("spans");
  c.spans = r.list<std::size_t>("spans", c.spans);
  if (r.has("lg")) {
    detail::ObjectReader l(r.at("lg"), "lg");
    l.allow({"a", "sigma", "hmat", "k", "fbar", "m0", "P0"});
    c.lg.a = l.number("a", c.lg.a);
    c.lg.sigma = l.number("sigma", c.lg.sigma);
    c.lg.hmat = l.number("hmat", c.lg.hmat);
    c.lg.k = l.number("k", c.lg.k);
    c.lg.fbar = l.number("fbar", c.model == "lg_correlated" ? 0.5 : 0.0);
    c.lg.m0 = l.number("m0", c.lg.m0);
    c.lg.P0 = l.number("P0", c.lg.P0);
    c.lg_given = true;
    try {
      c.lg.check();
    } catch (const InputError& e) {
      throw ConfigError(std::string("field 'lg': ") + e.what());
    }
  } else if (c.model == "lg_correlated") {
    c.lg.fbar = 0.5;
  }
  if (r.has("duality")) {
    detail::ObjectReader d(r.at("duality"), "duality");
    d.allow({"K", "checkpoint_every", "pilot"});
    c.duality.K = d.count("K", c.duality.K, 3);
    c.duality.checkpoint_every = d.count("checkpoint_every", c.duality.checkpoint_every, 1);
    c.duality.pilot = d.count("pilot", c.duality.pilot, 2);
  }
  if (r.has("robustness")) {
    detail::ObjectReader d(r.at("robustness"), "robustness");
    d.allow({"area_shifts", "ito_vs_geometrified", "smoothing_window"});
    c.robustness.area_shifts = d.list<double>("area_shifts", c.robustness.area_shifts);
    c.robustness.ito_vs_geometrified = d.flag("ito_vs_geometrified", c.robustness.ito_vs_geometrified);
    c.robustness.smoothing_window = d.count("smoothing_window", 0);
  }
  if (r.has("randomize")) {
    detail::ObjectReader d(r.at("randomize"), "randomize");
    d.allow({"refine_factor", "classical_particles"});
    c.randomize.refine_factor = d.count("refine_factor", c.randomize.refine_factor, 1);
    c.randomize.classical_particles = d.count("classical_particles", 0);
  }
  if (r.has("kalman")) {
    detail::ObjectReader d(r.at("kalman"), "kalman");
    d.allow({"checkpoints", "refine_factor"});
    c.kalman.checkpoints = d.count("checkpoints", c.kalman.checkpoints, 1);
    c.kalman.refine_factor = d.count("refine_factor", c.kalman.refine_factor, 1);
  }
  return c;
}

inline ScenarioConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

// Affine scalar coefficients c0 + c_x x + c_y y from an inline model object.
inline Model inline_affine_model(const nlohmann::json& m, const std::string& name) {
  auto coef = [&](const char* k) { return m.at(k).get<std::vector<double>>(); };
  const auto b = coef("drift"), s = coef("diffusion"), f = coef("driver"), h = coef("obs");
  auto affine = [](std::vector<double> c) {
    return [c](double, double x, double y) { return c[0] + c[1] * x + c[2] * y; };
  };
  auto constant = [](double v) { return [v](double, double, double) { return v; }; };
  ScalarCoefficients sc;
  sc.drift = affine(b);
  sc.diffusion = affine(s);
  sc.driver = affine(f);
  sc.driver_dx = constant(f[1]);
  sc.driver_dy = constant(f[2]);
  sc.obs = affine(h);
  sc.obs_dx = constant(h[1]);
  sc.obs_dy = constant(h[2]);
  Model model;
  model.id = name;
  model.coeffs = make_scalar_coefficients(sc, name);
  model.coeffs.bounded = b[1] == 0.0 && b[2] == 0.0 && s[1] == 0.0 && s[2] == 0.0 && f[1] == 0.0 && f[2] == 0.0 &&
                         h[1] == 0.0 && h[2] == 0.0;
  model.init.mean = {m.value("init_mean", 0.0)};
  model.init.stddev = {m.value("init_stddev", 0.0)};
  return model;
}

// Non-degenerate model for the config; the rank-deficient builtin has its own pipeline.
inline Model resolve_model(const ScenarioConfig& c) {
  if (c.inline_model) return inline_affine_model(*c.inline_model, c.model);
  if (c.model == "bounded_nonlinear") return bounded_nonlinear_model();
  if (c.model == "lg_uncorrelated") return lg_model(c.lg, false);
  if (c.model == "lg_correlated") return lg_model(c.lg, true);
  if (c.model == "degenerate_rank1")
    throw ConfigError("model 'degenerate_rank1' runs only under the 'degenerate' subcommand");
  throw ConfigError("unknown model '" + c.model + "'");
}

// Observation scale: Y = k W under the reference measure.
inline double observation_scale(const ScenarioConfig& c) {
  return (c.model == "lg_uncorrelated" || c.model == "lg_correlated") ? c.lg.k : 1.0;
}

inline RoughPath build_driver(const ScenarioConfig& c, std::size_t dim, double scale = 1.0) {
  const TimeGrid grid = c.grid();
  const std::uint64_t seed = derive_seed(c.seed, "observation", 0);
  RoughPath rp;
  switch (c.driver.kind) {
    case LiftKind::ito:
      rp = brownian_ito_lift(grid, dim, c.driver.refine_factor, c.alpha, seed, scale);
      break;
    case LiftKind::geometrified:
      rp = geometrify(brownian_ito_lift(grid, dim, c.driver.refine_factor, c.alpha, seed, scale));
      break;
    case LiftKind::piecewise_linear: {
      auto samples = brownian_path(seed, Stream::observation_noise, 0, grid.steps, dim, grid.dt());
      for (double& v : samples) v *= scale;
      rp = lift_piecewise_linear(grid, dim, samples, c.alpha);
      break;
    }
    case LiftKind::file: {
      const std::string header = c.driver.header.empty()
                                     ? std::filesystem::path(c.driver.file).replace_extension(".json").string()
                                     : c.driver.header;
      rp = io::read_rough_path(c.driver.file, header);
      if (rp.dim() != dim)
        throw ConfigError("driver file has dimension " + std::to_string(rp.dim()) + ", model needs " +
                          std::to_string(dim));
      break;
    }
    default:
      throw ConfigError("unsupported driver kind");
  }
  if (c.driver.area_shift != 0.0) rp = area_shift(rp, c.driver.area_shift);
  return rp;
}

inline std::vector<TestFunction> resolve_phis(const ScenarioConfig& c, std::size_t dim,
                                              std::vector<std::string> fallback) {
  std::vector<TestFunction> out;
  for (const auto& n : c.phis.empty() ? fallback : c.phis) out.push_back(library_function(n, dim));
  return out;
}

enum class RunStatus { pass, fail, inconclusive, error };

inline std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::pass: return "pass";
    case RunStatus::fail: return "fail";
    case RunStatus::inconclusive: return "inconclusive";
    default: return "error";
  }
}

// Exit codes: 0 pass, 1 fail, 2 usage/config, 3 inconclusive.
inline int exit_code(RunStatus s, bool config_error = false) {
  if (config_error) return 2;
  switch (s) {
    case RunStatus::pass: return 0;
    case RunStatus::inconclusive: return 3;
    default: return 1;
  }
}

struct RunReport {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string input_hash;
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<std::string> outputs;
  RunStatus status = RunStatus::error;
  std::string message;
  double wall_time = 0.0;

  nlohmann::json to_json() const {
    return {{"command", command},   {"config", config},
            {"seed", seed},         {"input_hash", input_hash},
            {"metrics", metrics},   {"outputs", outputs},
            {"status", to_string(status)}, {"message", message},
            {"wall_time_s", wall_time}};
  }
};

inline std::string input_hash(const std::string& command, const nlohmann::json& config, std::uint64_t seed) {
  const nlohmann::json key{{"command", command}, {"config", config}, {"seed", seed}};
  return git_blob_hash(key.dump());
}

struct RunOptions {
  std::filesystem::path out = "roughfilter_out";
  std::size_t threads = 1;
};

namespace detail {
inline nlohmann::json comparison_rows(const NodeMoments& mom, const std::vector<TestFunction>& phis,
                                      std::size_t last) {
  nlohmann::json j;
  for (std::size_t f = 0; f < phis.size(); ++f)
    j[phis[f].name] = {{"mu_T", mom.mean(last, f)},
                       {"sigma_T", mom.ratio(last, f)},
                       {"stderr", mom.stderr_of(last, f)}};
  return j;
}

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline RunStatus exponent_status(const ResidualResult& r, double alpha) {
  if (r.inconclusive) return RunStatus::inconclusive;
  return r.exponent >= 3.0 * alpha - 0.2 ? RunStatus::pass : RunStatus::fail;
}
}  // namespace detail

inline void cmd_lift(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  const std::size_t dim = c.model == "degenerate_rank1" ? 1 : resolve_model(c).coeffs.dy;
  const RoughPath rp = build_driver(c, dim, observation_scale(c));
  const ValidationReport v = validate(rp, c.tol);
  io::write_rough_path(rp, o.out / "rough_path.csv", o.out / "rough_path.json");
  const nlohmann::json vj{{"max_chen_residual", v.max_chen_residual},
                          {"max_bracket_residual", v.max_bracket_residual},
                          {"max_bracket_asymmetry", v.max_bracket_asymmetry},
                          {"holder_exponent", v.holder_exponent},
                          {"bracket_slope", v.bracket_slope},
                          {"chen_pass", v.chen_pass},
                          {"bracket_pass", v.bracket_pass},
                          {"symmetry_pass", v.symmetry_pass}};
  io::open_out(o.out / "validation.json") << vj.dump(2) << "\n";
  rep.outputs = {"rough_path.csv", "rough_path.json", "validation.json"};
  rep.metrics = vj;
  rep.status = v.all_pass() ? RunStatus::pass : RunStatus::fail;
}

inline void cmd_filter(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  const Model model = resolve_model(c);
  const RoughPath rp = build_driver(c, model.coeffs.dy, observation_scale(c));
  const auto phis = c.phis.empty() ? test_function_library(model.coeffs.dx) : resolve_phis(c, model.coeffs.dx, {});
  const NodeMoments mom = filter_moments(model, rp, phis, c.M, derive_seed(c.seed, "rough_filter", 0), o.threads);
  write_filter_csv(mom, phis, rp.grid(), 1, o.out / "filter.csv");
  rep.outputs = {"filter.csv"};
  rep.metrics = {{"terminal", detail::comparison_rows(mom, phis, rp.steps())}, {"terminal_mass", mom.mass(rp.steps())}};
  rep.status = RunStatus::pass;
}

inline void cmd_zakai_residual(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  if (!detail::is_power_of_two(c.N)) throw ConfigError("field 'grid.N': the residual ladder needs a power of two");
  const Model model = resolve_model(c);
  const RoughPath rp = build_driver(c, model.coeffs.dy, observation_scale(c));
  const TestFunction phi = resolve_phis(c, model.coeffs.dx, {"gauss_bump"}).front();
  const ResidualResult r = zakai_davie_residual(model, rp, phi, c.ladder(), c.M, derive_seed(c.seed, "rough_filter", 0),
                                                o.threads, c.tol);
  write_residual_csv(r, o.out / "zakai_residual.csv");
  rep.outputs = {"zakai_residual.csv"};
  rep.metrics = residual_summary(r);
  rep.metrics["phi"] = phi.name;
  rep.metrics["threshold"] = 3.0 * c.alpha - 0.2;
  rep.status = detail::exponent_status(r, c.alpha);
}

inline void cmd_ks_residual(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  if (!detail::is_power_of_two(c.N)) throw ConfigError("field 'grid.N': the residual ladder needs a power of two");
  const Model model = resolve_model(c);
  const RoughPath rp = build_driver(c, model.coeffs.dy, observation_scale(c));
  const TestFunction phi = resolve_phis(c, model.coeffs.dx, {"gauss_bump"}).front();
  const KSMoments mom = ks_moments(model, rp, phi, c.M, derive_seed(c.seed, "rough_filter", 0),
                                   test_function_library(model.coeffs.dx), o.threads);
  const ResidualResult r = ks_davie_residual(mom, rp, c.ladder(), c.tol);
  const TotalMassReport tm = total_mass_rde(mom, rp, c.tol);
  write_residual_csv(r, o.out / "ks_residual.csv");
  rep.outputs = {"ks_residual.csv"};
  rep.metrics = residual_summary(r);
  rep.metrics["phi"] = phi.name;
  rep.metrics["total_mass"] = {{"max_mass_gap", tm.max_mass_gap},
                               {"max_mass", tm.max_mass},
                               {"max_reconstruction_gap", tm.max_reconstruction_gap},
                               {"max_abs_mu", tm.max_abs_mu},
                               {"pass", tm.pass(c.tol)}};
  rep.status = !tm.pass(c.tol) ? RunStatus::fail : detail::exponent_status(r, c.alpha);
}

inline void cmd_duality(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  const Model model = resolve_model(c);
  const RoughPath rp = build_driver(c, model.coeffs.dy, observation_scale(c));
  if (c.N % c.duality.checkpoint_every != 0)
    throw ConfigError("field 'duality.checkpoint_every': must divide grid.N");
  const auto phis = resolve_phis(c, model.coeffs.dx, {"gauss_bump", "tanh", "rational"});
  const OperatorContext ctx(model.coeffs, rp);
  const SpatialGrid box =
      auto_box(model, rp, c.duality.K, c.duality.pilot, derive_seed(c.seed, "box_pilot", 0), o.threads, c.tol);
  const auto us = solve_backward_fk(ctx, phis, box, checkpoint_nodes(c.N, c.duality.checkpoint_every), c.M_inner,
                                    derive_seed(c.seed, "backward_inner", 0), o.threads);
  for (std::size_t f = 0; f < us.size(); ++f) {
    write_grid_function_csv(us[f], o.out / ("backward_" + phis[f].name + ".csv"));
    rep.outputs.push_back("backward_" + phis[f].name + ".csv");
  }
  const auto reports = duality_check(model, rp, us, phis, c.M, derive_seed(c.seed, "duality_outer", 0), o.threads, c.tol);
  const nlohmann::json dj = duality_json(reports);
  io::open_out(o.out / "duality.json") << dj.dump(2) << "\n";
  rep.outputs.push_back("duality.json");
  bool pass = true;
  for (const auto& r : reports) pass = pass && r.pass;
  bool warn = false;
  for (const auto& u : us) warn = warn || u.box_warning(c.tol);
  rep.metrics = {{"duality", dj}, {"box_lo", box.lo}, {"box_hi", box.hi}, {"inner_box_warning", warn}};
  rep.status = pass ? RunStatus::pass : RunStatus::fail;
}

inline void cmd_robustness(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  const Model model = resolve_model(c);
  const RoughPath rp = build_driver(c, model.coeffs.dy, observation_scale(c));
  const TestFunction phi = resolve_phis(c, model.coeffs.dx, {"gauss_bump"}).front();
  PerturbationSpec spec;
  spec.area_shifts = c.robustness.area_shifts;
  spec.ito_vs_geometrified = c.robustness.ito_vs_geometrified;
  spec.smoothing_window = c.robustness.smoothing_window;
  const RobustnessTable t = robustness_probe(model, rp, spec, phi, c.M, derive_seed(c.seed, "rough_filter", 0), o.threads);
  const RobustnessVerdict v = assess_robustness(t, 5.0, c.tol.noise_multiple);
  write_robustness_csv(t, o.out / "robustness.csv");
  rep.outputs = {"robustness.csv"};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"id", r.id}, {"rho", r.rho}, {"diff", r.diff}, {"stderr", r.diff_stderr}, {"ratio", r.ratio}});
  rep.metrics = {{"phi", phi.name},
                 {"base_value", t.base_value},
                 {"rows", rows},
                 {"ratio_spread", v.ratio_spread},
                 {"ratios_bounded", v.ratios_bounded},
                 {"monotone", v.monotone},
                 {"lift_significance", v.lift_significance},
                 {"lift_detected", v.lift_detected}};
  rep.status = v.pass() ? RunStatus::pass : RunStatus::fail;
}

inline void cmd_randomize(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  const Model model = resolve_model(c);
  const ClassicalScenario scn = (c.model == "lg_uncorrelated" || c.model == "lg_correlated")
                                    ? lg_scenario(c.lg, c.model == "lg_correlated")
                                    : scalar_scenario(model, 1.0);
  const auto phis = c.phis.empty() ? test_function_library(model.coeffs.dx) : resolve_phis(c, model.coeffs.dx, {});
  const std::size_t Mc = c.randomize.classical_particles ? c.randomize.classical_particles : c.M;
  const RandomizationReport r = randomization_harness(scn, c.grid(), c.randomize.refine_factor, c.M, Mc, c.seed, phis,
                                                      c.alpha, o.threads, c.tol);
  const nlohmann::json cj = comparison_json(r.series);
  io::open_out(o.out / "comparison.json") << cj.dump(2) << "\n";
  rep.outputs = {"comparison.json"};
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : r.series)
    summary.push_back({{"phi", s.phi}, {"normalized", s.normalized}, {"pass", s.pass}, {"max_excess", s.max_excess}});
  rep.metrics = {{"series", summary}, {"refine_factor", r.refine}, {"M_rough", r.M_rough}, {"M_classical", r.M_classical}};
  rep.status = r.pass ? RunStatus::pass : RunStatus::fail;
}

inline void cmd_kalman_compare(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  if (c.model != "lg_uncorrelated")
    throw ConfigError("kalman_compare needs model 'lg_uncorrelated' (the Kalman-Bucy oracle assumes f = 0)");
  const KalmanComparison k = kalman_compare(c.lg, c.grid(), c.kalman.refine_factor, c.M, c.kalman.checkpoints, c.seed,
                                            c.alpha, o.threads, c.tol);
  // Riccati steady state from P0 over a long horizon
  const TimeGrid long_grid(10.0, 10000);
  const KalmanPath ric = kalman_bucy(c.lg, std::vector<double>(long_grid.nodes(), 0.0), long_grid);
  const double gap = std::abs(ric.variance.back() - k.steady_state);
  const nlohmann::json cj = comparison_json(k.series);
  io::open_out(o.out / "comparison.json") << cj.dump(2) << "\n";
  rep.outputs = {"comparison.json"};
  rep.metrics = {{"steady_state", k.steady_state},
                 {"riccati_at_10", ric.variance.back()},
                 {"steady_state_gap", gap},
                 {"max_excess", k.series.front().max_excess},
                 {"checkpoints_pass", k.pass}};
  rep.status = k.pass && gap <= 1e-4 ? RunStatus::pass : RunStatus::fail;
}

inline void cmd_degenerate(const ScenarioConfig& c, const RunOptions& o, RunReport& rep) {
  if (c.model != "degenerate_rank1") throw ConfigError("the degenerate subcommand needs model 'degenerate_rank1'");
  if (c.driver.kind != LiftKind::ito) throw ConfigError("field 'driver.kind': the hat lift is an Ito lift");
  const DegenerateScenario s = degenerate_rank1();
  const TimeGrid grid = c.grid();
  const TimeGrid fine(grid.horizon, grid.steps * c.driver.refine_factor);
  const ObservationSample obs = simulate_observation(s, fine, derive_seed(c.seed, "observation", 0));
  const HatRoughPath hat = build_hat_lift(s, obs, grid, c.driver.refine_factor, c.alpha);
  const auto phis = c.phis.empty() ? test_function_library(s.dx) : resolve_phis(c, s.dx, {});
  const DegenerateFilterResult r = degenerate_filter(s, hat, phis, c.M, derive_seed(c.seed, "rough_filter", 0), o.threads);
  write_filter_csv(r.moments, phis, grid, 1, o.out / "filter.csv");
  io::write_rough_path_csv(hat.path, o.out / "hat_path.csv");
  nlohmann::json header = io::rough_path_header(hat.path);
  header["d_Y"] = s.dy;
  header["d_W"] = s.dw;
  header["d_hat"] = s.hat_dim();
  io::open_out(o.out / "hat_path.json") << header.dump(2) << "\n";
  rep.outputs = {"filter.csv", "hat_path.csv", "hat_path.json"};
  rep.metrics = {{"terminal", detail::comparison_rows(r.moments, phis, grid.steps)},
                 {"max_penrose_residual", r.max_penrose},
                 {"rank_min", r.min_rank},
                 {"rank_max", r.max_rank}};
  rep.status = r.max_penrose <= c.tol.penrose_identity ? RunStatus::pass : RunStatus::fail;
}

// Runs one subcommand and always returns a report; errors become status error with a message.
// `config_error` is set when the failure is a usage or configuration problem.
inline RunReport run_command(const std::string& command, const ScenarioConfig& c, const RunOptions& o,
                             bool* config_error = nullptr) {
  using Fn = void (*)(const ScenarioConfig&, const RunOptions&, RunReport&);
  static const std::map<std::string, Fn> table{
      {"lift", cmd_lift},         {"filter", cmd_filter},         {"zakai_residual", cmd_zakai_residual},
      {"ks_residual", cmd_ks_residual}, {"duality", cmd_duality}, {"robustness", cmd_robustness},
      {"randomize", cmd_randomize}, {"kalman_compare", cmd_kalman_compare}, {"degenerate", cmd_degenerate}};
  RunReport rep;
  rep.command = command;
  rep.config = c.raw;
  rep.seed = c.seed;
  rep.input_hash = input_hash(command, c.raw, c.seed);
  if (config_error) *config_error = false;
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto it = table.find(command);
    if (it == table.end()) throw ConfigError("unknown subcommand '" + command + "'");
    it->second(c, o, rep);
  } catch (const ConfigError& e) {
    rep.status = RunStatus::error;
    rep.message = command + ": " + e.what();
    if (config_error) *config_error = true;
  } catch (const InputError& e) {
    rep.status = RunStatus::error;
    rep.message = command + ": " + e.what();
    if (config_error) *config_error = true;
  } catch (const CapabilityError& e) {
    rep.status = RunStatus::error;
    rep.message = command + ": " + e.what();
    if (config_error) *config_error = true;
  } catch (const std::exception& e) {
    rep.status = RunStatus::fail;
    rep.message = command + ": " + e.what();
  }
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline void write_report(const RunReport& rep, const std::filesystem::path& out) {
  io::open_out(out / (rep.command + "_report.json")) << rep.to_json().dump(2) << "\n";
}

}  // namespace roughfilter
