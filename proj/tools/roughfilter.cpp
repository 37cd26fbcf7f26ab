#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "roughfilter/roughfilter.hpp"

namespace fs = std::filesystem;
using namespace roughfilter;

namespace {

fs::path output_dir(const std::optional<std::string>& flag, const std::string& from_config) {
  if (flag) return *flag;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv("ROUGHFILTER_OUT"); env && *env) return env;
  return "roughfilter_out";
}

// Writes the report and maps its status to an exit code; reports a write failure on stderr.
int finish(const RunReport& rep, const fs::path& out, bool config_error) {
  try {
    write_report(rep, out);
  } catch (const std::exception& e) {
    std::cerr << "roughfilter: cannot write report: " << e.what() << "\n";
  }
  if (!rep.message.empty()) std::cerr << "roughfilter: " << rep.message << "\n";
  std::cout << rep.command << ": " << to_string(rep.status) << " (" << (out / (rep.command + "_report.json")).string()
            << ")\n";
  return exit_code(rep.status, config_error);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rough-path particle filtering experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;

  for (const auto& name : subcommands()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " pipeline");
    sub->add_option("--config", config_path, "scenario JSON")->required();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--threads", threads, "worker cap")->check(CLI::PositiveNumber);
    sub->add_option("--out", out, "output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  ScenarioConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const std::exception& e) {
    RunReport rep;
    rep.command = command;
    rep.config = nullptr;
    rep.status = RunStatus::error;
    rep.message = command + ": " + e.what();
    return finish(rep, output_dir(out, ""), true);
  }
  if (seed) cfg.seed = *seed;

  RunOptions opts;
  opts.out = output_dir(out, cfg.output);
  opts.threads = threads ? *threads : (cfg.threads ? *cfg.threads : 1);
  std::error_code ec;
  fs::create_directories(opts.out, ec);
  if (ec) {
    std::cerr << "roughfilter: cannot create output directory " << opts.out << ": " << ec.message() << "\n";
    return 2;
  }

  bool config_error = false;
  const RunReport rep = run_command(command, cfg, opts, &config_error);
  return finish(rep, opts.out, config_error);
}
