#include <CLI11.hpp>

#include <iostream>
#include <thread>

#include "percohom/experiment.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitConvergence = 3;

int run(int argc, char** argv) {
  CLI::App app{"Random walk on a percolation cluster: corrector, effective diffusivity and invariance-principle checks"};
  app.set_version_flag("--version", percohom::kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  std::string out_dir;
  unsigned threads = 1;
  app.add_option("--config", config_path, "Experiment config (sectioned key = value)")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory (overrides [output] dir)");
  app.add_option("--threads", threads, "Worker threads for Monte-Carlo stages")->check(CLI::Range(1u, 1024u));

  struct Command {
    const char* name;
    const char* help;
    percohom::StageSelection stages;
  };
  const Command commands[] = {
      {"sample", "Sample the bond configuration and write bonds.perc", {true, false, false, false}},
      {"solve", "Solve the cell problems and write the corrector and gradient fields", {false, true, false, false}},
      {"walk", "Simulate the walk ensemble and write endpoints.csv", {false, false, true, false}},
      {"estimate", "Compute every estimator and write report.json with CSV mirrors", {false, false, false, true}},
      {"all", "Run sample, solve, walk and estimate", {true, true, true, true}},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help);
  auto* report = app.add_subcommand("report", "Print the summary table of a finished run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (report->parsed()) {
      std::filesystem::path dir = out_dir;
      if (dir.empty()) {
        percohom::require(!config_path.empty(), "report needs --out or --config to locate the run");
        dir = percohom::load_config(config_path).out_dir;
      }
      std::cout << percohom::report_summary(percohom::load_manifest(dir));
      return 0;
    }

    percohom::require(!config_path.empty(), "--config is required");
    auto cfg = percohom::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    for (const auto& c : commands)
      if (app.got_subcommand(c.name)) cfg.stages = c.stages;

    percohom::RunOptions opts;
    opts.threads = threads;
    opts.on_warning = [](const std::string& w) { std::cerr << "warning: " << w << "\n"; };
    const auto manifest = percohom::run_pipeline(cfg, opts);
    for (const auto& a : manifest.artifacts) std::cout << a.fnv1a64 << "  " << a.path << "\n";
    if (cfg.stages.estimate) std::cout << "\n" << percohom::report_summary(manifest);
    return 0;
  } catch (const percohom::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const percohom::ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConvergence;
  }
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
