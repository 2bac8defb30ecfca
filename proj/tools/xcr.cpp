// xcr command-line driver. Exit codes: 0 ok, 1 invalid input/config, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "xcr/xcr.hpp"

namespace {

constexpr int kOk = 0, kInvalid = 1, kFailed = 2;

xcr::ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = xcr::read_file(path);
  } catch (const xcr::IoError& e) {
    throw xcr::ConfigError(e.what());
  }
  return xcr::parse_config(text);
}

std::vector<std::string> read_run_list(const std::string& path) {
  std::vector<std::string> out;
  std::istringstream is(xcr::read_file(path));
  for (std::string line; std::getline(is, line);) {
    line = xcr::detail::trim(line);
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees the same large blocks every batch; keep them
  // on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Patch-explainer training, counterfactual retraining and calibration experiments"};
  app.require_subcommand(1);

  std::string config, out;
  std::vector<std::string> params, runs;

  struct StageCmd {
    const char* name;
    const char* help;
    std::vector<xcr::Stage> stages;
  };
  const std::vector<StageCmd> stage_cmds{
      {"train-explainer", "train selector and approximator per seed", {xcr::Stage::TrainExplainer}},
      {"vanilla", "train the black box on original inputs only", {xcr::Stage::Vanilla}},
      {"retrain", "retrain the black box with counterfactual explanations (needs train-explainer)", {xcr::Stage::Retrain}},
      {"corrupt", "write the corrupted test sets", {xcr::Stage::Corrupt}},
      {"evaluate", "evaluate vanilla/xcr checkpoints and write metrics.csv", {xcr::Stage::Evaluate}},
      {"run", "all training stages followed by evaluate",
       {xcr::Stage::TrainExplainer, xcr::Stage::Vanilla, xcr::Stage::Retrain, xcr::Stage::Evaluate}},
  };
  std::vector<CLI::App*> stage_apps;
  for (const auto& c : stage_cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config, "config file (key = value lines)")->required();
    sub->add_option("--out", out, "run directory")->required();
    stage_apps.push_back(sub);
  }
  auto* grid = app.add_subcommand("grid", "one full run per combination of --param values");
  grid->add_option("--config", config, "base config file")->required();
  grid->add_option("--out", out, "directory for the sub-runs and their report")->required();
  grid->add_option("--param", params, "key=v1,v2,... (repeatable)")->required();

  auto* report = app.add_subcommand("report", "seed-averaged tables and curves from run directories");
  report->add_option("--config", config, "file listing run directories, one per line");
  report->add_option("--out", out, "report directory")->required();
  report->add_option("runs", runs, "run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    for (std::size_t i = 0; i < stage_apps.size(); ++i)
      if (stage_apps[i]->parsed()) {
        xcr::run_stages(load_config(config), out, stage_cmds[i].stages);
        return kOk;
      }
    if (grid->parsed()) {
      std::string text;
      try {
        text = xcr::read_file(config);
      } catch (const xcr::IoError& e) {
        throw xcr::ConfigError(e.what());
      }
      auto dirs = xcr::run_grid(text, params, out);
      auto res = xcr::emit_report({dirs.begin(), dirs.end()}, std::filesystem::path(out) / "report");
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      return kOk;
    }
    if (report->parsed()) {
      if (!config.empty())
        for (auto& r : read_run_list(config)) runs.push_back(r);
      if (runs.empty()) throw xcr::ConfigError("report: no run directories given");
      auto res = xcr::emit_report({runs.begin(), runs.end()}, out);
      for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
      for (const auto& f : res.files) std::cout << f.string() << "\n";
      return kOk;
    }
  } catch (const xcr::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kInvalid;
}
