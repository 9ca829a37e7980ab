// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

// forgetlab command line: run, analyze, intervene, report, sweep.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "forgetlab/forgetlab.h"

namespace {

int finish(fl_status status, const char* command) {
  if (status == FL_OK) return 0;
  std::cerr << "forgetlab " << command << ": " << fl_status_name(status) << ": " << fl_last_error() << "\n";
  // Schema and usage problems exit 2, everything else 1.
  return status == FL_ERR_SCHEMA ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"forgetlab: sequential fine-tuning forgetting experiments"};
  app.set_version_flag("--version", fl_version());
  app.require_subcommand(1);

  std::int64_t seed_offset = 0;
  std::size_t jobs = 1;

  std::string config_path;
  auto* run = app.add_subcommand("run", "train every seed of a config");
  run->add_option("config", config_path, "experiment config JSON")->required();
  run->add_option("--seed-offset", seed_offset, "added to every configured seed");
  run->add_option("--jobs", jobs, "seeds trained concurrently")->check(CLI::PositiveNumber);

  std::string dir;
  std::string metrics = "all";
  std::size_t spectrum_k = 0, spectrum_m = 0, spectrum_probes = 0;
  auto* analyze = app.add_subcommand("analyze", "compute metrics over saved checkpoints");
  analyze->add_option("dir", dir, "experiment directory")->required();
  analyze->add_option("--metrics", metrics, "comma-separated metric selectors");
  analyze->add_option("--spectrum-k", spectrum_k, "eigenvalues per spectrum");
  analyze->add_option("--spectrum-m", spectrum_m, "Lanczos iterations");
  analyze->add_option("--spectrum-probes", spectrum_probes, "random probes");
  analyze->add_option("--jobs", jobs, "runs analyzed concurrently")->check(CLI::PositiveNumber);

  std::string kind = "both";
  double fraction = 0.2;
  std::int64_t layer = -1;
  std::size_t task = 0;
  auto* intervene = app.add_subcommand("intervene", "ablate heads and/or realign representations");
  intervene->add_option("dir", dir, "experiment directory")->required();
  intervene->add_option("--kind", kind, "ablate, realign or both")
      ->check(CLI::IsMember({"ablate", "realign", "both"}));
  intervene->add_option("--fraction", fraction, "share of heads ablated")->check(CLI::Range(0.0, 1.0));
  intervene->add_option("--layer", layer, "realignment layer (default n_layers / 2)");
  intervene->add_option("--task", task, "forgotten task index");

  auto* report = app.add_subcommand("report", "emit figure series and summary statistics");
  report->add_option("dir", dir, "experiment directory")->required();

  std::string spec_path;
  std::vector<std::string> from;
  std::string out_dir;
  auto* sweep = app.add_subcommand("sweep", "seed/alpha sweep with headline correlations");
  sweep->add_option("spec", spec_path, "sweep JSON");
  sweep->add_option("--from", from, "aggregate completed experiment directories instead");
  sweep->add_option("--out", out_dir, "sweep output directory");
  sweep->add_option("--jobs", jobs, "runs trained concurrently")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) {
    const int rc = finish(fl_run(config_path.c_str(), seed_offset, jobs), "run");
    if (rc == 0) std::cout << fl_last_output() << "\n";
    return rc;
  }
  if (*analyze)
    return finish(fl_analyze(dir.c_str(), metrics.c_str(), spectrum_k, spectrum_m, spectrum_probes, jobs), "analyze");
  if (*intervene) {
    const int rc = finish(fl_intervene(dir.c_str(), kind.c_str(), fraction, layer, task), "intervene");
    if (rc == 0) std::cout << fl_last_output() << "\n";
    return rc;
  }
  if (*report) return finish(fl_report(dir.c_str()), "report");
  if (*sweep) {
    if (spec_path.empty() == from.empty()) {
      std::cerr << "forgetlab sweep: give a sweep spec or --from directories\n";
      return 2;
    }
    std::vector<const char*> dirs;
    for (const auto& d : from) dirs.push_back(d.c_str());
    const int rc = finish(fl_sweep(spec_path.empty() ? nullptr : spec_path.c_str(), dirs.data(), dirs.size(),
                                   out_dir.empty() ? nullptr : out_dir.c_str(), jobs),
                          "sweep");
    if (rc != 0) return rc;
    const auto summary = nlohmann::json::parse(fl_last_output());
    for (const auto& w : summary["warnings"]) std::cerr << "warning: " << w.get<std::string>() << "\n";
    std::cout << fl_last_output() << "\n";
    return 0;
  }
  return 2;
}
