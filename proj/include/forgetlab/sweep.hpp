// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "forgetlab/config.hpp"
#include "forgetlab/metrics.hpp"

namespace forgetlab {

/// One (seed, sequence) point of a sweep.
struct SweepRow {
  std::string run_id;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  std::string category;
  double first_epoch_cosine = 0.0;
  double final_forgetting = 0.0;
  double data_similarity = 0.0;  // mean over consecutive task pairs
  double teacher_cosine = 0.0;   // NaN for external tasks

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepStat {
  std::string name;
  std::string x;
  std::string y;
  bool computable = false;
  std::string reason;
  StatResult raw;       // bonferroni_m = 1
  StatResult adjusted;  // bonferroni_m = number of correlations
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<SweepStat> stats;
  std::vector<std::string> warnings;
};

/// Similarity-vs-forgetting and early-warning correlations over the rows.
/// Correlations with fewer than 3 finite points are marked not computable.
SweepResult aggregate(std::vector<SweepRow> rows);

SweepRow sweep_row(const ExperimentRecord& record, std::span<const TaskData> tasks, std::uint64_t seed,
                   const std::string& category);

/// Runs every (config, seed) in memory; `jobs` runs at a time.
SweepResult sweep(const std::vector<ExperimentConfig>& configs, std::size_t jobs = 1);

/// Rows from completed experiment directories (metrics.csv + record.json).
std::vector<SweepRow> load_sweep_rows(const std::filesystem::path& experiment_dir);

/// {"experiment": <config>, "alphas": [...], "output_dir": ...}; one config
/// per alpha with the category derived from the alpha band.
struct SweepSpec {
  std::vector<ExperimentConfig> configs;
  std::filesystem::path output_dir;
};
SweepSpec parse_sweep_spec(const nlohmann::json& j);
SweepSpec load_sweep_spec(const std::filesystem::path& path);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);
nlohmann::json summary_json(const SweepResult& result);

/// Writes sweep.csv and sweep_summary.json.
void write_sweep(const std::filesystem::path& dir, const SweepResult& result);

}  // namespace forgetlab
