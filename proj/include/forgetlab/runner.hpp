// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "forgetlab/config.hpp"

namespace forgetlab {

/// One row of metrics.csv. NaN values are written as NA.
struct MetricRecord {
  std::string run_id;
  int stage_task = -1;
  std::size_t stage_step = 0;
  std::string metric;  // registry name, optionally suffixed "@t<task>"
  std::optional<std::size_t> layer;
  std::optional<std::size_t> head;  // also the index of vector-valued metrics
  double value = 0.0;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

/// Every metric name a MetricRecord may carry.
const std::vector<std::string>& record_registry();
/// Selectors accepted by analyze.
const std::vector<std::string>& analyze_registry();
std::string metric_base(const std::string& metric);

std::string format_value(double v);
std::string metrics_csv(const std::vector<MetricRecord>& rows);
std::vector<MetricRecord> parse_metrics_csv(const std::string& text);
std::vector<MetricRecord> read_metrics(const std::filesystem::path& experiment_dir);

struct RunCommandOptions {
  std::int64_t seed_offset = 0;
  std::size_t jobs = 1;
};

/// Output directory with FORGETLAB_OUT applied.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config);

std::filesystem::path cmd_run(const std::filesystem::path& config_path, const RunCommandOptions& options = {});
std::filesystem::path cmd_run(const ExperimentConfig& config, const RunCommandOptions& options = {});

struct AnalyzeOptions {
  std::vector<std::string> metrics{"all"};
  std::optional<std::size_t> spectrum_k;
  std::optional<std::size_t> spectrum_m;
  std::optional<std::size_t> spectrum_probes;
  std::size_t jobs = 1;
};

/// Appends (replacing earlier rows of the same metrics) to metrics.csv.
void cmd_analyze(const std::filesystem::path& experiment_dir, const AnalyzeOptions& options);

enum class InterventionKind { ablate, realign, both };
InterventionKind intervention_from_string(const std::string& name);
const char* to_string(InterventionKind k) noexcept;

struct InterveneOptions {
  InterventionKind kind = InterventionKind::both;
  double fraction = 0.2;
  std::optional<std::size_t> layer;  // default n_layers / 2
  std::size_t task = 0;
};

/// Writes intervention_<kind>.json and returns its content.
nlohmann::json cmd_intervene(const std::filesystem::path& experiment_dir, const InterveneOptions& options);

/// Writes report/*.csv and report/summary.json.
void cmd_report(const std::filesystem::path& experiment_dir);

/// Small fixed-size worker pool over [0, n); exceptions are rethrown in index order.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace forgetlab
