// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "forgetlab/model.hpp"
#include "forgetlab/tasks.hpp"
#include "forgetlab/trainer.hpp"

namespace forgetlab {

/// Sampling sizes used by analyze / intervene.
struct MetricsConfig {
  std::size_t probe_examples = 256;
  std::size_t cka_samples = 512;
  std::size_t realign_samples = 1024;
  std::size_t spectrum_k = 20;
  std::size_t spectrum_m = 60;
  std::size_t spectrum_probes = 4;
  std::size_t spectrum_batch = 256;
  std::size_t linearity_points = 20;
  std::size_t pc_k = 5;
};

struct SequenceConfig {
  SimilarityCategory category = SimilarityCategory::low;
  std::size_t n_tasks = 2;
  SequenceParams params;
  std::vector<ExternalSplits> external;  // one per task when set
};

struct ExperimentConfig {
  ModelConfig model;
  SequenceConfig sequence;
  TrainConfig train;
  MetricsConfig metrics;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output_dir;

  void validate() const;
  /// FNV-1a of the canonical JSON without output_dir.
  std::uint64_t hash() const;
};

/// Strict parse: unknown keys and type errors raise ErrorCode::schema with
/// the dotted field path; semantic violations raise ErrorCode::schema too.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_from_json(const nlohmann::json& j, const std::string& path = "model");

/// Sequence of one run: synthetic from Rng(seed, 1) or external JSONL tasks.
TaskSequence build_sequence(const ExperimentConfig& config, std::uint64_t seed);
ParameterSet build_init(const ExperimentConfig& config, std::uint64_t seed);

std::string hex64(std::uint64_t v);

}  // namespace forgetlab
