// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forgetlab/batch.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/tensor.hpp"

namespace forgetlab {

enum class SimilarityCategory { high, medium, low };

const char* to_string(SimilarityCategory c) noexcept;
/// Throws ErrorCode::config for unknown names.
SimilarityCategory category_from_string(const std::string& name);
/// Default alpha used for a category (0.9, 0.5, 0.0).
double default_alpha(SimilarityCategory c) noexcept;
bool alpha_in_band(SimilarityCategory c, double alpha) noexcept;

enum class Split { train = 0, val = 1, test = 2 };
const char* to_string(Split s) noexcept;

/// Paths of a task backed by JSONL files instead of a synthetic teacher.
struct ExternalSplits {
  std::filesystem::path train;
  std::filesystem::path val;
  std::filesystem::path test;
};

/// One classification task. Synthetic tasks carry their materialized
/// teacher: labels are argmax_c (teacher * phi(x) - offset)_c where phi is
/// the mean of a frozen random embedding of the tokens.
struct TaskSpec {
  std::string task_id;
  std::uint64_t teacher_seed = 0;
  std::uint64_t data_seed = 0;
  double alpha = 0.0;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::size_t seq_len = 16;
  std::size_t n_classes = 4;
  std::size_t vocab_size = 64;

  Tensor teacher;                     // [n_classes, feature_dim], unit Frobenius norm
  std::vector<double> class_offset;   // [n_classes]
  Tensor feature_map;                 // [vocab_size, feature_dim], shared per sequence
  std::vector<double> token_probs;    // [vocab_size]
  std::optional<ExternalSplits> external;

  std::size_t split_size(Split s) const noexcept;
};

struct SequenceParams {
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;
  std::size_t n_classes = 4;
  std::size_t feature_dim = 16;
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  /// Scale of the per-task token log-probability perturbation.
  double token_sharpness = 1.0;
  /// Overrides the category default; must lie in the category band.
  std::optional<double> alpha;
};

struct TaskSequence {
  std::vector<TaskSpec> tasks;
  SimilarityCategory category = SimilarityCategory::low;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return tasks.size(); }
};

/// Teachers theta_t = sin(alpha*pi/2) * anchor + cos(alpha*pi/2) * orth_t
/// (spherical interpolation between unit vectors); orth_t is
/// Gram-Schmidt-orthogonalized against the anchor and all earlier tasks.
TaskSequence make_sequence(SimilarityCategory category, std::size_t n_tasks, const SequenceParams& base,
                           Rng& rng);

/// Deterministic per (task, split). A sequence belongs to a split only if
/// its hash residue matches, so splits are disjoint by construction. Class
/// counts are balanced exactly (remainder to the lowest classes).
Batch generate_split(const TaskSpec& task, Split split);

/// Label a token row with the task teacher.
std::int32_t teacher_label(const TaskSpec& task, std::span<const std::int32_t> tokens);

struct Dataset {
  Batch batch;
  std::vector<std::string> warnings;
};

/// Lines of {"tokens": [ints], "label": int}. Errors cite the 1-based line.
Dataset load_jsonl(const std::filesystem::path& path, std::size_t vocab_size, std::size_t n_classes);

/// Cosine similarity of unigram token-count vectors.
double data_similarity(const Batch& a, const Batch& b);

/// Cosine between two teachers' flattened parameters.
double teacher_cosine(const TaskSpec& a, const TaskSpec& b);

}  // namespace forgetlab
