// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/model.hpp"
#include "forgetlab/spectrum.hpp"
#include "forgetlab/tasks.hpp"
#include "forgetlab/trainer.hpp"

namespace forgetlab {

// Behavioral.

double accuracy(const Checkpoint& checkpoint, const ModelConfig& config, const TaskSpec& task, Split split);

struct StageValue {
  std::size_t stage = 0;
  double value = 0.0;
};

/// post - acc(stage) for every stage from the task's own onwards; not clamped.
std::vector<StageValue> forgetting_magnitude(const ExperimentRecord& record, std::size_t task_index);

// Attention.

struct HeadDistances {
  std::vector<double> distance;  // [layer * n_heads + head]
  std::vector<bool> disrupted;
  double mean = 0.0;
  double stddev = 0.0;  // population, over all heads of the model
};

/// q/k/v use the head's output columns, o the head's input rows (x * W layout).
HeadDistances head_weight_distances(const ParameterSet& a, const ParameterSet& b, const ModelConfig& config);

/// Mean over batch and query positions of the entropy (bits) of each
/// head's visible distribution; [n_layers, n_heads].
Tensor attention_entropy(const ActivationTrace& trace);
/// Entropy in bits of one distribution.
double row_entropy_bits(std::span<const double> row);

/// Vocabulary quartile of each token (token * 4 / vocab).
std::vector<int> vocab_quartiles(std::span<const std::int32_t> tokens, std::size_t vocab_size);

/// Normalized plug-in mutual information between discrete classes and the
/// quantile bin of a mass value; 0 if either marginal entropy is 0.
double specialization_from_samples(std::span<const int> classes, std::span<const double> mass,
                                   std::size_t n_bins = 4);

/// Per head: samples are (example, key position) with mass = mean attention
/// received from visible queries; [n_layers, n_heads].
Tensor specialization_index(const ActivationTrace& trace, std::span<const int> token_classes,
                            std::size_t n_bins = 4);

/// Pearson correlation of two maps; NaN when either has zero variance.
double map_correlation(std::span<const double> a, std::span<const double> b);

/// Batch-mean attention map of one head over causal cells (i >= j).
std::vector<double> mean_attention_map(const ActivationTrace& trace, std::size_t layer, std::size_t head);

/// Per head correlation of mean causal maps; NaN entries are missing values.
Tensor attention_pattern_correlation(const ActivationTrace& a, const ActivationTrace& b);

struct HeadStats {
  HeadId head;
  double weight_distance = 0.0;
  double entropy_pre = 0.0;
  double entropy_post = 0.0;
  double specialization_pre = 0.0;
  double specialization_post = 0.0;
  double pattern_correlation = 0.0;
  bool disrupted = false;
};

struct AttentionStats {
  std::vector<HeadStats> heads;
};

AttentionStats attention_stats(const ParameterSet& pre, const ParameterSet& post, const ModelConfig& config,
                               const Batch& probe);

// Representation geometry.

/// Linear CKA of [n, d] activation matrices (feature-space form).
double cka(const Tensor& a, const Tensor& b);

/// Task-similarity proxy from activations on two tasks' inputs. Rows do not
/// correspond across tasks, so this aligns the feature covariances:
/// tr(Ca Cb) / (|Ca|_F |Cb|_F), in [0, 1]. Sample counts may differ.
double representation_overlap(const Tensor& a, const Tensor& b);

enum class LayerBand { lower, intermediate, upper };
const char* to_string(LayerBand b) noexcept;
LayerBand layer_band(std::size_t layer, std::size_t n_layers) noexcept;

struct CKAReport {
  std::vector<double> cka;
  std::vector<LayerBand> bands;
  std::size_t n_samples = 0;
};

CKAReport cka_report(const EvalContext& a, const EvalContext& b, const Batch& probe);

/// Angles (degrees) between corresponding top-k principal directions.
std::vector<double> pc_rotation(const Tensor& a, const Tensor& b, std::size_t k);

struct TaskRelevance {
  std::vector<double> score;  // per ffn neuron
  std::vector<bool> top;      // top ceil(d/4), ties to the lower index
};

/// Mean over examples of sum over positions of |dL/da| for each ffn
/// intermediate neuron of the layer; L is the mean batch loss.
TaskRelevance task_relevance(const ParameterSet& params, const ModelConfig& config, const Batch& val,
                             std::size_t layer);

// Gradients.

double gradient_cosine(std::span<const double> a, std::span<const double> b);
/// One cosine per segment; NaN for segments where either side is zero.
std::vector<double> gradient_cosine_per_segment(const GradientSnapshot& a, const GradientSnapshot& b);
/// Share of defined segment cosines below zero.
double conflict_fraction(std::span<const double> segment_cosines);
constexpr double kInterferenceThreshold = -0.3;
inline bool is_interference(double cosine) noexcept { return cosine < kInterferenceThreshold; }

// Statistics.

struct StatResult {
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  double bonferroni_m = 1.0;
};

StatResult pearson(std::span<const double> xs, std::span<const double> ys, double bonferroni_m = 1.0);

struct RunPoint {
  double first_epoch_cosine = 0.0;
  double final_forgetting = 0.0;
};

/// Mean first-epoch cosine over tasks after the first, and mean forgetting
/// of every earlier task at the final stage.
RunPoint summarize_run(const ExperimentRecord& record);
StatResult early_warning(std::span<const ExperimentRecord> runs);
StatResult early_warning(std::span<const RunPoint> points);

// Landscape.

struct LinearityReport {
  std::vector<double> t;
  std::vector<double> loss;
  double r2_linear = 1.0;
  double r2_quadratic = 1.0;
  double index = 1.0;
};

LinearityReport linearity_from_curve(std::span<const double> t, std::span<const double> loss);
LinearityReport linearity(const ParameterSet& a, const ParameterSet& b, const ModelConfig& config,
                          const Batch& batch, std::size_t n_points = 20);

// Routing.

double routing_change(const ActivationTrace& a, const ActivationTrace& b);

}  // namespace forgetlab
