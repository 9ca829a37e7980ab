// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/error.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/params.hpp"
#include "forgetlab/spectrum.hpp"
#include "forgetlab/tasks.hpp"

namespace forgetlab {

struct CurvatureTarget {
  std::vector<std::vector<double>> directions;  // unit vectors, length total_dim
  std::vector<double> target_values;
  std::string source_task;

  void validate(std::size_t total_dim) const;
};

struct CurvatureConfig {
  double weight = 0.0;   // lambda_reg
  double fd_step = 1e-2;
  /// Examples of the source task's validation split the penalty is evaluated on.
  std::size_t batch_size = 64;
  /// Directions taken from the source task's spectrum when no explicit target is given.
  std::size_t n_directions = 4;
  std::size_t lanczos_iters = 16;
  std::optional<CurvatureTarget> target;
};

struct TrainConfig {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 50;
  std::size_t epochs = 3;
  /// Overrides epochs * floor(n_train / batch_size).
  std::optional<std::size_t> total_steps;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::optional<double> clip_norm = 1.0;
  std::set<ComponentGroup> freeze;
  std::optional<CurvatureConfig> curvature;
  std::size_t checkpoint_every = 50;
  std::uint64_t seed = 0;
  bool reset_optimizer = true;
  double divergence_factor = 1e3;
  /// Gradient-alignment probes during the first epoch of every task after the first.
  std::size_t cosine_probes = 4;
  std::size_t probe_batch = 256;
  /// Evaluate every sequence task after each epoch.
  bool eval_each_epoch = true;

  void validate() const;
  std::size_t steps_for(std::size_t n_train) const;
};

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;

  static OptimizerState zeros(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0), 0}; }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct CheckpointMeta {
  std::string id;
  std::string sequence_id;
  int task_index = -1;
  std::size_t global_step = 0;
  std::size_t epoch = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  ParameterSet params;
  OptimizerState opt;
  CheckpointMeta meta;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct StepRecord {
  std::size_t step = 0;  // global
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;       // before clipping
  double clipped_norm = 0.0;    // after clipping
  bool clipped = false;
  double penalty = 0.0;
};

struct EpochEval {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::vector<double> accuracy;  // one per sequence task, test split
};

struct CosineProbe {
  std::size_t step = 0;
  double cosine = 0.0;
};

struct TrainingLog {
  int task_index = 0;
  std::vector<StepRecord> steps;
  std::vector<EpochEval> evals;
  std::vector<std::string> checkpoint_ids;
  std::vector<CosineProbe> cosine_probes;

  double first_epoch_mean_cosine() const;
};

/// Generated splits of one task.
struct TaskData {
  TaskSpec spec;
  Batch train;
  Batch val;
  Batch test;

  static TaskData generate(const TaskSpec& spec);
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, Checkpoint last_good)
      : Error(ErrorCode::divergence, message), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const noexcept { return last_good_; }

 private:
  Checkpoint last_good_;
};

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config);

/// Scales to max_norm when the global norm exceeds it.
GradientSnapshot clip(const GradientSnapshot& grad, double max_norm);
double global_norm(std::span<const double> g);

struct AdamwResult {
  ParameterSet params;
  OptimizerState state;
};

/// Decoupled weight decay with bias correction. Frozen groups are left
/// untouched, moments included.
AdamwResult adamw_step(const ParameterSet& params, const OptimizerState& state, const GradientSnapshot& grad,
                       double lr, const TrainConfig& config);
/// In-place variant used by the training loop.
void adamw_update(ParameterSet& params, OptimizerState& state, std::span<const double> grad, double lr,
                  const TrainConfig& config);

struct CurvaturePenalty {
  double penalty = 0.0;
  std::vector<double> gradient;
  std::vector<double> curvatures;  // rho_i
};

/// rho_i from the three-point loss stencil along v_i; gradient from the same
/// stencil on gradients.
CurvaturePenalty curvature_penalty(const LossFn& loss_fn, const ParameterSet& params,
                                   const CurvatureTarget& target, double fd_step);

/// What the training loop needs besides the task itself.
struct FinetuneEnv {
  ModelConfig model;
  std::span<const TaskData> eval_tasks;  // evaluated each epoch
  int task_index = 0;
  const TaskData* previous = nullptr;    // gradient-alignment probes
  const Batch* curvature_batch = nullptr;
  std::optional<CurvatureTarget> curvature_target;
  std::string sequence_id;
  std::uint64_t config_hash = 0;
  std::uint64_t run_seed = 0;
};

struct FinetuneResult {
  Checkpoint final;
  std::vector<Checkpoint> checkpoints;  // in step order, final included when steps > 0
  TrainingLog log;
};

FinetuneResult finetune(const Checkpoint& start, const TaskData& task, const TrainConfig& config,
                        const FinetuneEnv& env);

struct StageRecord {
  int task_index = 0;
  std::string checkpoint_id;
  std::size_t global_step = 0;
  std::vector<double> accuracy;  // every sequence task
};

struct ExperimentRecord {
  std::string sequence_id;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  ModelConfig model;
  std::vector<std::string> task_ids;
  std::vector<double> alphas;
  std::vector<double> init_accuracy;
  std::vector<StageRecord> stages;  // one per task, in order
  std::vector<Checkpoint> checkpoints;  // "init" first
  std::vector<TrainingLog> logs;
  /// Target fixed at the end of task s, used while training task s + 1.
  std::vector<CurvatureTarget> curvature_targets;

  std::size_t n_tasks() const noexcept { return task_ids.size(); }
  const Checkpoint& checkpoint(const std::string& id) const;
  const Checkpoint& stage_checkpoint(std::size_t stage) const { return checkpoint(stages.at(stage).checkpoint_id); }
  /// Accuracy of task j after stage s (from the eval lattice).
  double accuracy(std::size_t stage, std::size_t task) const;
  std::uint64_t hash() const;
};

struct RunOptions {
  /// Drop intermediate checkpoints; the init and stage-final ones are kept.
  bool keep_intermediate = true;
  std::uint64_t config_hash = 0;
  std::string sequence_id;
};

ExperimentRecord run_sequence(const ParameterSet& init, const TaskSequence& sequence,
                              const ModelConfig& model, const TrainConfig& config,
                              const RunOptions& options = {});
ExperimentRecord run_sequence(const ParameterSet& init, std::span<const TaskData> tasks,
                              const ModelConfig& model, const TrainConfig& config,
                              const RunOptions& options = {});

/// Test-split accuracy of params on a batch.
double batch_accuracy(const EvalContext& ctx, const Batch& batch);

}  // namespace forgetlab
