// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

namespace forgetlab {

void CurvatureTarget::validate(std::size_t total_dim) const {
  require(!directions.empty(), ErrorCode::input, "curvature target has no directions");
  require(directions.size() == target_values.size(), ErrorCode::input,
          "curvature target: direction and value counts differ");
  for (const auto& d : directions) {
    require(d.size() == total_dim, ErrorCode::shape, "curvature direction length differs from total_dim");
    require(std::abs(vec::norm(d) - 1.0) <= 1e-9, ErrorCode::input, "curvature direction is not unit norm");
  }
}

void TrainConfig::validate() const {
  require(peak_lr > 0.0 && std::isfinite(peak_lr), ErrorCode::config, "train.peak_lr must be > 0");
  require(beta1 > 0.0 && beta1 < 1.0, ErrorCode::config, "train.beta1 must lie in (0, 1)");
  require(beta2 > 0.0 && beta2 < 1.0, ErrorCode::config, "train.beta2 must lie in (0, 1)");
  require(batch_size >= 1, ErrorCode::config, "train.batch_size must be >= 1");
  require(weight_decay >= 0.0, ErrorCode::config, "train.weight_decay must be >= 0");
  require(adam_eps > 0.0, ErrorCode::config, "train.adam_eps must be > 0");
  require(!clip_norm || *clip_norm > 0.0, ErrorCode::config, "train.clip_norm must be > 0");
  require(checkpoint_every >= 1, ErrorCode::config, "train.checkpoint_every must be >= 1");
  require(divergence_factor > 1.0, ErrorCode::config, "train.divergence_factor must be > 1");
  if (curvature) {
    require(curvature->weight >= 0.0, ErrorCode::config, "train.curvature.weight must be >= 0");
    require(curvature->fd_step > 0.0, ErrorCode::config, "train.curvature.fd_step must be > 0");
    require(curvature->batch_size >= 1, ErrorCode::config, "train.curvature.batch_size must be >= 1");
    require(curvature->n_directions >= 1 && curvature->lanczos_iters >= curvature->n_directions,
            ErrorCode::config, "train.curvature.lanczos_iters must be >= n_directions >= 1");
  }
}

std::size_t TrainConfig::steps_for(std::size_t n_train) const {
  if (total_steps) return *total_steps;
  return epochs * (n_train / batch_size);
}

double TrainingLog::first_epoch_mean_cosine() const {
  if (cosine_probes.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& p : cosine_probes) s += p.cosine;
  return s / static_cast<double>(cosine_probes.size());
}

TaskData TaskData::generate(const TaskSpec& spec) {
  return {spec, generate_split(spec, Split::train), generate_split(spec, Split::val),
          generate_split(spec, Split::test)};
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  const double w = static_cast<double>(config.warmup_steps);
  const double s = static_cast<double>(step);
  if (step < config.warmup_steps) return config.peak_lr * s / w;
  if (total_steps <= config.warmup_steps) return config.peak_lr;
  const double frac = (s - w) / (static_cast<double>(total_steps) - w);
  return config.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(frac, 1.0)));
}

double global_norm(std::span<const double> g) { return vec::norm(g); }

GradientSnapshot clip(const GradientSnapshot& grad, double max_norm) {
  require(max_norm > 0.0, ErrorCode::input, "clip: max_norm must be > 0");
  GradientSnapshot out = grad;
  const double n = global_norm(out.flat);
  if (n > max_norm) vec::scale(max_norm / n, out.flat);
  return out;
}

namespace {

bool frozen(const ParamKey& key, const TrainConfig& config) {
  return std::any_of(config.freeze.begin(), config.freeze.end(),
                     [&](ComponentGroup g) { return in_group(key.component, g); });
}

class Hasher {
 public:
  void bytes(const void* p, std::size_t n) {
    state_ = fnv1a(std::span<const std::byte>(static_cast<const std::byte*>(p), n), state_);
  }
  void doubles(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }
  void str(const std::string& s) { bytes(s.data(), s.size()); bytes("\0", 1); }
  template <typename T>
  void pod(const T& v) { bytes(&v, sizeof(T)); }
  std::uint64_t value() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::vector<double> evaluate_all(const ParameterSet& params, const ModelConfig& model,
                                 std::span<const TaskData> tasks) {
  EvalContext ctx(params, model);
  std::vector<double> acc;
  acc.reserve(tasks.size());
  for (const auto& t : tasks) acc.push_back(batch_accuracy(ctx, t.test));
  return acc;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = vec::norm(a), nb = vec::norm(b);
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return vec::dot(a, b) / (na * nb);
}

}  // namespace

void adamw_update(ParameterSet& params, OptimizerState& state, std::span<const double> grad, double lr,
                  const TrainConfig& config) {
  const std::size_t dim = params.total_dim();
  require(grad.size() == dim && state.m.size() == dim && state.v.size() == dim, ErrorCode::shape,
          "adamw: gradient/state length differs from total_dim");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double decay = 1.0 - lr * config.weight_decay;
  std::size_t offset = 0;
  for (const auto& [key, tensor] : params.entries()) {
    const std::size_t n = tensor.size();
    if (frozen(key, config)) {
      offset += n;
      continue;
    }
    auto theta = params.at(key).data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = offset + i;
      const double g = grad[j];
      state.m[j] = config.beta1 * state.m[j] + (1.0 - config.beta1) * g;
      state.v[j] = config.beta2 * state.v[j] + (1.0 - config.beta2) * g * g;
      const double mhat = state.m[j] / bc1;
      const double vhat = state.v[j] / bc2;
      theta[i] = theta[i] * decay - lr * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
    require(vec::all_finite(theta), ErrorCode::numeric, "adamw: non-finite update in " + to_string(key));
    offset += n;
  }
}

AdamwResult adamw_step(const ParameterSet& params, const OptimizerState& state, const GradientSnapshot& grad,
                       double lr, const TrainConfig& config) {
  AdamwResult out{params, state};
  adamw_update(out.params, out.state, grad.flat, lr, config);
  return out;
}

CurvaturePenalty curvature_penalty(const LossFn& loss_fn, const ParameterSet& params,
                                   const CurvatureTarget& target, double fd_step) {
  require(fd_step > 0.0, ErrorCode::input, "curvature_penalty: fd_step must be > 0");
  const std::size_t dim = params.total_dim();
  target.validate(dim);
  const auto center = value_and_grad(loss_fn, params);
  const std::vector<double> theta = flatten(params);
  const double inv_e2 = 1.0 / (fd_step * fd_step);

  CurvaturePenalty out;
  out.gradient.assign(dim, 0.0);
  std::vector<double> shifted(dim);
  for (std::size_t i = 0; i < target.directions.size(); ++i) {
    const auto& v = target.directions[i];
    auto at = [&](double sign) {
      for (std::size_t j = 0; j < dim; ++j) shifted[j] = theta[j] + sign * fd_step * v[j];
      return value_and_grad(loss_fn, unflatten(shifted, params));
    };
    const auto plus = at(1.0);
    const auto minus = at(-1.0);
    const double rho = (plus.value - 2.0 * center.value + minus.value) * inv_e2;
    require(std::isfinite(rho), ErrorCode::numeric, "curvature_penalty: non-finite stencil");
    const double diff = rho - target.target_values[i];
    out.curvatures.push_back(rho);
    out.penalty += diff * diff;
    const double w = 2.0 * diff * inv_e2;
    for (std::size_t j = 0; j < dim; ++j)
      out.gradient[j] += w * (plus.grad.flat[j] - 2.0 * center.grad.flat[j] + minus.grad.flat[j]);
  }
  require(vec::all_finite(out.gradient), ErrorCode::numeric, "curvature_penalty: non-finite gradient");
  return out;
}

double batch_accuracy(const EvalContext& ctx, const Batch& batch) {
  require(!batch.empty(), ErrorCode::input, "accuracy: empty split");
  const auto pred = predict(ctx, batch);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.labels[i];
  return static_cast<double>(hit) / static_cast<double>(batch.size());
}

FinetuneResult finetune(const Checkpoint& start, const TaskData& task, const TrainConfig& config,
                        const FinetuneEnv& env) {
  config.validate();
  FinetuneResult res;
  res.final = start;
  res.log.task_index = env.task_index;
  const std::size_t total = config.steps_for(task.train.size());
  if (total == 0) return res;
  require(task.train.size() >= config.batch_size, ErrorCode::config,
          "task " + task.spec.task_id + ": train split smaller than batch_size");

  const std::size_t dim = start.params.total_dim();
  ParameterSet params = start.params;
  OptimizerState opt = config.reset_optimizer ? OptimizerState::zeros(dim) : start.opt;
  require(opt.m.size() == dim && opt.v.size() == dim, ErrorCode::shape,
          "optimizer state does not match parameter count");

  const std::size_t per_epoch = task.train.size() / config.batch_size;
  Rng rng(config.seed, 1000 + static_cast<std::uint64_t>(env.task_index));
  std::vector<std::size_t> order(task.train.size());

  const bool penalize = config.curvature && config.curvature->weight > 0.0 && env.curvature_target &&
                        env.curvature_batch != nullptr;
  LossFn curvature_loss;
  if (penalize) curvature_loss = classification_loss(env.model, *env.curvature_batch);

  std::set<std::size_t> probe_steps;
  LossFn probe_new, probe_prev;
  if (env.previous != nullptr && config.cosine_probes > 0) {
    const std::size_t span = std::min(per_epoch, total);
    for (std::size_t j = 0; j < config.cosine_probes; ++j) probe_steps.insert(j * span / config.cosine_probes);
    probe_new = classification_loss(env.model, task.val.slice(0, std::min(config.probe_batch, task.val.size())));
    probe_prev = classification_loss(
        env.model, env.previous->val.slice(0, std::min(config.probe_batch, env.previous->val.size())));
  }

  auto make_checkpoint = [&](std::size_t local_step, std::size_t epoch) {
    Checkpoint c{params, opt, start.meta};
    c.meta.global_step = start.meta.global_step + local_step;
    c.meta.id = "t" + std::to_string(env.task_index) + "_s" + std::to_string(c.meta.global_step);
    c.meta.task_index = env.task_index;
    c.meta.epoch = epoch;
    c.meta.sequence_id = env.sequence_id;
    c.meta.config_hash = env.config_hash;
    c.meta.seed = env.run_seed;
    return c;
  };
  auto last_good = [&]() { return res.checkpoints.empty() ? start : res.checkpoints.back(); };

  double initial_loss = 0.0;
  for (std::size_t s = 0; s < total; ++s) {
    const std::size_t pos = s % per_epoch;
    if (pos == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(std::span<std::size_t>(order));
    }
    const std::size_t global = start.meta.global_step + s;

    if (probe_steps.contains(s)) {
      const auto g_new = grad(probe_new, params);
      const auto g_prev = grad(probe_prev, params);
      const double c = cosine(g_new.flat, g_prev.flat);
      if (std::isfinite(c)) res.log.cosine_probes.push_back({global, c});
    }

    const Batch mb = task.train.gather(std::span<const std::size_t>(order).subspan(pos * config.batch_size, config.batch_size));
    StepRecord rec;
    rec.step = global;
    rec.lr = lr_at(s, total, config);
    std::vector<double> g;
    try {
      auto vg = value_and_grad(classification_loss(env.model, mb), params);
      rec.loss = vg.value;
      g = std::move(vg.grad.flat);
      if (penalize) {
        const auto pen = curvature_penalty(curvature_loss, params, *env.curvature_target, config.curvature->fd_step);
        rec.penalty = pen.penalty;
        rec.loss += config.curvature->weight * pen.penalty;
        vec::axpy(config.curvature->weight, pen.gradient, g);
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::numeric) throw;
      throw DivergenceError("task " + task.spec.task_id + " step " + std::to_string(global) + ": " + e.what() +
                                "; last good checkpoint " + last_good().meta.id,
                            last_good());
    }
    if (s == 0) initial_loss = rec.loss;
    if (!std::isfinite(rec.loss) || rec.loss > config.divergence_factor * std::max(initial_loss, 1e-12)) {
      throw DivergenceError("task " + task.spec.task_id + " diverged at step " + std::to_string(global) +
                                " (loss " + std::to_string(rec.loss) + "); last good checkpoint " +
                                last_good().meta.id,
                            last_good());
    }

    std::size_t offset = 0;
    for (const auto& [key, tensor] : params.entries()) {
      if (frozen(key, config)) std::fill_n(g.begin() + static_cast<std::ptrdiff_t>(offset), tensor.size(), 0.0);
      offset += tensor.size();
    }
    rec.grad_norm = global_norm(g);
    rec.clipped_norm = rec.grad_norm;
    if (config.clip_norm && rec.grad_norm > *config.clip_norm) {
      vec::scale(*config.clip_norm / rec.grad_norm, g);
      rec.clipped = true;
      rec.clipped_norm = global_norm(g);
    }
    adamw_update(params, opt, g, rec.lr, config);
    res.log.steps.push_back(rec);

    const std::size_t done = s + 1;
    const std::size_t epoch = (done + per_epoch - 1) / per_epoch;
    if (config.eval_each_epoch && (done % per_epoch == 0 || done == total) && !env.eval_tasks.empty())
      res.log.evals.push_back({epoch, start.meta.global_step + done, evaluate_all(params, env.model, env.eval_tasks)});
    if (done % config.checkpoint_every == 0 || done == total) {
      res.checkpoints.push_back(make_checkpoint(done, epoch));
      res.log.checkpoint_ids.push_back(res.checkpoints.back().meta.id);
    }
  }
  res.final = res.checkpoints.back();
  return res;
}

const Checkpoint& ExperimentRecord::checkpoint(const std::string& id) const {
  for (const auto& c : checkpoints)
    if (c.meta.id == id) return c;
  fail(ErrorCode::data, "missing checkpoint '" + id + "'");
}

double ExperimentRecord::accuracy(std::size_t stage, std::size_t task) const {
  require(stage < stages.size() && task < stages[stage].accuracy.size(), ErrorCode::data,
          "missing eval cell (stage " + std::to_string(stage) + ", task " + std::to_string(task) + ")");
  return stages[stage].accuracy[task];
}

std::uint64_t ExperimentRecord::hash() const {
  Hasher h;
  h.str(sequence_id);
  h.pod(seed);
  h.pod(config_hash);
  for (const auto& id : task_ids) h.str(id);
  h.doubles(alphas);
  h.doubles(init_accuracy);
  for (const auto& s : stages) {
    h.pod(s.task_index);
    h.str(s.checkpoint_id);
    h.pod(s.global_step);
    h.doubles(s.accuracy);
  }
  for (const auto& c : checkpoints) {
    h.str(c.meta.id);
    h.pod(c.meta.global_step);
    h.doubles(flatten(c.params));
    h.doubles(c.opt.m);
    h.doubles(c.opt.v);
    h.pod(c.opt.step);
  }
  for (const auto& log : logs) {
    for (const auto& s : log.steps) {
      h.pod(s.step);
      h.pod(s.loss);
      h.pod(s.lr);
      h.pod(s.grad_norm);
    }
    for (const auto& p : log.cosine_probes) h.pod(p.cosine);
  }
  return h.value();
}

ExperimentRecord run_sequence(const ParameterSet& init, const TaskSequence& sequence, const ModelConfig& model,
                              const TrainConfig& config, const RunOptions& options) {
  std::vector<TaskData> tasks;
  tasks.reserve(sequence.size());
  for (const auto& spec : sequence.tasks) tasks.push_back(TaskData::generate(spec));
  RunOptions opts = options;
  if (opts.sequence_id.empty()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(sequence.seed));
    opts.sequence_id = std::string(to_string(sequence.category)) + "-" + buf;
  }
  return run_sequence(init, tasks, model, config, opts);
}

ExperimentRecord run_sequence(const ParameterSet& init, std::span<const TaskData> tasks, const ModelConfig& model,
                              const TrainConfig& config, const RunOptions& options) {
  require(!tasks.empty(), ErrorCode::input, "run_sequence: empty task sequence");
  model.validate();
  config.validate();
  ExperimentRecord rec;
  rec.sequence_id = options.sequence_id;
  rec.seed = config.seed;
  rec.config_hash = options.config_hash;
  rec.model = model;
  for (const auto& t : tasks) {
    rec.task_ids.push_back(t.spec.task_id);
    rec.alphas.push_back(t.spec.alpha);
  }

  Checkpoint current{init, OptimizerState::zeros(init.total_dim()), {}};
  current.meta = {"init", options.sequence_id, -1, 0, 0, options.config_hash, config.seed};
  rec.init_accuracy = evaluate_all(init, model, tasks);
  rec.checkpoints.push_back(current);

  std::optional<CurvatureTarget> target;
  Batch curvature_batch;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    FinetuneEnv env;
    env.model = model;
    env.eval_tasks = tasks;
    env.task_index = static_cast<int>(t);
    env.previous = t > 0 ? &tasks[t - 1] : nullptr;
    env.curvature_batch = t > 0 ? &curvature_batch : nullptr;
    env.curvature_target = config.curvature && config.curvature->target ? config.curvature->target : target;
    env.sequence_id = options.sequence_id;
    env.config_hash = options.config_hash;
    env.run_seed = config.seed;

    FinetuneResult res = finetune(current, tasks[t], config, env);
    StageRecord stage;
    stage.task_index = static_cast<int>(t);
    stage.checkpoint_id = res.final.meta.id;
    stage.global_step = res.final.meta.global_step;
    if (!res.log.evals.empty() && res.log.evals.back().step == stage.global_step)
      stage.accuracy = res.log.evals.back().accuracy;
    else
      stage.accuracy = evaluate_all(res.final.params, model, tasks);
    rec.stages.push_back(std::move(stage));

    if (res.checkpoints.empty()) {
      // Zero-step task: the stage checkpoint is the carried one, already stored.
    } else if (options.keep_intermediate) {
      for (auto& c : res.checkpoints) rec.checkpoints.push_back(std::move(c));
    } else {
      rec.checkpoints.push_back(res.final);
    }

    if (config.curvature && t + 1 < tasks.size()) {
      const auto& cc = *config.curvature;
      curvature_batch = tasks[t].val.slice(0, std::min(cc.batch_size, tasks[t].val.size()));
      LanczosOptions lo;
      lo.k = cc.n_directions;
      lo.m = cc.lanczos_iters;
      lo.n_probes = 1;
      lo.want_vectors = true;
      Rng lanczos_rng(config.seed, 5000 + t);
      auto spec = lanczos_spectrum(classification_loss(model, curvature_batch), res.final.params, lo, lanczos_rng);
      CurvatureTarget next;
      next.directions = std::move(spec.eigenvectors);
      next.target_values = std::move(spec.eigenvalues);
      next.source_task = tasks[t].spec.task_id;
      rec.curvature_targets.push_back(next);
      target = std::move(next);
    }
    current = std::move(res.final);
    rec.logs.push_back(std::move(res.log));
  }
  return rec;
}

}  // namespace forgetlab
