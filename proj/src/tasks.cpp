// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

#include <json.hpp>

#include "forgetlab/error.hpp"

namespace forgetlab {

const char* to_string(SimilarityCategory c) noexcept {
  switch (c) {
    case SimilarityCategory::high: return "high";
    case SimilarityCategory::medium: return "medium";
    case SimilarityCategory::low: return "low";
  }
  return "low";
}

SimilarityCategory category_from_string(const std::string& name) {
  if (name == "high") return SimilarityCategory::high;
  if (name == "medium") return SimilarityCategory::medium;
  if (name == "low") return SimilarityCategory::low;
  fail(ErrorCode::config, "unknown similarity category '" + name + "' (expected high, medium, low)");
}

double default_alpha(SimilarityCategory c) noexcept {
  switch (c) {
    case SimilarityCategory::high: return 0.9;
    case SimilarityCategory::medium: return 0.5;
    case SimilarityCategory::low: return 0.0;
  }
  return 0.0;
}

bool alpha_in_band(SimilarityCategory c, double alpha) noexcept {
  switch (c) {
    case SimilarityCategory::high: return alpha >= 0.8 && alpha <= 1.0;
    case SimilarityCategory::medium: return alpha >= 0.4 && alpha <= 0.6;
    case SimilarityCategory::low: return alpha >= 0.0 && alpha <= 0.1;
  }
  return false;
}

const char* to_string(Split s) noexcept {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::size_t TaskSpec::split_size(Split s) const noexcept {
  switch (s) {
    case Split::train: return n_train;
    case Split::val: return n_val;
    case Split::test: return n_test;
  }
  return 0;
}

namespace {

enum Stream : std::uint64_t {
  kFeatureStream = 1,
  kAnchorTeacherStream = 2,
  kAnchorTokenStream = 3,
  kCalibrationStream = 4,
  kOrthStream = 100,
  kOwnTokenStream = 1000,
};

constexpr std::size_t kCalibrationSamples = 4096;

std::vector<double> normal_vector(std::size_t n, Rng rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void normalize(std::vector<double>& v) {
  const double n = vec::norm(v);
  require(n > 0.0, ErrorCode::numeric, "cannot normalize zero vector");
  vec::scale(1.0 / n, v);
}

std::int32_t sample_token(std::span<const double> cdf, double u) {
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  if (it == cdf.end()) --it;
  return static_cast<std::int32_t>(it - cdf.begin());
}

std::vector<double> cumulative(std::span<const double> probs) {
  std::vector<double> cdf(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) cdf[i] = acc += probs[i];
  return cdf;
}

void teacher_scores(const TaskSpec& task, std::span<const std::int32_t> tokens, std::span<double> out) {
  const std::size_t F = task.feature_map.dim(1);
  std::vector<double> phi(F, 0.0);
  for (auto t : tokens) {
    const double* row = &task.feature_map[static_cast<std::size_t>(t) * F];
    for (std::size_t f = 0; f < F; ++f) phi[f] += row[f];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (std::size_t c = 0; c < task.n_classes; ++c) {
    double s = 0.0;
    for (std::size_t f = 0; f < F; ++f) s += task.teacher.at(c, f) * phi[f] * inv;
    out[c] = s - (task.class_offset.empty() ? 0.0 : task.class_offset[c]);
  }
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Offsets that make the teacher's arg-max classes roughly equiprobable
/// under the task's input distribution; the sampler then balances exactly.
std::vector<double> calibrate_offsets(const TaskSpec& task, std::uint64_t seq_seed) {
  const std::size_t C = task.n_classes;
  Rng rng(seq_seed, kCalibrationStream);
  const auto cdf = cumulative(task.token_probs);
  std::vector<double> scores(kCalibrationSamples * C);
  std::vector<std::int32_t> row(task.seq_len);
  for (std::size_t n = 0; n < kCalibrationSamples; ++n) {
    for (auto& t : row) t = sample_token(cdf, rng.uniform());
    teacher_scores(task, row, std::span<double>(scores).subspan(n * C, C));
  }
  std::vector<double> offset(C, 0.0);
  double spread = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t n = 0; n < kCalibrationSamples; ++n) mu += scores[n * C + c];
    offset[c] = mu / kCalibrationSamples;
  }
  for (std::size_t n = 0; n < kCalibrationSamples; ++n)
    for (std::size_t c = 0; c < C; ++c) spread += std::pow(scores[n * C + c] - offset[c], 2);
  spread = std::sqrt(spread / static_cast<double>(kCalibrationSamples * C));
  std::vector<double> shifted(C);
  for (int iter = 0; iter < 50; ++iter) {
    std::vector<double> freq(C, 0.0);
    for (std::size_t n = 0; n < kCalibrationSamples; ++n) {
      for (std::size_t c = 0; c < C; ++c) shifted[c] = scores[n * C + c] - offset[c];
      freq[argmax(shifted)] += 1.0 / kCalibrationSamples;
    }
    for (std::size_t c = 0; c < C; ++c) offset[c] += 0.5 * spread * (freq[c] - 1.0 / static_cast<double>(C));
  }
  return offset;
}

std::uint64_t row_hash(std::span<const std::int32_t> row, std::uint64_t salt) {
  return mix64(fnv1a(std::as_bytes(row), salt));
}

}  // namespace

TaskSequence make_sequence(SimilarityCategory category, std::size_t n_tasks, const SequenceParams& base,
                           Rng& rng) {
  require(n_tasks >= 2 && n_tasks <= 8, ErrorCode::config,
          "sequence.n_tasks must be in [2, 8], got " + std::to_string(n_tasks));
  require(base.vocab_size >= 2 && base.seq_len >= 1 && base.n_classes >= 2 && base.feature_dim >= 1,
          ErrorCode::config, "sequence sizes must be positive (vocab >= 2, classes >= 2)");
  const double alpha = base.alpha.value_or(default_alpha(category));
  require(alpha_in_band(category, alpha), ErrorCode::config,
          "sequence.alpha " + std::to_string(alpha) + " outside the '" + to_string(category) + "' band");
  const std::size_t C = base.n_classes;
  const std::size_t F = base.feature_dim;
  const std::size_t V = base.vocab_size;
  require(n_tasks + 1 <= C * F, ErrorCode::config, "teacher space too small for orthogonal tasks");

  TaskSequence seq;
  seq.category = category;
  seq.seed = rng.next_u64();

  Tensor features({V, F}, 0.0);
  {
    Rng r(seq.seed, kFeatureStream);
    for (double& x : features.data()) x = r.normal();
  }
  std::vector<double> anchor = normal_vector(C * F, Rng(seq.seed, kAnchorTeacherStream));
  normalize(anchor);
  const std::vector<double> anchor_tokens = normal_vector(V, Rng(seq.seed, kAnchorTokenStream));

  const double w_anchor = std::sin(alpha * std::numbers::pi / 2.0);
  // sin((1 - alpha) pi/2) rather than cos: exact zero at alpha = 1.
  const double w_own = std::sin((1.0 - alpha) * std::numbers::pi / 2.0);
  std::vector<std::vector<double>> basis{anchor};
  for (std::size_t t = 0; t < n_tasks; ++t) {
    std::vector<double> orth = normal_vector(C * F, Rng(seq.seed, kOrthStream + t));
    // Two Gram-Schmidt passes for numerical orthogonality.
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) vec::axpy(-vec::dot(orth, b), b, orth);
    normalize(orth);
    basis.push_back(orth);

    TaskSpec task;
    task.task_id = "task" + std::to_string(t);
    task.teacher_seed = seq.seed;
    task.data_seed = mix64(seq.seed ^ (0x632be59bd9b4e019ULL * (t + 1)));
    task.alpha = alpha;
    task.n_train = base.n_train;
    task.n_val = base.n_val;
    task.n_test = base.n_test;
    task.seq_len = base.seq_len;
    task.n_classes = C;
    task.vocab_size = V;
    task.feature_map = features;

    std::vector<double> theta(C * F);
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = w_anchor * anchor[i] + w_own * orth[i];
    task.teacher = Tensor({C, F}, std::move(theta));

    const std::vector<double> own_tokens = normal_vector(V, Rng(seq.seed, kOwnTokenStream + t));
    task.token_probs.resize(V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double logit = base.token_sharpness * (w_anchor * anchor_tokens[v] + w_own * own_tokens[v]);
      task.token_probs[v] = std::exp(logit);
      z += task.token_probs[v];
    }
    for (double& p : task.token_probs) p /= z;
    task.class_offset = calibrate_offsets(task, seq.seed);
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

std::int32_t teacher_label(const TaskSpec& task, std::span<const std::int32_t> tokens) {
  std::vector<double> scores(task.n_classes);
  teacher_scores(task, tokens, scores);
  return static_cast<std::int32_t>(argmax(scores));
}

Batch generate_split(const TaskSpec& task, Split split) {
  if (task.external) {
    const auto& ext = *task.external;
    const auto& path = split == Split::train ? ext.train : split == Split::val ? ext.val : ext.test;
    return load_jsonl(path, task.vocab_size, task.n_classes).batch;
  }
  require(!task.teacher.empty() && !task.token_probs.empty(), ErrorCode::config,
          "task " + task.task_id + " has no teacher");
  const std::size_t n = task.split_size(split);
  const std::size_t C = task.n_classes;
  std::vector<std::size_t> quota(C, n / C);
  for (std::size_t c = 0; c < n % C; ++c) ++quota[c];

  Batch out;
  out.seq_len = task.seq_len;
  out.tokens.reserve(n * task.seq_len);
  out.labels.reserve(n);
  Rng rng(task.data_seed, static_cast<std::uint64_t>(split) + 1);
  const auto cdf = cumulative(task.token_probs);
  const auto residue = static_cast<std::uint64_t>(split);
  std::vector<std::int32_t> row(task.seq_len);
  const std::size_t max_attempts = 2000 * n + 100000;
  for (std::size_t attempt = 0; out.size() < n; ++attempt) {
    require(attempt < max_attempts, ErrorCode::config,
            "task " + task.task_id + ": could not fill balanced " + to_string(split) + " split");
    for (auto& t : row) t = sample_token(cdf, rng.uniform());
    if (row_hash(row, task.data_seed) % 3 != residue) continue;
    const auto label = teacher_label(task, row);
    if (quota[static_cast<std::size_t>(label)] == 0) continue;
    --quota[static_cast<std::size_t>(label)];
    out.tokens.insert(out.tokens.end(), row.begin(), row.end());
    out.labels.push_back(label);
  }
  return out;
}

Dataset load_jsonl(const std::filesystem::path& path, std::size_t vocab_size, std::size_t n_classes) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "cannot open " + path.string());
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      bad(std::string("malformed JSON (") + e.what() + ")");
    }
    if (!obj.is_object() || !obj.contains("tokens") || !obj.contains("label")) bad("expected {\"tokens\": [...], \"label\": n}");
    const auto& toks = obj["tokens"];
    const auto& label = obj["label"];
    if (!toks.is_array() || toks.empty()) bad("\"tokens\" must be a non-empty integer array");
    if (!label.is_number_integer()) bad("\"label\" must be an integer");
    const auto y = label.get<long long>();
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
      bad("label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
    if (ds.batch.seq_len == 0) ds.batch.seq_len = toks.size();
    if (toks.size() != ds.batch.seq_len)
      bad("sequence length " + std::to_string(toks.size()) + " differs from " + std::to_string(ds.batch.seq_len));
    for (const auto& t : toks) {
      if (!t.is_number_integer()) bad("token ids must be integers");
      const auto id = t.get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
        bad("token " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
      ds.batch.tokens.push_back(static_cast<std::int32_t>(id));
    }
    ds.batch.labels.push_back(static_cast<std::int32_t>(y));
  }
  if (ds.batch.empty()) {
    ds.warnings.push_back(path.string() + ": empty dataset");
    std::clog << "warning: " << ds.warnings.back() << '\n';
  }
  return ds;
}

double data_similarity(const Batch& a, const Batch& b) {
  require(!a.empty() && !b.empty(), ErrorCode::input, "data_similarity: empty dataset");
  std::int32_t vmax = 0;
  for (auto t : a.tokens) vmax = std::max(vmax, t);
  for (auto t : b.tokens) vmax = std::max(vmax, t);
  std::vector<double> ca(static_cast<std::size_t>(vmax) + 1, 0.0), cb(ca.size(), 0.0);
  for (auto t : a.tokens) ca[static_cast<std::size_t>(t)] += 1.0;
  for (auto t : b.tokens) cb[static_cast<std::size_t>(t)] += 1.0;
  const double na = vec::norm(ca), nb = vec::norm(cb);
  return std::clamp(vec::dot(ca, cb) / (na * nb), 0.0, 1.0);
}

double teacher_cosine(const TaskSpec& a, const TaskSpec& b) {
  require(a.teacher.size() == b.teacher.size() && !a.teacher.empty(), ErrorCode::input,
          "teacher_cosine: incompatible teachers");
  const double na = vec::norm(a.teacher.data()), nb = vec::norm(b.teacher.data());
  return vec::dot(a.teacher.data(), b.teacher.data()) / (na * nb);
}

}  // namespace forgetlab
