// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures for the unit and acceptance tests.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <Eigen/Dense>

#include "forgetlab/config.hpp"
#include "forgetlab/model.hpp"
#include "forgetlab/params.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/tasks.hpp"
#include "forgetlab/trainer.hpp"

namespace forgetlab::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("forgetlab-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline const ParamKey kTheta{0, Component::ffn_in, "theta"};

inline ParameterSet vector_params(const std::vector<double>& theta) {
  ParameterSet p;
  p.insert(kTheta, Tensor(Shape{theta.size()}, theta));
  return p;
}

/// 0.5 * theta^T A theta for a symmetric A.
inline LossFn quadratic_loss(const Eigen::MatrixXd& a) {
  const auto n = static_cast<std::size_t>(a.rows());
  std::vector<double> data(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) data[i * n + j] = a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  Tensor at(Shape{n, n}, std::move(data));
  return [at](ad::Tape& tape, const ParamVars& vars) {
    const ad::Var th = vars[kTheta];
    return ad::scale(ad::dot(th, ad::matmul(th, tape.constant(at))), 0.5);
  };
}

inline Eigen::MatrixXd random_symmetric(std::size_t n, Rng& rng) {
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal();
  return 0.5 * (m + m.transpose());
}

inline Eigen::MatrixXd random_orthogonal(std::size_t n, Rng& rng) {
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  return qr.householderQ();
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor t(Shape{rows, cols});
  for (auto& x : t.storage()) x = scale * rng.normal();
  return t;
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  return m;
}

inline ModelConfig tiny_model(std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.d_ff = 2 * d;
  c.vocab_size = 32;
  c.max_seq_len = 8;
  c.n_classes = 4;
  return c;
}

inline Batch random_batch(const ModelConfig& c, std::size_t n, std::size_t seq, Rng& rng) {
  Batch b;
  b.seq_len = seq;
  for (std::size_t i = 0; i < n * seq; ++i) b.tokens.push_back(static_cast<std::int32_t>(rng.below(c.vocab_size)));
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<std::int32_t>(rng.below(c.n_classes)));
  return b;
}

inline SequenceParams tiny_sequence_params(std::size_t n_train = 200) {
  SequenceParams p;
  p.vocab_size = 32;
  p.seq_len = 8;
  p.n_classes = 4;
  p.feature_dim = 8;
  p.n_train = n_train;
  p.n_val = 64;
  p.n_test = 64;
  return p;
}

/// Small end-to-end config for runner tests.
inline ExperimentConfig tiny_experiment(const std::filesystem::path& out, std::vector<std::uint64_t> seeds = {1}) {
  ExperimentConfig c;
  c.model = tiny_model(2, 16, 2);
  c.sequence.category = SimilarityCategory::low;
  c.sequence.n_tasks = 2;
  c.sequence.params = tiny_sequence_params(160);
  c.train.epochs = 1;
  c.train.batch_size = 16;
  c.train.peak_lr = 3e-3;
  c.train.warmup_steps = 2;
  c.train.checkpoint_every = 4;
  c.train.probe_batch = 32;
  c.metrics.probe_examples = 32;
  c.metrics.cka_samples = 64;
  c.metrics.realign_samples = 64;
  c.metrics.spectrum_k = 3;
  c.metrics.spectrum_m = 6;
  c.metrics.spectrum_probes = 1;
  c.metrics.spectrum_batch = 32;
  c.metrics.linearity_points = 5;
  c.seeds = std::move(seeds);
  c.output_dir = out;
  return c;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline double rel_err(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace forgetlab::testing
