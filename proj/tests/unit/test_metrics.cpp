// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "forgetlab/error.hpp"
#include "forgetlab/metrics.hpp"
#include "support.hpp"

using namespace forgetlab;
using namespace forgetlab::testing;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::runtime;
}

/// Single-layer trace with attention filled by row(b, h, i) over j <= i.
template <typename RowFn>
ActivationTrace synthetic_trace(std::size_t B, std::size_t H, std::size_t T, RowFn row) {
  ActivationTrace tr;
  Tensor p({B, H, T, T}, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        const std::vector<double> r = row(b, h, i);
        for (std::size_t j = 0; j <= i; ++j) p[((b * H + h) * T + i) * T + j] = r[j];
      }
  tr.attention.push_back(std::move(p));
  tr.logits = Tensor({B, 1}, 0.0);
  return tr;
}

ExperimentRecord lattice(const std::vector<std::vector<double>>& acc) {
  ExperimentRecord r;
  for (std::size_t s = 0; s < acc.size(); ++s) {
    r.task_ids.push_back("t" + std::to_string(s));
    StageRecord st;
    st.task_index = static_cast<int>(s);
    st.accuracy = acc[s];
    r.stages.push_back(st);
  }
  return r;
}

/// Student-t CDF for three degrees of freedom in closed form.
double t3_cdf(double t) {
  const double s3 = std::sqrt(3.0);
  return 0.5 + (t / (s3 * (1.0 + t * t / 3.0)) + std::atan(t / s3)) / std::numbers::pi;
}

}  // namespace

TEST_CASE("accuracy of a constant predictor on constant labels is one", "[metrics][accuracy]") {
  const ModelConfig cfg = tiny_model();
  Rng rng(1);
  ParameterSet p = init_model(cfg, rng);
  for (auto& [key, t] : p.entries()) std::fill(p.at(key).data().begin(), p.at(key).data().end(), 0.0);
  p.at({static_cast<int>(cfg.n_layers), Component::head_out, "b"}).data()[0] = 1.0;
  Batch b = random_batch(cfg, 50, 8, rng);
  std::fill(b.labels.begin(), b.labels.end(), 0);
  CHECK(batch_accuracy(EvalContext(p, cfg), b) == 1.0);
  CHECK(code_of([&] { (void)batch_accuracy(EvalContext(p, cfg), Batch{}); }) == ErrorCode::input);
}

TEST_CASE("random init accuracy sits near chance and is repeatable", "[metrics][accuracy]") {
  SequenceParams sp = tiny_sequence_params(64);
  sp.n_test = 500;
  Rng rng(2);
  const TaskSequence s = make_sequence(SimilarityCategory::low, 2, sp, rng);
  const ModelConfig cfg = tiny_model();
  const Checkpoint ck{init_model(cfg, rng), {}, {}};
  const double a = accuracy(ck, cfg, s.tasks[0], Split::test);
  CHECK(a >= 0.19);
  CHECK(a <= 0.31);
  CHECK(accuracy(ck, cfg, s.tasks[0], Split::test) == a);
}

TEST_CASE("forgetting magnitude examples", "[metrics][forgetting]") {
  const ExperimentRecord r = lattice({{0.893, 0.2}, {0.672, 0.70}, {0.5, 0.75}});
  const auto f0 = forgetting_magnitude(r, 0);
  REQUIRE(f0.size() == 3);
  CHECK(f0[0].value == 0.0);
  CHECK(f0[1].value == Catch::Approx(0.221).margin(1e-12));
  const auto f1 = forgetting_magnitude(r, 1);
  REQUIRE(f1.size() == 2);
  CHECK(f1[0].stage == 1);
  CHECK(f1[1].value == Catch::Approx(-0.05).margin(1e-12));
  ExperimentRecord missing = r;
  missing.stages[2].accuracy.pop_back();
  CHECK(code_of([&] { (void)forgetting_magnitude(missing, 1); }) == ErrorCode::data);
}

TEST_CASE("head distances of identical checkpoints are zero", "[metrics][heads]") {
  const ModelConfig cfg = tiny_model(4, 16, 4);
  Rng rng(3);
  const ParameterSet p = init_model(cfg, rng);
  const HeadDistances d = head_weight_distances(p, p, cfg);
  REQUIRE(d.distance.size() == 16);
  for (double x : d.distance) CHECK(x == 0.0);
  for (bool f : d.disrupted) CHECK_FALSE(f);
  CHECK(d.stddev == 0.0);
}

TEST_CASE("one strongly perturbed head is flagged", "[metrics][heads]") {
  const ModelConfig cfg = tiny_model(4, 16, 4);
  Rng rng(4);
  const ParameterSet a = init_model(cfg, rng);
  ParameterSet b = a;
  const double noise = 1e-3;
  for (int l = 0; l < 4; ++l)
    for (Component c : {Component::attn_q, Component::attn_k, Component::attn_v, Component::attn_o})
      for (double& x : b.at({l, c, "w"}).data()) x += noise * rng.normal();
  // Head (2, 1): columns 4..7 of q/k/v, rows 4..7 of o.
  const std::size_t dh = cfg.head_dim();
  for (Component c : {Component::attn_q, Component::attn_k, Component::attn_v}) {
    Tensor& w = b.at({2, c, "w"});
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t j = dh; j < 2 * dh; ++j) w.at(r, j) += 10 * noise * rng.normal();
  }
  Tensor& o = b.at({2, Component::attn_o, "w"});
  for (std::size_t r = dh; r < 2 * dh; ++r)
    for (std::size_t j = 0; j < 16; ++j) o.at(r, j) += 10 * noise * rng.normal();

  const HeadDistances d = head_weight_distances(a, b, cfg);
  for (std::size_t i = 0; i < 16; ++i) CHECK(d.disrupted[i] == (i == 2 * 4 + 1));
  // Weights only: recomputation is identical.
  CHECK(head_weight_distances(a, b, cfg).distance == d.distance);

  const ParameterSet other = init_model(tiny_model(4, 8, 4), rng);
  CHECK(code_of([&] { (void)head_weight_distances(a, other, cfg); }) == ErrorCode::config);
}

TEST_CASE("attention entropy examples", "[metrics][entropy]") {
  CHECK(row_entropy_bits(std::vector<double>(16, 1.0 / 16)) == Catch::Approx(4.0).epsilon(1e-14));
  std::vector<double> onehot(16, 0.0);
  onehot[5] = 1.0;
  CHECK(row_entropy_bits(onehot) == 0.0);

  const std::size_t T = 16;
  const auto uniform = synthetic_trace(2, 1, T, [](std::size_t, std::size_t, std::size_t i) {
    return std::vector<double>(i + 1, 1.0 / static_cast<double>(i + 1));
  });
  double oracle = 0.0;
  for (std::size_t i = 0; i < T; ++i) oracle += std::log2(static_cast<double>(i + 1)) / T;
  CHECK(attention_entropy(uniform).at(0, 0) == Catch::Approx(oracle).epsilon(1e-12));

  const auto first = synthetic_trace(1, 2, T, [](std::size_t, std::size_t, std::size_t i) {
    std::vector<double> r(i + 1, 0.0);
    r[0] = 1.0;
    return r;
  });
  CHECK(attention_entropy(first).at(0, 1) == 0.0);
}

TEST_CASE("entropy of model traces stays under the visible bound", "[metrics][entropy]") {
  const ModelConfig cfg = tiny_model(2, 16, 4);
  Rng rng(5);
  const ParameterSet p = init_model(cfg, rng);
  const ActivationTrace tr = forward(p, cfg, random_batch(cfg, 6, 8, rng));
  const Tensor e = attention_entropy(tr);
  double bound = 0.0;
  for (std::size_t i = 0; i < 8; ++i) bound += std::log2(static_cast<double>(i + 1)) / 8;
  for (double x : e.storage()) {
    CHECK(x >= 0.0);
    CHECK(x <= bound + 1e-12);
  }
}

TEST_CASE("specialization is near zero under independence", "[metrics][specialization]") {
  Rng rng(6);
  std::vector<int> cls(20000);
  std::vector<double> mass(20000);
  for (std::size_t i = 0; i < cls.size(); ++i) {
    cls[i] = static_cast<int>(rng.below(4));
    mass[i] = rng.uniform();
  }
  const double s = specialization_from_samples(cls, mass);
  CHECK(s >= 0.0);
  CHECK(s < 0.05);
}

TEST_CASE("specialization is one under deterministic dependence", "[metrics][specialization]") {
  Rng rng(7);
  std::vector<int> cls(1000);
  std::vector<double> mass(1000);
  for (std::size_t i = 0; i < cls.size(); ++i) {
    cls[i] = static_cast<int>(i % 4);
    mass[i] = cls[i] + 0.1 * rng.uniform();
  }
  CHECK(specialization_from_samples(cls, mass) == Catch::Approx(1.0).margin(1e-6));
  std::vector<int> single(1000, 2);
  CHECK(specialization_from_samples(single, mass) == 0.0);
}

TEST_CASE("specialization of model traces lies in the unit interval", "[metrics][specialization]") {
  const ModelConfig cfg = tiny_model(2, 16, 4);
  Rng rng(8);
  const ParameterSet p = init_model(cfg, rng);
  const Batch b = random_batch(cfg, 12, 8, rng);
  const Tensor s = specialization_index(forward(p, cfg, b), vocab_quartiles(b.tokens, cfg.vocab_size));
  for (double x : s.storage()) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
}

TEST_CASE("attention pattern correlation examples", "[metrics][correlation]") {
  const ModelConfig cfg = tiny_model(2, 16, 2);
  Rng rng(9);
  const ParameterSet p = init_model(cfg, rng);
  const ActivationTrace tr = forward(p, cfg, random_batch(cfg, 4, 8, rng));
  const Tensor self = attention_pattern_correlation(tr, tr);
  for (double x : self.storage()) CHECK(x == Catch::Approx(1.0).epsilon(1e-12));

  std::vector<double> a(256);
  for (auto& x : a) x = rng.normal();
  double mean = 0.0;
  for (double x : a) mean += x / 256;
  std::vector<double> neg(256);
  for (std::size_t i = 0; i < 256; ++i) neg[i] = 2 * mean - a[i];
  CHECK(map_correlation(a, neg) == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK(std::isnan(map_correlation(a, std::vector<double>(256, 0.5))));

  int large = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(256), y(256);
    for (auto& v : x) v = rng.uniform();
    for (auto& v : y) v = rng.uniform();
    large += std::abs(map_correlation(x, y)) >= 0.2;
  }
  CHECK(large <= 2);
}

TEST_CASE("cka invariances", "[metrics][cka]") {
  Rng rng(10);
  const Tensor x = random_tensor(100, 12, rng);
  CHECK(std::abs(cka(x, x) - 1.0) < 1e-9);
  const Eigen::MatrixXd q = random_orthogonal(12, rng);
  CHECK(std::abs(cka(x, from_eigen(to_eigen(x) * q)) - 1.0) < 1e-9);
  CHECK(std::abs(cka(x, from_eigen(3.7 * to_eigen(x))) - 1.0) < 1e-9);
  const Tensor flat({100, 12}, 2.0);
  CHECK(code_of([&] { (void)cka(x, flat); }) == ErrorCode::undefined_value);
}

TEST_CASE("cka of independent matrices is small", "[metrics][cka]") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor(512, 64, rng), b = random_tensor(512, 64, rng);
    const double c = cka(a, b);
    CHECK(c >= 0.0);
    CHECK(c < 0.2);
  }
}

TEST_CASE("representation overlap compares feature covariances", "[metrics][cka]") {
  // Covariances diag(2, 0) and diag(2, 2): 4 / (2 * sqrt(8)).
  const Tensor a({2, 2}, {1.0, 0.0, -1.0, 0.0});
  const Tensor b({4, 2}, {1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0});
  CHECK(std::abs(representation_overlap(a, b) - 1.0 / std::sqrt(2.0)) < 1e-15);
  // Variance in disjoint feature subspaces.
  const Tensor c({2, 2}, {0.0, 1.0, 0.0, -1.0});
  CHECK(representation_overlap(a, c) == 0.0);

  Rng rng(13);
  Tensor x = random_tensor(2000, 6, rng), y = random_tensor(3000, 6, rng);
  for (std::size_t i = 0; i < 2000; ++i) x.at(i, 0) *= 4.0;
  for (std::size_t i = 0; i < 3000; ++i) y.at(i, 0) *= 4.0;
  CHECK(representation_overlap(x, y) > 0.98);
  CHECK(std::abs(representation_overlap(x, x) - 1.0) < 1e-12);
  const Eigen::MatrixXd q = random_orthogonal(6, rng);
  CHECK(std::abs(representation_overlap(x, y) -
                 representation_overlap(from_eigen(to_eigen(x) * q), from_eigen(0.5 * to_eigen(y) * q))) < 1e-12);
  CHECK(code_of([&] { (void)representation_overlap(x, Tensor({4, 6}, 1.0)); }) == ErrorCode::undefined_value);
  CHECK(code_of([&] { (void)representation_overlap(x, random_tensor(10, 5, rng)); }) == ErrorCode::input);
}

TEST_CASE("cka report of a checkpoint with itself is one per layer", "[metrics][cka]") {
  const ModelConfig cfg = tiny_model(3, 16, 2);
  Rng rng(11);
  const EvalContext ctx(init_model(cfg, rng), cfg);
  const CKAReport r = cka_report(ctx, ctx, random_batch(cfg, 40, 8, rng));
  REQUIRE(r.cka.size() == 3);
  for (double c : r.cka) CHECK(std::abs(c - 1.0) < 1e-9);
  CHECK(r.bands == std::vector<LayerBand>{LayerBand::lower, LayerBand::intermediate, LayerBand::upper});
}

TEST_CASE("pc rotation examples", "[metrics][pc]") {
  Rng rng(12);
  Tensor a = random_tensor(400, 4, rng);
  const std::vector<double> scale{3.0, 1.0, 0.2, 0.1};
  for (std::size_t i = 0; i < 400; ++i)
    for (std::size_t j = 0; j < 4; ++j) a.at(i, j) *= scale[j];
  for (double angle : pc_rotation(a, a, 3)) CHECK(std::abs(angle) < 1e-6);

  const double th = 30.0 * std::numbers::pi / 180.0;
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(4, 4);
  rot(0, 0) = std::cos(th);
  rot(0, 1) = std::sin(th);
  rot(1, 0) = -std::sin(th);
  rot(1, 1) = std::cos(th);
  const auto r = pc_rotation(a, from_eigen(to_eigen(a) * rot), 2);
  CHECK(std::abs(r[0] - 30.0) < 0.5);
  CHECK(std::abs(r[1] - 30.0) < 0.5);

  for (int trial = 0; trial < 10; ++trial)
    for (double angle : pc_rotation(random_tensor(50, 6, rng), random_tensor(50, 6, rng), 4)) {
      CHECK(angle >= 0.0);
      CHECK(angle <= 90.0);
    }
  CHECK(code_of([&] { (void)pc_rotation(a, a, 5); }) == ErrorCode::input);
  const Tensor rank1({400, 4}, 1.0);
  CHECK(code_of([&] { (void)pc_rotation(rank1, a, 2); }) == ErrorCode::numeric);
}

TEST_CASE("task relevance matches activation perturbation", "[metrics][relevance]") {
  ModelConfig cfg = tiny_model(2, 8, 2);
  Rng rng(13);
  const ParameterSet p = init_model(cfg, rng);
  const Batch val = random_batch(cfg, 3, 5, rng);
  const std::size_t layer = 1, B = 3, T = 5, F = cfg.d_ff;
  const TaskRelevance rel = task_relevance(p, cfg, val, layer);
  REQUIRE(rel.score.size() == F);

  const double h = 1e-5;
  auto loss_with = [&](std::size_t idx, double delta) {
    ForwardOptions o;
    o.patch = ActivationPatch{PatchSite::ffn_activation, layer, Tensor({B, T, F}, 0.0)};
    o.patch->delta[idx] = delta;
    return loss(forward(p, cfg, val, o), val.labels);
  };
  for (std::size_t n = 0; n < F; ++n) {
    double fd = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t idx = (b * T + t) * F + n;
        fd += std::abs((loss_with(idx, h) - loss_with(idx, -h)) / (2 * h));
      }
    fd /= static_cast<double>(B);
    INFO("neuron " << n << " score " << rel.score[n] << " fd " << fd);
    CHECK(rel_err(rel.score[n], fd, 1e-9) < 1e-3);
  }
}

TEST_CASE("task relevance flags a quarter and zeroes dead neurons", "[metrics][relevance]") {
  ModelConfig cfg = tiny_model(2, 8, 2);
  cfg.d_ff = 18;
  Rng rng(14);
  ParameterSet p = init_model(cfg, rng);
  Tensor& out = p.at({0, Component::ffn_out, "w"});
  for (std::size_t j = 0; j < cfg.d_model; ++j) out.at(7, j) = 0.0;
  const TaskRelevance rel = task_relevance(p, cfg, random_batch(cfg, 6, 6, rng), 0);
  CHECK(rel.score[7] == 0.0);
  CHECK(std::count(rel.top.begin(), rel.top.end(), true) == 5);
  CHECK_FALSE(rel.top[7]);
  cfg.moe = MoeConfig{};
  CHECK(code_of([&] { (void)task_relevance(p, cfg, random_batch(cfg, 2, 4, rng), 0); }) == ErrorCode::config);
}

TEST_CASE("gradient cosine examples", "[metrics][gradient]") {
  const ModelConfig cfg = tiny_model(2, 8, 2);
  Rng rng(15);
  const ParameterSet p = init_model(cfg, rng);
  const GradientSnapshot g = grad(classification_loss(cfg, random_batch(cfg, 4, 6, rng)), p);
  GradientSnapshot neg = g;
  vec::scale(-1.0, neg.flat);
  CHECK(gradient_cosine(g.flat, g.flat) == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(gradient_cosine(g.flat, neg.flat) == Catch::Approx(-1.0).epsilon(1e-12));
  const auto seg = gradient_cosine_per_segment(g, neg);
  REQUIRE(seg.size() == g.segments.size());
  CHECK(conflict_fraction(seg) == 1.0);
  CHECK(conflict_fraction(gradient_cosine_per_segment(g, g)) == 0.0);
  CHECK(code_of([&] { (void)gradient_cosine(g.flat, std::vector<double>(g.flat.size(), 0.0)); }) ==
        ErrorCode::undefined_value);
  const std::vector<double> partial{0.5, -0.2, std::numeric_limits<double>::quiet_NaN()};
  CHECK(conflict_fraction(partial) == 0.5);
}

TEST_CASE("interference threshold", "[metrics][gradient]") {
  CHECK(is_interference(-0.31));
  CHECK_FALSE(is_interference(-0.29));
  CHECK_FALSE(is_interference(-0.3));
}

TEST_CASE("early warning examples", "[metrics][stats]") {
  std::vector<RunPoint> constant(6, RunPoint{0.2, 0.0});
  for (std::size_t i = 0; i < constant.size(); ++i) constant[i].final_forgetting = 0.1 * static_cast<double>(i);
  CHECK(code_of([&] { (void)early_warning(std::span<const RunPoint>(constant)); }) == ErrorCode::undefined_value);

  std::vector<RunPoint> anti;
  for (int i = 0; i < 10; ++i) anti.push_back({0.1 * i, 1.0 - 0.2 * i});
  const StatResult r = early_warning(std::span<const RunPoint>(anti));
  CHECK(r.r == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK(r.p < 0.01);
  CHECK(r.n == 10);

  const std::vector<RunPoint> few(anti.begin(), anti.begin() + 4);
  CHECK(code_of([&] { (void)early_warning(std::span<const RunPoint>(few)); }) == ErrorCode::input);
}

TEST_CASE("summarize run averages cosines and final forgetting", "[metrics][stats]") {
  ExperimentRecord r = lattice({{0.9, 0.1, 0.2}, {0.6, 0.8, 0.3}, {0.5, 0.4, 0.7}});
  r.logs.resize(3);
  r.logs[1].cosine_probes = {{0, 0.2}, {1, 0.4}};
  r.logs[2].cosine_probes = {{2, -0.1}};
  const RunPoint pt = summarize_run(r);
  CHECK(pt.first_epoch_cosine == Catch::Approx((0.3 - 0.1) / 2).margin(1e-15));
  CHECK(pt.final_forgetting == Catch::Approx(((0.9 - 0.5) + (0.8 - 0.4)) / 2).margin(1e-15));
}

TEST_CASE("pearson examples", "[metrics][stats]") {
  const std::vector<double> xs{-2, -1, 0, 1, 2};
  std::vector<double> ys;
  for (double x : xs) ys.push_back(2 * x + 1);
  const StatResult lin = pearson(xs, ys);
  CHECK(lin.r == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(lin.p < 1e-12);

  // z is centered, orthogonal to xs and of equal norm, so r is exact.
  const std::vector<double> z{1, -2, 0, 2, -1};
  const double rho = 0.878;
  std::vector<double> yr;
  for (std::size_t i = 0; i < 5; ++i) yr.push_back(rho * xs[i] + std::sqrt(1 - rho * rho) * z[i]);
  const StatResult s = pearson(xs, yr);
  CHECK(s.r == Catch::Approx(rho).epsilon(1e-12));
  const double t = std::sqrt(3.0) * rho / std::sqrt(1 - rho * rho);
  const double oracle = 2.0 * (1.0 - t3_cdf(t));
  CHECK(s.p == Catch::Approx(oracle).epsilon(1e-9));
  CHECK(std::abs(s.p - 0.05) < 1e-3);
  CHECK(pearson(xs, yr, 2.0).p == Catch::Approx(2 * oracle).epsilon(1e-9));
  CHECK(pearson(xs, yr, 100.0).p == 1.0);

  Rng rng(16);
  int large = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(100), b(100);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const StatResult q = pearson(a, b);
    large += std::abs(q.r) >= 0.3;
    CHECK(q.p >= 0.0);
    CHECK(q.p <= 1.0);
  }
  CHECK(large <= 1);
  CHECK(code_of([&] { (void)pearson(xs, std::vector<double>(5, 1.0)); }) == ErrorCode::undefined_value);
  CHECK(code_of([&] { (void)pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2}); }) == ErrorCode::input);
}

TEST_CASE("linearity examples", "[metrics][linearity]") {
  std::vector<double> t, lin, para;
  for (int i = 0; i < 21; ++i) {
    const double x = i / 20.0;
    t.push_back(x);
    lin.push_back(2.0 - 1.5 * x);
    para.push_back((x - 0.5) * (x - 0.5));
  }
  CHECK(linearity_from_curve(t, lin).index == Catch::Approx(1.0).epsilon(1e-12));
  const LinearityReport p = linearity_from_curve(t, para);
  CHECK(p.r2_linear < 1e-12);
  CHECK(p.r2_quadratic == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(p.index < 1e-12);

  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(t.size());
    for (auto& v : y) v = rng.normal();
    const LinearityReport r = linearity_from_curve(t, y);
    CHECK(r.r2_quadratic >= r.r2_linear - 1e-12);
    CHECK(r.index >= 0.0);
    CHECK(r.index <= 1.0);
  }

  const ModelConfig cfg = tiny_model(2, 8, 2);
  const ParameterSet a = init_model(cfg, rng);
  const Batch b = random_batch(cfg, 8, 6, rng);
  const LinearityReport same = linearity(a, a, cfg, b);
  CHECK(same.loss.size() == 20);
  CHECK(same.index == 1.0);
  const ParameterSet other = init_model(tiny_model(1, 8, 2), rng);
  CHECK(code_of([&] { (void)linearity(a, other, cfg, b); }) == ErrorCode::config);
}

TEST_CASE("routing change examples", "[metrics][routing]") {
  ModelConfig cfg = tiny_model(2, 16, 2);
  cfg.moe = MoeConfig{8, 2};
  Rng rng(18);
  const ParameterSet a = init_model(cfg, rng);
  const Batch b = random_batch(cfg, 16, 8, rng);
  const ActivationTrace ta = forward(a, cfg, b);
  CHECK(routing_change(ta, forward(a, cfg, b)) == 0.0);
  ParameterSet c = a;
  for (int l = 0; l < 2; ++l)
    for (double& x : c.at({l, Component::router, "w"}).data()) x = rng.normal() / 4.0;
  const double f = routing_change(ta, forward(c, cfg, b));
  CHECK(f > 0.5);
  CHECK(f <= 1.0);

  const ModelConfig dense = tiny_model(2, 16, 2);
  const ParameterSet d = init_model(dense, rng);
  const ActivationTrace td = forward(d, dense, b);
  CHECK(code_of([&] { (void)routing_change(td, td); }) == ErrorCode::config);
}

TEST_CASE("metrics are bit-identical on repetition", "[metrics][determinism]") {
  const ModelConfig cfg = tiny_model(2, 16, 2);
  Rng rng(19);
  const ParameterSet a = init_model(cfg, rng), b = init_model(cfg, rng);
  const Batch probe = random_batch(cfg, 8, 8, rng);
  const AttentionStats x = attention_stats(a, b, cfg, probe), y = attention_stats(a, b, cfg, probe);
  REQUIRE(x.heads.size() == y.heads.size());
  for (std::size_t i = 0; i < x.heads.size(); ++i) {
    CHECK(x.heads[i].entropy_post == y.heads[i].entropy_post);
    CHECK(x.heads[i].specialization_pre == y.heads[i].specialization_pre);
    CHECK(x.heads[i].pattern_correlation == y.heads[i].pattern_correlation);
  }
  CHECK(task_relevance(a, cfg, probe, 1).score == task_relevance(a, cfg, probe, 1).score);
}
