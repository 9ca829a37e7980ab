// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "forgetlab/error.hpp"

namespace forgetlab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  require(t.rank() == 2, ErrorCode::shape, "expected an [n, d] matrix, got " + shape_string(t.shape()));
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

Eigen::MatrixXd centered(const Tensor& t) {
  Eigen::MatrixXd m = as_matrix(t);
  m.rowwise() -= m.colwise().mean();
  return m;
}

void check_same_config(const ParameterSet& a, const ParameterSet& b) {
  require(a.total_dim() == b.total_dim() && a.entries().size() == b.entries().size(), ErrorCode::config,
          "checkpoints come from different model configs");
  auto ia = a.entries().begin();
  for (auto ib = b.entries().begin(); ib != b.entries().end(); ++ia, ++ib)
    require(ia->first == ib->first && ia->second.shape() == ib->second.shape(), ErrorCode::config,
            "checkpoints differ in tensor " + to_string(ib->first));
}

double entropy_bits(std::span<const double> counts, double total) {
  double h = 0.0;
  for (double c : counts)
    if (c > 0.0) h -= (c / total) * std::log2(c / total);
  return h;
}

}  // namespace

double accuracy(const Checkpoint& checkpoint, const ModelConfig& config, const TaskSpec& task, Split split) {
  return batch_accuracy(EvalContext(checkpoint.params, config), generate_split(task, split));
}

std::vector<StageValue> forgetting_magnitude(const ExperimentRecord& record, std::size_t task_index) {
  const double post = record.accuracy(task_index, task_index);
  std::vector<StageValue> out;
  for (std::size_t s = task_index; s < record.stages.size(); ++s) out.push_back({s, post - record.accuracy(s, task_index)});
  return out;
}

HeadDistances head_weight_distances(const ParameterSet& a, const ParameterSet& b, const ModelConfig& config) {
  config.validate();
  check_same_config(a, b);
  const std::size_t D = config.d_model, H = config.n_heads, dh = config.head_dim();
  HeadDistances out;
  out.distance.assign(config.total_heads(), 0.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const int li = static_cast<int>(l);
    for (std::size_t h = 0; h < H; ++h) {
      double sq = 0.0;
      for (Component c : {Component::attn_q, Component::attn_k, Component::attn_v}) {
        const Tensor& wa = a.at({li, c, "w"});
        const Tensor& wb = b.at({li, c, "w"});
        for (std::size_t r = 0; r < D; ++r)
          for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) sq += std::pow(wa.at(r, j) - wb.at(r, j), 2);
      }
      const Tensor& oa = a.at({li, Component::attn_o, "w"});
      const Tensor& ob = b.at({li, Component::attn_o, "w"});
      for (std::size_t r = h * dh; r < (h + 1) * dh; ++r)
        for (std::size_t j = 0; j < D; ++j) sq += std::pow(oa.at(r, j) - ob.at(r, j), 2);
      out.distance[l * H + h] = std::sqrt(sq);
    }
  }
  const double n = static_cast<double>(out.distance.size());
  out.mean = std::accumulate(out.distance.begin(), out.distance.end(), 0.0) / n;
  double var = 0.0;
  for (double d : out.distance) var += (d - out.mean) * (d - out.mean);
  out.stddev = std::sqrt(var / n);
  out.disrupted.assign(out.distance.size(), false);
  if (out.stddev > 0.0)
    for (std::size_t i = 0; i < out.distance.size(); ++i)
      out.disrupted[i] = out.distance[i] > out.mean + 2.5 * out.stddev;
  return out;
}

double row_entropy_bits(std::span<const double> row) {
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log2(p);
  return std::max(h, 0.0);
}

Tensor attention_entropy(const ActivationTrace& trace) {
  const std::size_t L = trace.attention.size();
  require(L > 0 && !trace.attention[0].empty(), ErrorCode::input, "trace has no attention maps");
  const std::size_t B = trace.attention[0].dim(0), H = trace.attention[0].dim(1), T = trace.attention[0].dim(2);
  Tensor out({L, H}, 0.0);
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& p = trace.attention[l];
    for (std::size_t h = 0; h < H; ++h) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < T; ++i)
          acc += row_entropy_bits(std::span<const double>(&p[((b * H + h) * T + i) * T], i + 1));
      out.at(l, h) = acc / static_cast<double>(B * T);
    }
  }
  return out;
}

std::vector<int> vocab_quartiles(std::span<const std::int32_t> tokens, std::size_t vocab_size) {
  std::vector<int> out(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    out[i] = static_cast<int>(static_cast<std::size_t>(tokens[i]) * 4 / vocab_size);
  return out;
}

double specialization_from_samples(std::span<const int> classes, std::span<const double> mass, std::size_t n_bins) {
  require(classes.size() == mass.size() && !mass.empty(), ErrorCode::input, "specialization: sample size mismatch");
  require(n_bins >= 2, ErrorCode::input, "specialization: need at least 2 bins");
  const std::size_t n = mass.size();
  std::vector<double> sorted(mass.begin(), mass.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (std::size_t q = 1; q < n_bins; ++q) edges.push_back(sorted[std::min(n - 1, q * n / n_bins)]);

  std::map<int, std::size_t> class_index;
  for (int c : classes) class_index.emplace(c, 0);
  std::size_t k = 0;
  for (auto& [c, idx] : class_index) idx = k++;
  const std::size_t C = class_index.size();
  std::vector<double> joint(C * n_bins, 0.0), pc(C, 0.0), pb(n_bins, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto bin = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), mass[i]) - edges.begin());
    const std::size_t c = class_index[classes[i]];
    joint[c * n_bins + bin] += 1.0;
    pc[c] += 1.0;
    pb[bin] += 1.0;
  }
  const double total = static_cast<double>(n);
  const double hc = entropy_bits(pc, total), hb = entropy_bits(pb, total);
  if (hc <= 0.0 || hb <= 0.0) return 0.0;
  const double mi = hc + hb - entropy_bits(joint, total);
  return std::clamp(mi / std::min(hc, hb), 0.0, 1.0);
}

Tensor specialization_index(const ActivationTrace& trace, std::span<const int> token_classes, std::size_t n_bins) {
  const std::size_t L = trace.attention.size();
  require(L > 0 && !trace.attention[0].empty(), ErrorCode::input, "trace has no attention maps");
  const std::size_t B = trace.attention[0].dim(0), H = trace.attention[0].dim(1), T = trace.attention[0].dim(2);
  require(token_classes.size() == B * T, ErrorCode::input, "token class count differs from batch * seq");
  Tensor out({L, H}, 0.0);
  std::vector<double> mass(B * T);
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& p = trace.attention[l];
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t i = j; i < T; ++i) s += p[((b * H + h) * T + i) * T + j];
          mass[b * T + j] = s / static_cast<double>(T - j);
        }
      out.at(l, h) = specialization_from_samples(token_classes, mass, n_bins);
    }
  }
  return out;
}

double map_correlation(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::input, "map_correlation: size mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  // Exact ties can leave a rounding residue in the sums of squares.
  if (*amin == *amax || *bmin == *bmax || saa <= 0.0 || sbb <= 0.0) return kNaN;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> mean_attention_map(const ActivationTrace& trace, std::size_t layer, std::size_t head) {
  const Tensor& p = trace.attention.at(layer);
  require(!p.empty(), ErrorCode::input, "trace has no attention maps at this layer");
  const std::size_t B = p.dim(0), H = p.dim(1), T = p.dim(2);
  std::vector<double> out;
  out.reserve(T * (T + 1) / 2);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) s += p[((b * H + head) * T + i) * T + j];
      out.push_back(s / static_cast<double>(B));
    }
  return out;
}

Tensor attention_pattern_correlation(const ActivationTrace& a, const ActivationTrace& b) {
  const std::size_t L = a.attention.size();
  require(L == b.attention.size() && L > 0, ErrorCode::input, "traces differ in layer count");
  const std::size_t H = a.attention[0].dim(1);
  require(a.attention[0].shape() == b.attention[0].shape(), ErrorCode::input, "traces must share inputs");
  Tensor out({L, H}, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h) out.at(l, h) = map_correlation(mean_attention_map(a, l, h), mean_attention_map(b, l, h));
  return out;
}

AttentionStats attention_stats(const ParameterSet& pre, const ParameterSet& post, const ModelConfig& config,
                               const Batch& probe) {
  const HeadDistances dist = head_weight_distances(pre, post, config);
  const ActivationTrace ta = forward(pre, config, probe);
  const ActivationTrace tb = forward(post, config, probe);
  const Tensor ea = attention_entropy(ta), eb = attention_entropy(tb);
  const auto classes = vocab_quartiles(probe.tokens, config.vocab_size);
  const Tensor sa = specialization_index(ta, classes), sb = specialization_index(tb, classes);
  const Tensor corr = attention_pattern_correlation(ta, tb);
  AttentionStats out;
  for (std::size_t l = 0; l < config.n_layers; ++l)
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const std::size_t i = l * config.n_heads + h;
      out.heads.push_back({{l, h}, dist.distance[i], ea.at(l, h), eb.at(l, h), sa.at(l, h), sb.at(l, h),
                           corr.at(l, h), dist.disrupted[i]});
    }
  return out;
}

double cka(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0), ErrorCode::input,
          "cka: activation sets must share the sample count");
  require(a.dim(0) >= 2, ErrorCode::input, "cka: need at least 2 samples");
  const Eigen::MatrixXd x = centered(a), y = centered(b);
  const double xy = (x.transpose() * y).squaredNorm();
  const double xx = (x.transpose() * x).norm();
  const double yy = (y.transpose() * y).norm();
  if (!(xx > 0.0) || !(yy > 0.0)) fail(ErrorCode::undefined_value, "cka: zero-variance activations");
  return std::clamp(xy / (xx * yy), 0.0, 1.0);
}

double representation_overlap(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorCode::input,
          "representation_overlap: feature dims differ");
  require(a.dim(0) >= 2 && b.dim(0) >= 2, ErrorCode::input, "representation_overlap: need at least 2 samples each");
  const Eigen::MatrixXd x = centered(a), y = centered(b);
  const Eigen::MatrixXd cx = x.transpose() * x, cy = y.transpose() * y;
  const double nx = cx.norm(), ny = cy.norm();
  if (!(nx > 0.0) || !(ny > 0.0)) fail(ErrorCode::undefined_value, "representation_overlap: zero-variance activations");
  return std::clamp((cx.cwiseProduct(cy)).sum() / (nx * ny), 0.0, 1.0);
}

const char* to_string(LayerBand b) noexcept {
  switch (b) {
    case LayerBand::lower: return "lower";
    case LayerBand::intermediate: return "intermediate";
    case LayerBand::upper: return "upper";
  }
  return "lower";
}

LayerBand layer_band(std::size_t layer, std::size_t n_layers) noexcept {
  if (3 * layer < n_layers) return LayerBand::lower;
  if (3 * layer >= 2 * n_layers) return LayerBand::upper;
  return LayerBand::intermediate;
}

CKAReport cka_report(const EvalContext& a, const EvalContext& b, const Batch& probe) {
  require(a.config == b.config, ErrorCode::config, "cka_report: config mismatch");
  CKAReport out;
  out.n_samples = probe.size();
  for (std::size_t l = 0; l < a.config.n_layers; ++l) {
    out.cka.push_back(cka(collect_hidden(a, probe, l), collect_hidden(b, probe, l)));
    out.bands.push_back(layer_band(l, a.config.n_layers));
  }
  return out;
}

std::vector<double> pc_rotation(const Tensor& a, const Tensor& b, std::size_t k) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1), ErrorCode::input,
          "pc_rotation: feature dims differ");
  const std::size_t d = a.dim(1);
  require(k <= d, ErrorCode::input, "pc_rotation: k exceeds feature dim");
  require(a.dim(0) > k && b.dim(0) > k, ErrorCode::input, "pc_rotation: need more samples than k");
  if (k == 0) return {};
  auto principal = [&](const Tensor& t, const char* name) {
    const Eigen::MatrixXd x = centered(t);
    const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(t.dim(0) - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    require(es.info() == Eigen::Success, ErrorCode::numeric, "pc_rotation: eigensolver failed");
    const double top = es.eigenvalues()[static_cast<Eigen::Index>(d - 1)];
    std::string deficient;
    for (std::size_t i = 0; i < k; ++i) {
      const double lam = es.eigenvalues()[static_cast<Eigen::Index>(d - 1 - i)];
      // A component is usable when it carries variance and is separated from the next one.
      const double next = i + 1 < d ? es.eigenvalues()[static_cast<Eigen::Index>(d - 2 - i)] : 0.0;
      if (!(top > 0.0) || lam <= 1e-12 * top || lam - next <= 1e-10 * top)
        deficient += (deficient.empty() ? "" : ",") + std::to_string(i);
    }
    if (!deficient.empty())
      fail(ErrorCode::numeric, std::string("pc_rotation: degenerate covariance in ") + name + ", components " + deficient);
    Eigen::MatrixXd u(d, k);
    for (std::size_t i = 0; i < k; ++i) u.col(static_cast<Eigen::Index>(i)) = es.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - i));
    return u;
  };
  const Eigen::MatrixXd ua = principal(a, "first set"), ub = principal(b, "second set");
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const double sign = ua.col(col).dot(ub.col(col)) < 0.0 ? -1.0 : 1.0;
    // Chord form of arccos(|u.w|); stays accurate near 0 degrees.
    const double chord = (ua.col(col) - sign * ub.col(col)).norm();
    out[i] = 2.0 * std::asin(std::min(1.0, chord / 2.0)) * 180.0 / std::numbers::pi;
  }
  return out;
}

TaskRelevance task_relevance(const ParameterSet& params, const ModelConfig& config, const Batch& val,
                             std::size_t layer) {
  require(!config.moe, ErrorCode::config, "task_relevance: dense feedforward required");
  require(layer < config.n_layers, ErrorCode::input, "task_relevance: layer out of range");
  require(!val.empty(), ErrorCode::input, "task_relevance: empty validation split");
  const std::size_t B = val.size(), T = val.seq_len, F = config.d_ff;
  ForwardOptions options;
  options.patch = ActivationPatch{PatchSite::ffn_activation, layer, Tensor({B, T, F}, 0.0)};
  ad::Tape tape;
  ParamVars vars(tape, params, false);
  ForwardGraph g = forward_graph(vars, config, val.tokens, B, T, options, true);
  ad::Var loss = ad::cross_entropy(g.logits, val.labels);
  tape.backward(loss);
  const Tensor& grad = tape.grad(g.patch);

  TaskRelevance out;
  out.score.assign(F, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < F; ++n) out.score[n] += std::abs(grad[(b * T + t) * F + n]);
  for (double& s : out.score) s /= static_cast<double>(B);
  std::vector<std::size_t> order(F);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return out.score[x] > out.score[y]; });
  out.top.assign(F, false);
  for (std::size_t i = 0; i < (F + 3) / 4; ++i) out.top[order[i]] = true;
  return out;
}

double gradient_cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::shape, "gradient_cosine: dims differ");
  const double na = vec::norm(a), nb = vec::norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorCode::undefined_value, "gradient_cosine: zero-norm gradient");
  return std::clamp(vec::dot(a, b) / (na * nb), -1.0, 1.0);
}

std::vector<double> gradient_cosine_per_segment(const GradientSnapshot& a, const GradientSnapshot& b) {
  require(a.flat.size() == b.flat.size() && a.segments.size() == b.segments.size(), ErrorCode::shape,
          "gradient_cosine: snapshots differ in layout");
  std::vector<double> out;
  for (std::size_t i = 0; i < a.segments.size(); ++i) {
    const auto sa = a.segment(i), sb = b.segment(i);
    const double na = vec::norm(sa), nb = vec::norm(sb);
    out.push_back(na > 0.0 && nb > 0.0 ? std::clamp(vec::dot(sa, sb) / (na * nb), -1.0, 1.0) : kNaN);
  }
  return out;
}

double conflict_fraction(std::span<const double> segment_cosines) {
  std::size_t defined = 0, negative = 0;
  for (double c : segment_cosines) {
    if (std::isnan(c)) continue;
    ++defined;
    negative += c < 0.0;
  }
  if (defined == 0) fail(ErrorCode::undefined_value, "conflict_fraction: no defined segment cosines");
  return static_cast<double>(negative) / static_cast<double>(defined);
}

StatResult pearson(std::span<const double> xs, std::span<const double> ys, double bonferroni_m) {
  require(xs.size() == ys.size(), ErrorCode::input, "pearson: series lengths differ");
  require(xs.size() >= 3, ErrorCode::input, "pearson: need n >= 3");
  require(bonferroni_m >= 1.0, ErrorCode::input, "pearson: bonferroni_m must be >= 1");
  require(vec::all_finite(xs) && vec::all_finite(ys), ErrorCode::input, "pearson: non-finite values");
  const double r = map_correlation(xs, ys);
  if (std::isnan(r)) fail(ErrorCode::undefined_value, "pearson: zero variance");
  StatResult out;
  out.r = r;
  out.n = xs.size();
  out.bonferroni_m = bonferroni_m;
  const double df = static_cast<double>(out.n - 2);
  double p = 0.0;
  if (std::abs(r) < 1.0) {
    const double t = std::abs(r) * std::sqrt(df / (1.0 - r * r));
    p = 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
  }
  out.p = std::min(1.0, p * bonferroni_m);
  return out;
}

RunPoint summarize_run(const ExperimentRecord& record) {
  const std::size_t n = record.n_tasks();
  require(n >= 2 && record.stages.size() == n && record.logs.size() == n, ErrorCode::data,
          "run " + record.sequence_id + " lacks a complete multi-task lattice");
  RunPoint p;
  double cos_sum = 0.0;
  std::size_t cos_n = 0;
  for (std::size_t s = 1; s < n; ++s) {
    const double c = record.logs[s].first_epoch_mean_cosine();
    if (std::isfinite(c)) {
      cos_sum += c;
      ++cos_n;
    }
  }
  p.first_epoch_cosine = cos_n ? cos_sum / static_cast<double>(cos_n) : kNaN;
  double f = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) f += record.accuracy(j, j) - record.accuracy(n - 1, j);
  p.final_forgetting = f / static_cast<double>(n - 1);
  return p;
}

StatResult early_warning(std::span<const RunPoint> points) {
  require(points.size() >= 5, ErrorCode::input,
          "early_warning: need >= 5 runs, got " + std::to_string(points.size()));
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p.first_epoch_cosine);
    ys.push_back(p.final_forgetting);
  }
  return pearson(xs, ys);
}

StatResult early_warning(std::span<const ExperimentRecord> runs) {
  std::vector<RunPoint> pts;
  for (const auto& r : runs) pts.push_back(summarize_run(r));
  return early_warning(std::span<const RunPoint>(pts));
}

LinearityReport linearity_from_curve(std::span<const double> t, std::span<const double> loss) {
  require(t.size() == loss.size() && t.size() >= 3, ErrorCode::input, "linearity: need >= 3 curve points");
  require(vec::all_finite(loss), ErrorCode::numeric, "linearity: non-finite loss on path");
  LinearityReport rep;
  rep.t.assign(t.begin(), t.end());
  rep.loss.assign(loss.begin(), loss.end());
  const auto n = static_cast<Eigen::Index>(t.size());
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(loss.data(), n);
  const double ss_tot = (y.array() - y.mean()).square().sum();
  if (ss_tot <= 1e-300 * std::max(1.0, y.squaredNorm())) {
    rep.r2_linear = rep.r2_quadratic = rep.index = 1.0;
    return rep;
  }
  auto r2 = [&](int degree) {
    Eigen::MatrixXd x(n, degree + 1);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int d = 0; d <= degree; ++d) x(i, d) = std::pow(t[static_cast<std::size_t>(i)], d);
    const Eigen::VectorXd beta = x.colPivHouseholderQr().solve(y);
    const double ss_res = (y - x * beta).squaredNorm();
    return std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
  };
  rep.r2_linear = r2(1);
  rep.r2_quadratic = r2(2);
  rep.index = std::clamp(rep.r2_linear / std::max(rep.r2_quadratic, 1e-12), 0.0, 1.0);
  return rep;
}

LinearityReport linearity(const ParameterSet& a, const ParameterSet& b, const ModelConfig& config,
                          const Batch& batch, std::size_t n_points) {
  check_same_config(a, b);
  require(n_points >= 3, ErrorCode::input, "linearity: need >= 3 points");
  const auto fa = flatten(a), fb = flatten(b);
  const LossFn loss_fn = classification_loss(config, batch);
  std::vector<double> ts, ls, theta(fa.size());
  for (std::size_t i = 0; i < n_points; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n_points - 1);
    for (std::size_t j = 0; j < fa.size(); ++j) theta[j] = fa[j] + t * (fb[j] - fa[j]);
    ts.push_back(t);
    ls.push_back(evaluate(loss_fn, unflatten(theta, a)));
  }
  return linearity_from_curve(ts, ls);
}

double routing_change(const ActivationTrace& a, const ActivationTrace& b) {
  require(!a.routing.empty() && !b.routing.empty(), ErrorCode::config, "routing_change: model has no MoE layers");
  require(a.routing.size() == b.routing.size(), ErrorCode::input, "routing_change: traces differ in layers");
  std::size_t slots = 0, changed = 0;
  for (std::size_t l = 0; l < a.routing.size(); ++l) {
    const auto& ra = a.routing[l];
    const auto& rb = b.routing[l];
    require(ra.experts.size() == rb.experts.size() && ra.top_k == rb.top_k, ErrorCode::input,
            "routing_change: traces must share inputs");
    const std::size_t k = ra.top_k;
    for (std::size_t n = 0; n < ra.experts.size() / k; ++n) {
      std::vector<std::int32_t> ea(ra.experts.begin() + static_cast<std::ptrdiff_t>(n * k),
                                   ra.experts.begin() + static_cast<std::ptrdiff_t>((n + 1) * k));
      std::vector<std::int32_t> eb(rb.experts.begin() + static_cast<std::ptrdiff_t>(n * k),
                                   rb.experts.begin() + static_cast<std::ptrdiff_t>((n + 1) * k));
      std::sort(ea.begin(), ea.end());
      std::sort(eb.begin(), eb.end());
      ++slots;
      changed += ea != eb;
    }
  }
  return slots ? static_cast<double>(changed) / static_cast<double>(slots) : 0.0;
}

}  // namespace forgetlab
