// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "forgetlab/error.hpp"

namespace forgetlab {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

}  // namespace

std::vector<HeadId> select_disrupted(const AttentionStats& stats, double fraction) {
  require(!stats.heads.empty(), ErrorCode::input, "select_disrupted: empty head statistics");
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::input, "select_disrupted: fraction must lie in (0, 1]");
  std::vector<std::size_t> order(stats.heads.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ha = stats.heads[a];
    const auto& hb = stats.heads[b];
    if (ha.weight_distance != hb.weight_distance) return ha.weight_distance > hb.weight_distance;
    return ha.head < hb.head;
  });
  const double n = static_cast<double>(stats.heads.size());
  // Guard against fraction * n landing a hair above an integer.
  const auto count = std::min(stats.heads.size(), static_cast<std::size_t>(std::ceil(fraction * n - 1e-9)));
  std::vector<HeadId> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(stats.heads[order[i]].head);
  std::sort(out.begin(), out.end());
  return out;
}

EvalContext ablate(const EvalContext& ctx, std::span<const HeadId> heads) {
  EvalContext out = ctx;
  for (const auto& h : heads) {
    require(h.layer < ctx.config.n_layers && h.head < ctx.config.n_heads, ErrorCode::input,
            "ablate: head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) + ") out of range");
    out.options.mask.disabled.insert(h);
  }
  return out;
}

AffineMap fit_realignment(const Tensor& acts_post, const Tensor& acts_pre, std::size_t layer, double ridge) {
  require(acts_post.rank() == 2 && acts_post.shape() == acts_pre.shape(), ErrorCode::shape,
          "fit_realignment: activation sets must both be [n, d]");
  const auto n = static_cast<Eigen::Index>(acts_post.dim(0));
  const auto d = static_cast<Eigen::Index>(acts_post.dim(1));
  require(n > d, ErrorCode::conditioning,
          "fit_realignment: need more samples than features (n = " + std::to_string(n) + ", d = " + std::to_string(d) + ")");
  require(ridge >= 0.0, ErrorCode::input, "fit_realignment: ridge must be >= 0");
  const auto x = as_matrix(acts_post);
  const auto y = as_matrix(acts_pre);

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + d + 1, d + 1);
  a.topLeftCorner(n, d) = x;
  a.block(0, d, n, 1).setOnes();
  a.bottomRows(d + 1).diagonal().setConstant(std::sqrt(ridge));
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + d + 1, d);
  rhs.topRows(n) = y;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  const auto r = qr.matrixR().diagonal().cwiseAbs();
  require(r.minCoeff() > 1e-7 * r.maxCoeff(), ErrorCode::conditioning,
          "fit_realignment: activations rank-deficient beyond ridge damping");
  const Eigen::MatrixXd beta = qr.solve(rhs);  // [d + 1, d]

  AffineMap map;
  map.layer = layer;
  map.linear = Tensor({acts_post.dim(1), acts_post.dim(1)}, 0.0);
  map.offset.assign(acts_post.dim(1), 0.0);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) map.linear.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = beta(j, i);
    map.offset[static_cast<std::size_t>(i)] = beta(d, i);
  }
  require(map.linear.all_finite() && vec::all_finite(map.offset), ErrorCode::conditioning,
          "fit_realignment: non-finite solution");
  const Tensor mapped = apply_map(map, acts_post);
  double sq = 0.0;
  for (std::size_t i = 0; i < mapped.size(); ++i) sq += std::pow(mapped[i] - acts_pre[i], 2);
  map.fit_residual = sq / static_cast<double>(n);
  return map;
}

Tensor apply_map(const AffineMap& map, const Tensor& acts) {
  const std::size_t d = map.offset.size();
  require(acts.rank() == 2 && acts.dim(1) == d, ErrorCode::shape, "apply_map: dimension mismatch");
  Tensor out({acts.dim(0), d}, 0.0);
  for (std::size_t r = 0; r < acts.dim(0); ++r)
    for (std::size_t i = 0; i < d; ++i) {
      double s = map.offset[i];
      for (std::size_t j = 0; j < d; ++j) s += map.linear.at(i, j) * acts.at(r, j);
      out.at(r, i) = s;
    }
  return out;
}

EvalContext apply_realignment(const EvalContext& ctx, const AffineMap& map) {
  require(map.layer < ctx.config.n_layers, ErrorCode::input, "apply_realignment: layer out of range");
  require(map.offset.size() == ctx.config.d_model && map.linear.shape() == Shape{ctx.config.d_model, ctx.config.d_model},
          ErrorCode::shape, "apply_realignment: map dimension differs from d_model");
  EvalContext out = ctx;
  out.options.hidden_maps.push_back(map);
  return out;
}

AffineMap inverse(const AffineMap& map) {
  const auto d = static_cast<Eigen::Index>(map.offset.size());
  require(map.linear.rank() == 2 && map.linear.dim(0) == map.offset.size(), ErrorCode::shape,
          "inverse: malformed map");
  const Eigen::MatrixXd w = as_matrix(map.linear);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(w);
  require(lu.isInvertible(), ErrorCode::conditioning, "inverse: map is singular");
  const Eigen::MatrixXd wi = lu.inverse();
  const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(map.offset.data(), d);
  const Eigen::VectorXd bi = -wi * b;
  AffineMap out;
  out.layer = map.layer;
  out.linear = Tensor(map.linear.shape(), 0.0);
  out.offset.resize(map.offset.size());
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) out.linear.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = wi(i, j);
    out.offset[static_cast<std::size_t>(i)] = bi[i];
  }
  return out;
}

double recovery_fraction(double acc_after, double acc_forgotten, double acc_post) {
  const double gap = acc_post - acc_forgotten;
  if (!(gap > 1e-12)) return std::numeric_limits<double>::quiet_NaN();
  return (acc_after - acc_forgotten) / gap;
}

double display_recovery(double raw) { return std::isnan(raw) ? raw : std::clamp(raw, -1.0, 2.0); }

}  // namespace forgetlab
