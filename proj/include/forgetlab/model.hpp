// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "forgetlab/autodiff.hpp"
#include "forgetlab/batch.hpp"
#include "forgetlab/params.hpp"
#include "forgetlab/rng.hpp"
#include "forgetlab/tensor.hpp"

namespace forgetlab {

enum class FfnKind { swiglu, gelu };

struct MoeConfig {
  std::size_t n_experts = 4;
  std::size_t top_k = 2;

  friend bool operator==(const MoeConfig&, const MoeConfig&) = default;
};

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 16;
  std::size_t n_classes = 4;
  FfnKind ffn = FfnKind::swiglu;
  std::optional<MoeConfig> moe;

  /// Throws ErrorCode::config on any violated invariant.
  void validate() const;
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  std::size_t total_heads() const noexcept { return n_layers * n_heads; }
  /// Output width of the ffn_in projection.
  std::size_t ffn_in_width() const noexcept { return ffn == FfnKind::swiglu ? 2 * d_ff : d_ff; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  auto operator<=>(const HeadId&) const = default;
  bool operator==(const HeadId&) const = default;
};

struct HeadMask {
  std::set<HeadId> disabled;

  bool contains(std::size_t layer, std::size_t head) const { return disabled.contains({layer, head}); }
  void validate(const ModelConfig& config) const;
};

/// h -> linear * h + offset on every position of one block output.
struct AffineMap {
  Tensor linear;               // [d, d]
  std::vector<double> offset;  // [d]
  std::size_t layer = 0;
  double fit_residual = 0.0;
};

enum class PatchSite { hidden, ffn_activation };

/// Additive perturbation of an intermediate activation; a test and
/// attribution hook.
struct ActivationPatch {
  PatchSite site = PatchSite::hidden;
  std::size_t layer = 0;
  Tensor delta;  // [B, T, d_model] or [B, T, d_ff]
};

struct ForwardOptions {
  HeadMask mask;
  /// Applied in order to the output of map.layer before the next block.
  std::vector<AffineMap> hidden_maps;
  std::optional<ActivationPatch> patch;
  /// Skips the attention sublayer entirely (reference path for ablation).
  bool bypass_attention = false;
};

struct RoutingRecord {
  std::size_t layer = 0;
  std::size_t top_k = 0;
  std::vector<std::int32_t> experts;  // [tokens, top_k]
  std::vector<double> gates;          // [tokens, top_k]
};

struct ActivationTrace {
  std::vector<Tensor> hidden;     // per layer [B, T, d_model], block outputs
  std::vector<Tensor> attention;  // per layer [B, H, T, T]; empty when bypassed
  std::vector<RoutingRecord> routing;
  Tensor logits;  // [B, n_classes]

  std::size_t batch() const { return logits.dim(0); }
};

struct ForwardGraph {
  ad::Var logits;
  std::vector<ad::Var> hidden;
  std::vector<Tensor> attention;
  std::vector<RoutingRecord> routing;
  ad::Var patch;  // valid when options.patch is set
};

/// Weights drawn N(0, 1/d_model) for every matrix; norm gains 1, biases 0.
ParameterSet init_model(const ModelConfig& config, Rng& rng);

ForwardGraph forward_graph(const ParamVars& params, const ModelConfig& config,
                           std::span<const std::int32_t> tokens, std::size_t batch,
                           std::size_t seq_len, const ForwardOptions& options = {},
                           bool patch_requires_grad = false);

ActivationTrace forward(const ParameterSet& params, const ModelConfig& config,
                        std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq_len,
                        const ForwardOptions& options = {});
ActivationTrace forward(const ParameterSet& params, const ModelConfig& config, const Batch& batch,
                        const ForwardOptions& options = {});

/// Mean cross-entropy (nats) of trace logits against labels.
double loss(const ActivationTrace& trace, std::span<const std::int32_t> labels);

/// Differentiable batch loss for grad/hvp/lanczos.
LossFn classification_loss(const ModelConfig& config, Batch batch, ForwardOptions options = {});

/// Weights (shared, read-only) plus the forward-time modifications an
/// evaluation runs under.
struct EvalContext {
  std::shared_ptr<const ParameterSet> params;
  ModelConfig config;
  ForwardOptions options;

  EvalContext(std::shared_ptr<const ParameterSet> p, ModelConfig c, ForwardOptions o = {})
      : params(std::move(p)), config(std::move(c)), options(std::move(o)) {}
  EvalContext(const ParameterSet& p, ModelConfig c, ForwardOptions o = {})
      : EvalContext(std::make_shared<const ParameterSet>(p), std::move(c), std::move(o)) {}
};

/// Forward in chunks; logits only.
Tensor eval_logits(const EvalContext& ctx, const Batch& batch, std::size_t chunk = 128);
std::vector<std::int32_t> predict(const EvalContext& ctx, const Batch& batch, std::size_t chunk = 128);

enum class Pooling { last, all };
/// Block-output activations at layer: one row per example (last) or per
/// (example, position) (all).
Tensor collect_hidden(const EvalContext& ctx, const Batch& batch, std::size_t layer,
                      Pooling pooling = Pooling::last, std::size_t chunk = 128);

/// Freeze groups and the components they cover.
enum class ComponentGroup { attention, feedforward, embed_out };
bool in_group(Component c, ComponentGroup g) noexcept;

}  // namespace forgetlab
