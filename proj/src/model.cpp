// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "forgetlab/error.hpp"

namespace forgetlab {

Batch Batch::slice(std::size_t begin, std::size_t end) const {
  require(begin <= end && end <= size(), ErrorCode::input, "batch slice out of range");
  Batch out;
  out.seq_len = seq_len;
  out.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(begin * seq_len),
                    tokens.begin() + static_cast<std::ptrdiff_t>(end * seq_len));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Batch Batch::gather(std::span<const std::size_t> rows) const {
  Batch out;
  out.seq_len = seq_len;
  out.tokens.reserve(rows.size() * seq_len);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    require(r < size(), ErrorCode::input, "batch gather out of range");
    auto src = row(r);
    out.tokens.insert(out.tokens.end(), src.begin(), src.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    require(v >= 1, ErrorCode::config, std::string("model.") + name + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  positive(n_classes, "n_classes");
  require(d_model % n_heads == 0, ErrorCode::config,
          "model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
              std::to_string(n_heads) + ")");
  if (moe) {
    positive(moe->n_experts, "moe.n_experts");
    positive(moe->top_k, "moe.top_k");
    require(moe->top_k <= moe->n_experts, ErrorCode::config, "model.moe.top_k must be <= n_experts");
  }
}

void HeadMask::validate(const ModelConfig& config) const {
  for (const auto& h : disabled)
    require(h.layer < config.n_layers && h.head < config.n_heads, ErrorCode::input,
            "head (" + std::to_string(h.layer) + ", " + std::to_string(h.head) + ") out of range");
}

bool in_group(Component c, ComponentGroup g) noexcept {
  switch (g) {
    case ComponentGroup::attention:
      return c == Component::attn_q || c == Component::attn_k || c == Component::attn_v ||
             c == Component::attn_o;
    case ComponentGroup::feedforward:
      return c == Component::ffn_in || c == Component::ffn_out || c == Component::router ||
             c == Component::expert;
    case ComponentGroup::embed_out:
      return c == Component::embed || c == Component::pos || c == Component::head_out;
  }
  return false;
}

namespace {

std::string expert_name(std::size_t e, const char* part) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "e%02zu.%s", e, part);
  return buf;
}

Tensor normal_tensor(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = std * rng.normal();
  return t;
}

}  // namespace

ParameterSet init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t D = config.d_model;
  const double std = 1.0 / std::sqrt(static_cast<double>(D));
  const int last = static_cast<int>(config.n_layers);
  ParameterSet p;
  // Draw in canonical key order so the stream-to-weight mapping is fixed.
  std::vector<std::pair<ParamKey, Shape>> layout;
  auto matrix = [&](ParamKey key, Shape shape) { layout.emplace_back(std::move(key), std::move(shape)); };
  matrix({-1, Component::embed, "tok"}, {config.vocab_size, D});
  matrix({-1, Component::pos, "pos"}, {config.max_seq_len, D});
  for (int l = 0; l < last; ++l) {
    matrix({l, Component::attn_q, "w"}, {D, D});
    matrix({l, Component::attn_k, "w"}, {D, D});
    matrix({l, Component::attn_v, "w"}, {D, D});
    matrix({l, Component::attn_o, "w"}, {D, D});
    if (config.moe) {
      matrix({l, Component::router, "w"}, {D, config.moe->n_experts});
      for (std::size_t e = 0; e < config.moe->n_experts; ++e) {
        matrix({l, Component::expert, expert_name(e, "in")}, {D, config.ffn_in_width()});
        matrix({l, Component::expert, expert_name(e, "out")}, {config.d_ff, D});
      }
    } else {
      matrix({l, Component::ffn_in, "w"}, {D, config.ffn_in_width()});
      matrix({l, Component::ffn_out, "w"}, {config.d_ff, D});
    }
  }
  matrix({last, Component::head_out, "w"}, {D, config.n_classes});
  std::sort(layout.begin(), layout.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [key, shape] : layout) p.insert(key, normal_tensor(shape, std, rng));

  for (int l = 0; l < last; ++l) {
    p.insert({l, Component::norm, "attn.gain"}, Tensor({D}, 1.0));
    p.insert({l, Component::norm, "attn.bias"}, Tensor({D}, 0.0));
    p.insert({l, Component::norm, "ffn.gain"}, Tensor({D}, 1.0));
    p.insert({l, Component::norm, "ffn.bias"}, Tensor({D}, 0.0));
  }
  p.insert({last, Component::norm, "final.gain"}, Tensor({D}, 1.0));
  p.insert({last, Component::norm, "final.bias"}, Tensor({D}, 0.0));
  p.insert({last, Component::head_out, "b"}, Tensor({config.n_classes}, 0.0));
  return p;
}

namespace {

ad::Var ffn_block(const ParamVars& p, const ModelConfig& config, ad::Var x, const ParamKey& in_key,
                  const ParamKey& out_key, const ForwardOptions& options, std::size_t layer,
                  ad::Var* patch_var, ad::Tape& tape, bool patch_grad) {
  ad::Var u = ad::matmul(x, p[in_key]);
  ad::Var act = config.ffn == FfnKind::swiglu ? ad::swiglu(u) : ad::gelu(u);
  if (options.patch && options.patch->site == PatchSite::ffn_activation && options.patch->layer == layer &&
      patch_var != nullptr) {
    require(options.patch->delta.shape() == act.shape(), ErrorCode::shape,
            "ffn activation patch shape " + shape_string(options.patch->delta.shape()) +
                " != " + shape_string(act.shape()));
    *patch_var = patch_grad ? tape.leaf(options.patch->delta) : tape.constant(options.patch->delta);
    act = ad::add(act, *patch_var);
  }
  return ad::matmul(act, p[out_key]);
}

ad::Var apply_affine(ad::Tape& tape, ad::Var h, const AffineMap& map) {
  const std::size_t d = map.offset.size();
  require(map.linear.rank() == 2 && map.linear.dim(0) == d && map.linear.dim(1) == d &&
              h.value().cols() == d,
          ErrorCode::shape, "affine map dimension mismatch");
  Tensor wt({d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) wt.at(j, i) = map.linear.at(i, j);
  ad::Var y = ad::matmul(h, tape.constant(std::move(wt)));
  return ad::add_bias(y, tape.constant(Tensor({d}, map.offset)));
}

}  // namespace

ForwardGraph forward_graph(const ParamVars& p, const ModelConfig& config,
                           std::span<const std::int32_t> tokens, std::size_t batch,
                           std::size_t seq_len, const ForwardOptions& options, bool patch_requires_grad) {
  require(seq_len >= 1 && seq_len <= config.max_seq_len, ErrorCode::input,
          "sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
              std::to_string(config.max_seq_len));
  require(tokens.size() == batch * seq_len, ErrorCode::input, "token buffer size mismatch");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] >= 0 && static_cast<std::size_t>(tokens[i]) < config.vocab_size, ErrorCode::input,
            "token id " + std::to_string(tokens[i]) + " at index " + std::to_string(i) +
                " outside vocabulary of " + std::to_string(config.vocab_size));
  }
  options.mask.validate(config);
  for (const auto& m : options.hidden_maps)
    require(m.layer < config.n_layers, ErrorCode::input, "affine map layer out of range");

  ad::Tape& tape = p.tape();
  const int last = static_cast<int>(config.n_layers);
  const std::size_t D = config.d_model;
  ForwardGraph g;
  ad::Var h = ad::embedding(tokens, batch, seq_len, p[{-1, Component::embed, "tok"}],
                            p[{-1, Component::pos, "pos"}]);
  std::unique_ptr<bool[]> enabled(new bool[config.n_heads]);

  for (int li = 0; li < last; ++li) {
    const auto l = static_cast<std::size_t>(li);
    ad::Var a = ad::layer_norm(h, p[{li, Component::norm, "attn.gain"}], p[{li, Component::norm, "attn.bias"}]);
    if (!options.bypass_attention) {
      for (std::size_t hd = 0; hd < config.n_heads; ++hd) enabled[hd] = !options.mask.contains(l, hd);
      ad::Var q = ad::matmul(a, p[{li, Component::attn_q, "w"}]);
      ad::Var k = ad::matmul(a, p[{li, Component::attn_k, "w"}]);
      ad::Var v = ad::matmul(a, p[{li, Component::attn_v, "w"}]);
      auto att = ad::causal_attention(q, k, v, config.n_heads,
                                      std::span<const bool>(enabled.get(), config.n_heads));
      g.attention.push_back(std::move(att.probs));
      h = ad::add(h, ad::matmul(att.context, p[{li, Component::attn_o, "w"}]));
    } else {
      g.attention.emplace_back();
    }

    ad::Var f = ad::layer_norm(h, p[{li, Component::norm, "ffn.gain"}], p[{li, Component::norm, "ffn.bias"}]);
    if (config.moe) {
      const std::size_t E = config.moe->n_experts;
      ad::Var flat = ad::reshape(f, {batch * seq_len, D});
      auto gate = ad::topk_gating(ad::matmul(flat, p[{li, Component::router, "w"}]), config.moe->top_k);
      RoutingRecord rec;
      rec.layer = l;
      rec.top_k = config.moe->top_k;
      rec.experts = gate.top;
      rec.gates.resize(gate.top.size());
      for (std::size_t n = 0; n < batch * seq_len; ++n)
        for (std::size_t i = 0; i < rec.top_k; ++i)
          rec.gates[n * rec.top_k + i] =
              gate.gates.value()[n * E + static_cast<std::size_t>(gate.top[n * rec.top_k + i])];
      g.routing.push_back(std::move(rec));
      ad::Var mixed;
      for (std::size_t e = 0; e < E; ++e) {
        ad::Var out = ffn_block(p, config, flat, {li, Component::expert, expert_name(e, "in")},
                                {li, Component::expert, expert_name(e, "out")}, ForwardOptions{}, l,
                                nullptr, tape, false);
        ad::Var weighted = ad::scale_rows(out, gate.gates, e);
        mixed = mixed.valid() ? ad::add(mixed, weighted) : weighted;
      }
      h = ad::add(h, ad::reshape(mixed, {batch, seq_len, D}));
    } else {
      h = ad::add(h, ffn_block(p, config, f, {li, Component::ffn_in, "w"}, {li, Component::ffn_out, "w"},
                               options, l, &g.patch, tape, patch_requires_grad));
    }

    if (options.patch && options.patch->site == PatchSite::hidden && options.patch->layer == l) {
      require(options.patch->delta.shape() == h.shape(), ErrorCode::shape, "hidden patch shape mismatch");
      g.patch = patch_requires_grad ? tape.leaf(options.patch->delta) : tape.constant(options.patch->delta);
      h = ad::add(h, g.patch);
    }
    for (const auto& m : options.hidden_maps)
      if (m.layer == l) h = apply_affine(tape, h, m);
    g.hidden.push_back(h);
  }

  ad::Var z = ad::layer_norm(h, p[{last, Component::norm, "final.gain"}], p[{last, Component::norm, "final.bias"}]);
  ad::Var pooled = ad::last_position(z);
  g.logits = ad::add_bias(ad::matmul(pooled, p[{last, Component::head_out, "w"}]),
                          p[{last, Component::head_out, "b"}]);
  return g;
}

ActivationTrace forward(const ParameterSet& params, const ModelConfig& config,
                        std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq_len,
                        const ForwardOptions& options) {
  ad::Tape tape;
  ParamVars vars(tape, params, false);
  ForwardGraph g = forward_graph(vars, config, tokens, batch, seq_len, options);
  ActivationTrace trace;
  trace.hidden.reserve(g.hidden.size());
  for (const auto& h : g.hidden) trace.hidden.push_back(h.value());
  trace.attention = std::move(g.attention);
  trace.routing = std::move(g.routing);
  trace.logits = g.logits.value();
  return trace;
}

ActivationTrace forward(const ParameterSet& params, const ModelConfig& config, const Batch& batch,
                        const ForwardOptions& options) {
  return forward(params, config, batch.tokens, batch.size(), batch.seq_len, options);
}

double loss(const ActivationTrace& trace, std::span<const std::int32_t> labels) {
  const Tensor& lv = trace.logits;
  require(lv.rank() == 2 && lv.dim(0) == labels.size(), ErrorCode::input, "loss: label count mismatch");
  const std::size_t B = lv.dim(0), C = lv.dim(1);
  require(B > 0, ErrorCode::input, "loss: empty batch");
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < C, ErrorCode::input,
            "label " + std::to_string(y) + " out of range for " + std::to_string(C) + " classes");
    const double* row = &lv[b * C];
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    total += mx + std::log(z) - row[y];
  }
  return total / static_cast<double>(B);
}

LossFn classification_loss(const ModelConfig& config, Batch batch, ForwardOptions options) {
  require(!batch.empty(), ErrorCode::input, "classification_loss: empty batch");
  return [config, batch = std::move(batch), options = std::move(options)](ad::Tape&, const ParamVars& p) {
    ForwardGraph g = forward_graph(p, config, batch.tokens, batch.size(), batch.seq_len, options);
    return ad::cross_entropy(g.logits, batch.labels);
  };
}

Tensor eval_logits(const EvalContext& ctx, const Batch& batch, std::size_t chunk) {
  require(chunk > 0, ErrorCode::input, "eval chunk must be positive");
  Tensor out({batch.size(), ctx.config.n_classes}, 0.0);
  for (std::size_t begin = 0; begin < batch.size(); begin += chunk) {
    const std::size_t end = std::min(batch.size(), begin + chunk);
    Batch part = batch.slice(begin, end);
    ad::Tape tape;
    ParamVars vars(tape, *ctx.params, false);
    ForwardGraph g = forward_graph(vars, ctx.config, part.tokens, part.size(), part.seq_len, ctx.options);
    const auto& lv = g.logits.value();
    std::copy(lv.data().begin(), lv.data().end(), out.data().begin() +
                                                      static_cast<std::ptrdiff_t>(begin * ctx.config.n_classes));
  }
  return out;
}

std::vector<std::int32_t> predict(const EvalContext& ctx, const Batch& batch, std::size_t chunk) {
  const Tensor logits = eval_logits(ctx, batch, chunk);
  const std::size_t C = ctx.config.n_classes;
  std::vector<std::int32_t> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double* row = &logits[b * C];
    out[b] = static_cast<std::int32_t>(std::max_element(row, row + C) - row);
  }
  return out;
}

Tensor collect_hidden(const EvalContext& ctx, const Batch& batch, std::size_t layer, Pooling pooling,
                      std::size_t chunk) {
  require(layer < ctx.config.n_layers, ErrorCode::input, "collect_hidden: layer out of range");
  const std::size_t D = ctx.config.d_model;
  const std::size_t T = batch.seq_len;
  const std::size_t rows = pooling == Pooling::last ? batch.size() : batch.size() * T;
  Tensor out({rows, D}, 0.0);
  for (std::size_t begin = 0; begin < batch.size(); begin += chunk) {
    const std::size_t end = std::min(batch.size(), begin + chunk);
    Batch part = batch.slice(begin, end);
    ActivationTrace trace = forward(*ctx.params, ctx.config, part, ctx.options);
    const Tensor& h = trace.hidden[layer];
    for (std::size_t b = 0; b < part.size(); ++b) {
      if (pooling == Pooling::last) {
        std::copy_n(&h[(b * T + T - 1) * D], D, &out[(begin + b) * D]);
      } else {
        std::copy_n(&h[b * T * D], T * D, &out[(begin + b) * T * D]);
      }
    }
  }
  return out;
}

}  // namespace forgetlab
