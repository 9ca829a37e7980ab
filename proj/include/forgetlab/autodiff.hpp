// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "forgetlab/tensor.hpp"

namespace forgetlab::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const noexcept { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation and replays it backwards. Node storage is a deque
/// so references returned by value() stay valid while recording continues.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Differentiable input.
  Var leaf(Tensor value);
  /// Adds an op result. The backward closure runs only if one of the
  /// inputs requires a gradient and the result received one.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Seeds d(root)/d(root) = 1 and propagates to every node. root must hold
  /// a single element. May be called once per tape.
  void backward(Var root);

  /// Gradient accumulated into v (zeros if v received none).
  const Tensor& grad(Var v);
  /// Mutable accumulator for op backward closures.
  Tensor& grad_buffer(Var v);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

// Elementwise and reductions.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);
Var reshape(Var a, Shape shape);

/// x[..., K] times w[K, N] -> [..., N]; a rank-1 x is treated as one row.
Var matmul(Var x, Var w);
/// x[..., N] + b[N]
Var add_bias(Var x, Var b);

/// tokens[batch * seq] -> table[token] + positions[t], shape [batch, seq, D].
Var embedding(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq, Var table,
              Var positions);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Splits the last axis in halves (a, b) and returns silu(a) * b.
Var swiglu(Var x);
/// tanh approximation.
Var gelu(Var x);

struct AttentionResult {
  Var context;   // [B, T, D]
  Tensor probs;  // [B, H, T, T], exact zeros above the diagonal
};
/// Causal multi-head scaled-dot-product attention over [B, T, D] inputs with
/// heads laid out as contiguous column blocks. Disabled heads produce
/// exactly zero context.
AttentionResult causal_attention(Var q, Var k, Var v, std::size_t n_heads,
                                 std::span<const bool> head_enabled);

/// [B, T, D] -> [B, D] at position T-1.
Var last_position(Var x);
/// Mean softmax cross-entropy in nats.
Var cross_entropy(Var logits, std::span<const std::int32_t> labels);

struct GateResult {
  Var gates;                      // [N, E], zero off the selected experts
  std::vector<std::int32_t> top;  // [N, k] selected experts, descending gate
};
/// Softmax over experts, keep the top-k, renormalize among them.
GateResult topk_gating(Var logits, std::size_t k);
/// x[N, D] scaled row-wise by gates[:, column].
Var scale_rows(Var x, Var gates, std::size_t column);

namespace kernel {
/// C (+)= op(A) * op(B) for row-major dense matrices.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate);
}  // namespace kernel

}  // namespace forgetlab::ad
