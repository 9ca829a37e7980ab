// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forgetlab/autodiff.hpp"
#include "forgetlab/tensor.hpp"

namespace forgetlab {

enum class Component : std::uint8_t {
  embed,
  attn_q,
  attn_k,
  attn_v,
  attn_o,
  ffn_in,
  ffn_out,
  norm,
  router,
  expert,
  head_out,
  pos,
};

const char* to_string(Component c) noexcept;
std::optional<Component> component_from_string(std::string_view name) noexcept;

/// Identifies one weight tensor. Parameters that precede the block stack
/// use layer -1; those that follow it use layer n_layers.
struct ParamKey {
  int layer = 0;
  Component component = Component::embed;
  std::string name;

  auto operator<=>(const ParamKey&) const = default;
  bool operator==(const ParamKey&) const = default;
};

std::string to_string(const ParamKey& key);

struct Segment {
  ParamKey key;
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Named weights in canonical (ParamKey-sorted) order.
class ParameterSet {
 public:
  using Map = std::map<ParamKey, Tensor>;

  ParameterSet() = default;
  explicit ParameterSet(Map entries);

  void insert(ParamKey key, Tensor value);
  const Tensor& at(const ParamKey& key) const;
  Tensor& at(const ParamKey& key);
  bool contains(const ParamKey& key) const { return entries_.contains(key); }

  const Map& entries() const noexcept { return entries_; }
  std::size_t total_dim() const noexcept { return total_dim_; }
  std::vector<Segment> segments() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  Map entries_;
  std::size_t total_dim_ = 0;
};

std::vector<double> flatten(const ParameterSet& params);
/// Inverse of flatten; keys and shapes come from the template.
ParameterSet unflatten(std::span<const double> flat, const ParameterSet& layout);

struct GradientSnapshot {
  std::vector<double> flat;
  std::vector<Segment> segments;
  std::string task_id;
  std::size_t eval_batch_size = 0;

  std::span<const double> segment(std::size_t i) const {
    return std::span<const double>(flat).subspan(segments[i].offset, segments[i].length);
  }
};

/// Parameter handles on a tape, keyed like the ParameterSet they came from.
class ParamVars {
 public:
  ParamVars(ad::Tape& tape, const ParameterSet& params, bool differentiable);

  ad::Var operator[](const ParamKey& key) const;
  bool contains(const ParamKey& key) const { return vars_.contains(key); }
  const std::map<ParamKey, ad::Var>& all() const noexcept { return vars_; }
  ad::Tape& tape() const noexcept { return *tape_; }

 private:
  ad::Tape* tape_;
  std::map<ParamKey, ad::Var> vars_;
};

using LossFn = std::function<ad::Var(ad::Tape&, const ParamVars&)>;

struct ValueAndGrad {
  double value = 0.0;
  GradientSnapshot grad;
};

/// Loss value and d(loss)/d(theta) in canonical order. Throws a numeric
/// error naming the first non-finite ParamKey (or the loss itself).
ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParameterSet& params);
GradientSnapshot grad(const LossFn& loss_fn, const ParameterSet& params);
double evaluate(const LossFn& loss_fn, const ParameterSet& params);

/// Hessian-vector product by central differences of gradients along v/|v|
/// with step eps * (1 + |theta|_inf), rescaled by |v|.
std::vector<double> hvp(const LossFn& loss_fn, const ParameterSet& params,
                        std::span<const double> v, double eps = 1e-3);

}  // namespace forgetlab
