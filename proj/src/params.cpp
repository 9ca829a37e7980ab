// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/params.hpp"

#include <array>
#include <cmath>

#include "forgetlab/error.hpp"

namespace forgetlab {

namespace {
constexpr std::array<const char*, 12> kComponentNames = {
    "embed", "attn_q", "attn_k", "attn_v", "attn_o", "ffn_in",
    "ffn_out", "norm", "router", "expert", "head_out", "pos"};
}

const char* to_string(Component c) noexcept { return kComponentNames[static_cast<std::size_t>(c)]; }

std::optional<Component> component_from_string(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kComponentNames.size(); ++i)
    if (name == kComponentNames[i]) return static_cast<Component>(i);
  return std::nullopt;
}

std::string to_string(const ParamKey& key) {
  return "L" + std::to_string(key.layer) + "." + to_string(key.component) + "." + key.name;
}

ParameterSet::ParameterSet(Map entries) : entries_(std::move(entries)) {
  for (const auto& [key, t] : entries_) total_dim_ += t.size();
}

void ParameterSet::insert(ParamKey key, Tensor value) {
  auto it = entries_.find(key);
  if (it != entries_.end()) total_dim_ -= it->second.size();
  total_dim_ += value.size();
  entries_.insert_or_assign(std::move(key), std::move(value));
}

const Tensor& ParameterSet::at(const ParamKey& key) const {
  auto it = entries_.find(key);
  require(it != entries_.end(), ErrorCode::input, "unknown parameter " + to_string(key));
  return it->second;
}

Tensor& ParameterSet::at(const ParamKey& key) {
  auto it = entries_.find(key);
  require(it != entries_.end(), ErrorCode::input, "unknown parameter " + to_string(key));
  return it->second;
}

std::vector<Segment> ParameterSet::segments() const {
  std::vector<Segment> out;
  out.reserve(entries_.size());
  std::size_t offset = 0;
  for (const auto& [key, t] : entries_) {
    out.push_back(Segment{key, offset, t.size()});
    offset += t.size();
  }
  return out;
}

std::vector<double> flatten(const ParameterSet& params) {
  std::vector<double> flat;
  flat.reserve(params.total_dim());
  for (const auto& [key, t] : params.entries()) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

ParameterSet unflatten(std::span<const double> flat, const ParameterSet& layout) {
  require(flat.size() == layout.total_dim(), ErrorCode::shape,
          "unflatten: vector length " + std::to_string(flat.size()) + " != total_dim " +
              std::to_string(layout.total_dim()));
  ParameterSet::Map entries;
  std::size_t offset = 0;
  for (const auto& [key, t] : layout.entries()) {
    auto part = flat.subspan(offset, t.size());
    entries.emplace(key, Tensor(t.shape(), std::vector<double>(part.begin(), part.end())));
    offset += t.size();
  }
  return ParameterSet(std::move(entries));
}

ParamVars::ParamVars(ad::Tape& tape, const ParameterSet& params, bool differentiable) : tape_(&tape) {
  for (const auto& [key, t] : params.entries())
    vars_.emplace(key, differentiable ? tape.leaf(t) : tape.constant(t));
}

ad::Var ParamVars::operator[](const ParamKey& key) const {
  auto it = vars_.find(key);
  require(it != vars_.end(), ErrorCode::input, "unknown parameter " + to_string(key));
  return it->second;
}

ValueAndGrad value_and_grad(const LossFn& loss_fn, const ParameterSet& params) {
  ad::Tape tape;
  ParamVars vars(tape, params, true);
  ad::Var loss = loss_fn(tape, vars);
  require(loss.valid() && loss.value().size() == 1, ErrorCode::shape, "loss must be a scalar");
  ValueAndGrad out;
  out.value = loss.value()[0];
  require(std::isfinite(out.value), ErrorCode::numeric, "non-finite loss value");
  tape.backward(loss);
  out.grad.segments = params.segments();
  out.grad.flat.reserve(params.total_dim());
  for (const auto& [key, var] : vars.all()) {
    const Tensor& g = tape.grad(var);
    require(g.all_finite(), ErrorCode::numeric, "non-finite gradient in " + to_string(key));
    out.grad.flat.insert(out.grad.flat.end(), g.data().begin(), g.data().end());
  }
  return out;
}

GradientSnapshot grad(const LossFn& loss_fn, const ParameterSet& params) {
  return value_and_grad(loss_fn, params).grad;
}

double evaluate(const LossFn& loss_fn, const ParameterSet& params) {
  ad::Tape tape;
  ParamVars vars(tape, params, false);
  ad::Var loss = loss_fn(tape, vars);
  require(loss.valid() && loss.value().size() == 1, ErrorCode::shape, "loss must be a scalar");
  const double value = loss.value()[0];
  require(std::isfinite(value), ErrorCode::numeric, "non-finite loss value");
  return value;
}

std::vector<double> hvp(const LossFn& loss_fn, const ParameterSet& params, std::span<const double> v,
                        double eps) {
  require(v.size() == params.total_dim(), ErrorCode::shape, "hvp: direction length mismatch");
  require(eps > 0.0, ErrorCode::input, "hvp: eps must be positive");
  const double vnorm = vec::norm(v);
  require(vnorm > 1e-300 && std::isfinite(vnorm), ErrorCode::input, "hvp: zero direction vector");
  const std::vector<double> theta = flatten(params);
  const double step = eps * (1.0 + vec::norm_inf(theta));
  std::vector<double> plus = theta;
  std::vector<double> minus = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = step * (v[i] / vnorm);
    plus[i] += d;
    minus[i] -= d;
  }
  const auto gp = grad(loss_fn, unflatten(plus, params));
  const auto gm = grad(loss_fn, unflatten(minus, params));
  std::vector<double> out(theta.size());
  const double f = vnorm / (2.0 * step);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp.flat[i] - gm.flat[i]) * f;
  require(vec::all_finite(out), ErrorCode::numeric, "hvp: non-finite result");
  return out;
}

}  // namespace forgetlab
