// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "forgetlab/metrics.hpp"
#include "forgetlab/model.hpp"

namespace forgetlab {

/// The ceil(fraction * n) heads with the largest weight distance; ties go
/// to the lower (layer, head).
std::vector<HeadId> select_disrupted(const AttentionStats& stats, double fraction);

/// Same weights, with the heads added to the evaluation mask.
EvalContext ablate(const EvalContext& ctx, std::span<const HeadId> heads);

/// Least-squares (W, b) with W * h_post + b ~ h_pre, solved on the ridge-
/// augmented system [h_post, 1; sqrt(ridge) I].
AffineMap fit_realignment(const Tensor& acts_post, const Tensor& acts_pre, std::size_t layer, double ridge = 1e-8);

EvalContext apply_realignment(const EvalContext& ctx, const AffineMap& map);

AffineMap inverse(const AffineMap& map);

/// Apply a map to the rows of [n, d] activations.
Tensor apply_map(const AffineMap& map, const Tensor& acts);

/// (after - forgotten) / (post - forgotten); NaN when nothing was forgotten.
double recovery_fraction(double acc_after, double acc_forgotten, double acc_post);
/// Display value clamped to [-1, 2]; NaN stays NaN.
double display_recovery(double raw);

}  // namespace forgetlab
