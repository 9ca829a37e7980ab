// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "forgetlab/params.hpp"
#include "forgetlab/rng.hpp"

namespace forgetlab {

struct SpectrumEstimate {
  std::vector<double> eigenvalues;                // descending
  std::vector<std::vector<double>> eigenvectors;  // unit Ritz vectors of the first probe
  std::size_t lanczos_iters = 0;
  std::size_t n_probes = 0;
  std::string task_id;
  std::string checkpoint_id;
  /// Set when a Krylov space closed before k Ritz values were available.
  bool truncated = false;
};

struct LanczosOptions {
  std::size_t k = 20;
  std::size_t m = 60;
  std::size_t n_probes = 4;
  bool want_vectors = false;
  double hvp_eps = 1e-3;
};

/// Lanczos with full reorthogonalization on the hvp oracle. Top-k Ritz
/// values are averaged index-wise over probes.
SpectrumEstimate lanczos_spectrum(const LossFn& loss_fn, const ParameterSet& params,
                                  const LanczosOptions& options, Rng& rng);

}  // namespace forgetlab
