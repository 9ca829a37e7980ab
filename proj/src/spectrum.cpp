// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/spectrum.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "forgetlab/error.hpp"

namespace forgetlab {

namespace {

struct ProbeResult {
  std::vector<double> values;  // descending
  std::vector<std::vector<double>> vectors;
  bool breakdown = false;
};

ProbeResult run_probe(const LossFn& loss_fn, const ParameterSet& params, const LanczosOptions& opt,
                      std::size_t m, Rng rng) {
  const std::size_t n = params.total_dim();
  std::vector<std::vector<double>> q;
  std::vector<double> alpha, beta;
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  vec::scale(1.0 / vec::norm(v), v);

  ProbeResult out;
  for (std::size_t j = 0; j < m; ++j) {
    q.push_back(v);
    std::vector<double> w = hvp(loss_fn, params, q.back(), opt.hvp_eps);
    const double a = vec::dot(w, q.back());
    alpha.push_back(a);
    // Full reorthogonalization, two passes.
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& qi : q) vec::axpy(-vec::dot(w, qi), qi, w);
    const double b = vec::norm(w);
    if (j + 1 == m) break;
    if (b <= 1e-10 * std::max(1.0, std::abs(a))) {
      out.breakdown = true;
      break;
    }
    beta.push_back(b);
    vec::scale(1.0 / b, w);
    v = std::move(w);
  }

  const std::size_t steps = alpha.size();
  Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(alpha.data(), static_cast<Eigen::Index>(steps));
  Eigen::VectorXd sub(static_cast<Eigen::Index>(steps > 0 ? steps - 1 : 0));
  for (std::size_t i = 0; i + 1 < steps; ++i) sub[static_cast<Eigen::Index>(i)] = beta[i];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, opt.want_vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
  require(solver.info() == Eigen::Success, ErrorCode::numeric, "tridiagonal eigensolver failed");

  const std::size_t keep = std::min(opt.k, steps);
  for (std::size_t r = 0; r < keep; ++r) {
    const auto col = static_cast<Eigen::Index>(steps - 1 - r);  // ascending order from Eigen
    out.values.push_back(solver.eigenvalues()[col]);
    if (opt.want_vectors) {
      std::vector<double> y(n, 0.0);
      for (std::size_t i = 0; i < steps; ++i)
        vec::axpy(solver.eigenvectors()(static_cast<Eigen::Index>(i), col), q[i], y);
      vec::scale(1.0 / vec::norm(y), y);
      out.vectors.push_back(std::move(y));
    }
  }
  return out;
}

}  // namespace

SpectrumEstimate lanczos_spectrum(const LossFn& loss_fn, const ParameterSet& params,
                                  const LanczosOptions& options, Rng& rng) {
  require(options.m >= options.k, ErrorCode::config, "lanczos: m must be >= k");
  SpectrumEstimate est;
  est.n_probes = options.n_probes;
  const std::size_t m = std::min(options.m, params.total_dim());
  est.lanczos_iters = m;
  if (options.k == 0 || options.n_probes == 0) return est;
  require(params.total_dim() > 0, ErrorCode::input, "lanczos: empty parameter set");

  const std::uint64_t seed = rng.next_u64();
  std::vector<ProbeResult> probes;
  std::size_t common = options.k;
  for (std::size_t p = 0; p < options.n_probes; ++p) {
    probes.push_back(run_probe(loss_fn, params, options, m, Rng(seed, p)));
    common = std::min(common, probes.back().values.size());
  }
  est.truncated = common < options.k;
  est.eigenvalues.assign(common, 0.0);
  for (const auto& pr : probes)
    for (std::size_t i = 0; i < common; ++i) est.eigenvalues[i] += pr.values[i] / static_cast<double>(probes.size());
  std::sort(est.eigenvalues.begin(), est.eigenvalues.end(), std::greater<>());
  if (options.want_vectors) {
    est.eigenvectors = std::move(probes.front().vectors);
    est.eigenvectors.resize(std::min(est.eigenvectors.size(), common));
  }
  return est;
}

}  // namespace forgetlab
