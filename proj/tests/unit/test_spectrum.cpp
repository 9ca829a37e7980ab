// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "forgetlab/error.hpp"
#include "forgetlab/spectrum.hpp"
#include "support.hpp"

using namespace forgetlab;
using namespace forgetlab::testing;

namespace {

/// Q diag(values) Q^T with a seeded orthogonal Q.
Eigen::MatrixXd with_spectrum(const std::vector<double>& values, std::uint64_t seed) {
  Rng rng(seed);
  const auto n = static_cast<Eigen::Index>(values.size());
  const Eigen::MatrixXd q = random_orthogonal(values.size(), rng);
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) d(i) = values[static_cast<std::size_t>(i)];
  return q * d.asDiagonal() * q.transpose();
}

}  // namespace

TEST_CASE("diagonal quadratic with spectrum 5..1", "[spectrum]") {
  const Eigen::MatrixXd a = Eigen::VectorXd((Eigen::VectorXd(5) << 5, 4, 3, 2, 1).finished()).asDiagonal();
  LanczosOptions o;
  o.k = 3;
  o.m = 5;
  o.n_probes = 2;
  Rng rng(1);
  const auto est = lanczos_spectrum(quadratic_loss(a), vector_params({0.3, -0.2, 0.1, 0.5, 0.7}), o, rng);
  REQUIRE(est.eigenvalues.size() == 3);
  CHECK(std::abs(est.eigenvalues[0] - 5.0) < 1e-4);
  CHECK(std::abs(est.eigenvalues[1] - 4.0) < 1e-4);
  CHECK(std::abs(est.eigenvalues[2] - 3.0) < 1e-4);
  CHECK_FALSE(est.truncated);
  CHECK(est.n_probes == 2);
}

TEST_CASE("rotated quadratic recovers the top values and unit vectors", "[spectrum]") {
  const std::vector<double> values{9.0, 7.5, 6.0, 2.0, 1.5, 1.0, 0.5, 0.25, -0.5, -1.0, -2.0, -3.0};
  const Eigen::MatrixXd a = with_spectrum(values, 4);
  LanczosOptions o;
  o.k = 4;
  o.m = 12;
  o.n_probes = 3;
  o.want_vectors = true;
  Rng rng(2);
  std::vector<double> theta(values.size(), 0.1);
  const auto est = lanczos_spectrum(quadratic_loss(a), vector_params(theta), o, rng);
  REQUIRE(est.eigenvalues.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(est.eigenvalues[i] - values[i]) < 1e-4);
  CHECK(std::is_sorted(est.eigenvalues.rbegin(), est.eigenvalues.rend()));
  REQUIRE(est.eigenvectors.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(vec::norm(est.eigenvectors[i]) - 1.0) < 1e-6);
    // Rayleigh quotient of the Ritz vector.
    const Eigen::Map<const Eigen::VectorXd> v(est.eigenvectors[i].data(), static_cast<Eigen::Index>(values.size()));
    CHECK(std::abs(v.dot(a * v) - values[i]) < 1e-4);
  }
}

TEST_CASE("ritz values lie inside the true spectrum", "[spectrum]") {
  Rng mrng(5);
  const Eigen::MatrixXd a = random_symmetric(30, mrng);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  LanczosOptions o;
  o.k = 6;
  o.m = 8;
  o.n_probes = 4;
  Rng rng(3);
  const auto est = lanczos_spectrum(quadratic_loss(a), vector_params(std::vector<double>(30, 0.0)), o, rng);
  for (double v : est.eigenvalues) {
    CHECK(v <= hi + 1e-6);
    CHECK(v >= lo - 1e-6);
  }
}

TEST_CASE("k zero gives an empty estimate", "[spectrum]") {
  LanczosOptions o;
  o.k = 0;
  o.m = 4;
  Rng rng(1);
  const auto est = lanczos_spectrum(quadratic_loss(Eigen::MatrixXd::Identity(3, 3)), vector_params({1, 2, 3}), o, rng);
  CHECK(est.eigenvalues.empty());
  CHECK(est.eigenvectors.empty());
}

TEST_CASE("m below k is a config error", "[spectrum]") {
  LanczosOptions o;
  o.k = 5;
  o.m = 4;
  Rng rng(1);
  try {
    (void)lanczos_spectrum(quadratic_loss(Eigen::MatrixXd::Identity(6, 6)), vector_params(std::vector<double>(6, 1.0)), o, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
  }
}

TEST_CASE("krylov breakdown truncates and flags", "[spectrum]") {
  LanczosOptions o;
  o.k = 3;
  o.m = 6;
  o.n_probes = 1;
  Rng rng(7);
  const auto est = lanczos_spectrum(quadratic_loss(2.0 * Eigen::MatrixXd::Identity(8, 8)),
                                    vector_params(std::vector<double>(8, 0.0)), o, rng);
  CHECK(est.truncated);
  REQUIRE_FALSE(est.eigenvalues.empty());
  CHECK(est.eigenvalues.size() < 3);
  CHECK(std::abs(est.eigenvalues[0] - 2.0) < 1e-6);
}

TEST_CASE("spectrum is deterministic for a fixed rng", "[spectrum]") {
  const ModelConfig cfg = tiny_model(1, 8, 2);
  Rng init(3);
  const ParameterSet p = init_model(cfg, init);
  const LossFn f = classification_loss(cfg, random_batch(cfg, 8, 5, init));
  LanczosOptions o;
  o.k = 3;
  o.m = 6;
  o.n_probes = 2;
  Rng a(9), b(9);
  CHECK(lanczos_spectrum(f, p, o, a).eigenvalues == lanczos_spectrum(f, p, o, b).eigenvalues);
}
