// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace forgetlab {

/// Fixed-length labeled token sequences, row-major [size, seq_len].
struct Batch {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> labels;
  std::size_t seq_len = 0;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const std::int32_t> row(std::size_t i) const {
    return std::span<const std::int32_t>(tokens).subspan(i * seq_len, seq_len);
  }

  /// Rows [begin, end).
  Batch slice(std::size_t begin, std::size_t end) const;
  /// Rows in the given order.
  Batch gather(std::span<const std::size_t> rows) const;

  friend bool operator==(const Batch&, const Batch&) = default;
};

}  // namespace forgetlab
