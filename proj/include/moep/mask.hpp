// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moep/numerics.hpp"

namespace moep {

/// Binary keep(1)/prune(0) pattern aligned to one weight matrix.
struct SparsityMask {
  std::string target;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;  // row-major

  SparsityMask() = default;
  SparsityMask(std::string name, std::size_t r, std::size_t c)
      : target(std::move(name)), rows(r), cols(c), bits(r * c, 1) {}

  bool keep(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool keep) { bits[r * cols + c] = keep ? 1 : 0; }

  std::size_t zeros() const {
    std::size_t z = 0;
    for (auto b : bits) z += b == 0;
    return z;
  }
  std::size_t row_zeros(std::size_t r) const {
    std::size_t z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += bits[r * cols + c] == 0;
    return z;
  }
  double sparsity() const { return bits.empty() ? 0.0 : static_cast<double>(zeros()) / bits.size(); }

  /// W <- M * W
  void apply(Matrix& w) const {
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (!bits[i]) w.data()[i] = 0.0;
  }

  friend bool operator==(const SparsityMask&, const SparsityMask&) = default;
};

/// Masks keyed by parameter name.
using MaskSet = std::map<std::string, SparsityMask>;

}  // namespace moep
