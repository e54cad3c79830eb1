// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bwta/tensor.hpp"

namespace bwta {

inline constexpr std::size_t kWordBits = 64;

inline constexpr std::size_t words_for(std::size_t cols) {
  return (cols + kWordBits - 1) / kWordBits;
}

/// Mask of the valid (non-padding) bits in the last word of a row.
inline constexpr std::uint64_t tail_mask(std::size_t cols) {
  const std::size_t rem = cols % kWordBits;
  return rem == 0 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
}

enum class BinaryKind : std::uint8_t {
  SignNegIsOne = 0,  // bit 1 <=> -1, bit 0 <=> +1
  BoolOneIsOne = 1,  // bit 1 <=> 1,  bit 0 <=> 0
};

/// One bit per element. Element k of a row is bit k % 64 of word k / 64
/// (LSB-first); each row starts on a fresh word and padding bits are zero.
struct PackedBinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t words_per_row = 0;
  BinaryKind kind = BinaryKind::SignNegIsOne;
  std::vector<std::uint64_t> words;

  PackedBinaryMatrix() = default;
  PackedBinaryMatrix(std::size_t r, std::size_t c, BinaryKind k)
      : rows(r), cols(c), words_per_row(words_for(c)), kind(k), words(r * words_for(c), 0) {}

  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words.data() + r * words_per_row, words_per_row};
  }
  std::span<std::uint64_t> row(std::size_t r) {
    return {words.data() + r * words_per_row, words_per_row};
  }
  bool operator==(const PackedBinaryMatrix&) const = default;
};

/// Two bit-planes over the same geometry: pos marks +1, neg marks -1.
struct PackedTernaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t words_per_row = 0;
  std::vector<std::uint64_t> pos;
  std::vector<std::uint64_t> neg;

  PackedTernaryMatrix() = default;
  PackedTernaryMatrix(std::size_t r, std::size_t c)
      : rows(r), cols(c), words_per_row(words_for(c)), pos(r * words_for(c), 0),
        neg(r * words_for(c), 0) {}

  std::span<const std::uint64_t> pos_row(std::size_t r) const {
    return {pos.data() + r * words_per_row, words_per_row};
  }
  std::span<const std::uint64_t> neg_row(std::size_t r) const {
    return {neg.data() + r * words_per_row, words_per_row};
  }
  bool operator==(const PackedTernaryMatrix&) const = default;
};

PackedBinaryMatrix pack_sign(const IntMatrix& signs);
/// Fused threshold and pack: pos where A/s >= 0.5, neg where A/s <= -0.5.
PackedTernaryMatrix pack_ternary(const DenseMatrix& a, float scale);
/// Fused threshold and pack: bit set where A/s >= 0.5.
PackedBinaryMatrix pack_bool(const DenseMatrix& a, float scale);

/// Packs already-quantized integers in {-1, 0, 1}.
PackedTernaryMatrix pack_ternary_ints(const IntMatrix& q);
/// Views a boolean matrix as ternary with an empty negative plane.
PackedTernaryMatrix bool_as_ternary(const PackedBinaryMatrix& b);

IntMatrix unpack(const PackedBinaryMatrix& p);
IntMatrix unpack(const PackedTernaryMatrix& p);

/// Throws std::invalid_argument on nonzero padding, bad geometry or (for
/// ternary) overlapping planes.
void validate(const PackedBinaryMatrix& p);
void validate(const PackedTernaryMatrix& p);

}  // namespace bwta
