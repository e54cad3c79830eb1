// SPDX-License-Identifier: Apache-2.0
#pragma once

// Packed-weight file (".bwta"), all integers little-endian:
//
//   offset  size  field
//   0       4     magic "BWTA"
//   4       1     version (1)
//   5       1     kind: 0 = SignNegIsOne, 1 = BoolOneIsOne, 2 = Ternary
//   6       4     rows (u32)
//   10      4     cols (u32)
//   14      4     scale (IEEE-754 binary32)
//   18      8*W   words (u64); one plane for binary kinds, pos then neg for
//                 ternary. W = rows * ceil(cols / 64) per plane.

#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "bwta/bitpack.hpp"

namespace bwta {

inline constexpr std::uint8_t kBwtaVersion = 1;
inline constexpr std::size_t kBwtaHeaderBytes = 18;

enum class BwtaKind : std::uint8_t { SignNegIsOne = 0, BoolOneIsOne = 1, Ternary = 2 };

struct BwtaFile {
  float scale = 1.0f;
  std::variant<PackedBinaryMatrix, PackedTernaryMatrix> matrix;

  BwtaKind kind() const;
  std::size_t rows() const;
  std::size_t cols() const;
};

std::vector<std::uint8_t> encode_bwta(const BwtaFile& file);
/// Throws std::runtime_error on truncated, corrupt or unsupported input.
BwtaFile decode_bwta(std::span<const std::uint8_t> bytes);

void write_bwta(const std::filesystem::path& path, const BwtaFile& file);
BwtaFile read_bwta(const std::filesystem::path& path);

/// Integer view of the stored matrix (unpack of whichever kind it holds).
IntMatrix unpack(const BwtaFile& file);

}  // namespace bwta
