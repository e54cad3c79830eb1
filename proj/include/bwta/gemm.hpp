// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

#include "bwta/bitpack.hpp"
#include "bwta/tensor.hpp"

namespace bwta {

/// Reduction lengths above this are rejected so int32 accumulators cannot overflow.
inline constexpr std::size_t kMaxReduction = std::size_t{1} << 24;

struct KernelConfig {
  std::size_t row_tile = 4;  // output rows per micro-tile
  std::size_t col_tile = 4;  // output cols per micro-tile
  bool parallel = false;     // split row blocks across worker threads
  std::size_t workers = 0;   // 0: hardware concurrency

  void validate() const;
};

// All kernels take both operands reduction-major (row-row dot products) and
// return raw integer sums; out is [left.rows x right.rows].

/// Binary (+-1) weight x ternary activation:
/// popcount(w ^ a+) - popcount(w ^ a-) per word.
IntMatrix gemm_case1(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                     const KernelConfig& cfg = {});

/// Same contract as gemm_case1 using the unsimplified AND/NOT expansion:
/// -pc(w & a+) + pc(w & a-) + pc(~w & a+) - pc(~w & a-).
IntMatrix gemm_case1_naive_and(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                               const KernelConfig& cfg = {});

/// Boolean attention x ternary value: pc(att & v+) - pc(att & v-).
IntMatrix gemm_case2(const PackedBinaryMatrix& att, const PackedTernaryMatrix& v,
                     const KernelConfig& cfg = {});

/// Ternary x ternary:
/// pc(q+ & k+) + pc(q- & k-) - pc(q+ & k-) - pc(q- & k+).
IntMatrix gemm_case3(const PackedTernaryMatrix& q, const PackedTernaryMatrix& k,
                     const KernelConfig& cfg = {});

enum class KernelCase { Case1, Case1NaiveAnd, Case2, Case3 };

const char* kernel_case_name(KernelCase c);

/// Word-level primitive counts for one evaluation of a kernel.
struct WordOpCounts {
  std::uint64_t logic = 0;     // and / xor / not
  std::uint64_t popcount = 0;
  std::uint64_t add_sub = 0;   // combining subtractions and accumulation
  std::uint64_t outputs = 0;

  std::uint64_t total() const { return logic + popcount + add_sub; }
  double per_output() const {
    return outputs ? static_cast<double>(total()) / static_cast<double>(outputs) : 0.0;
  }
};

/// Runs the kernel through a counting policy. The result is returned too so
/// callers can confirm the instrumented path computes the same thing.
WordOpCounts count_word_ops(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                            KernelCase which, IntMatrix* result = nullptr);
WordOpCounts count_word_ops(const PackedTernaryMatrix& q, const PackedTernaryMatrix& k,
                            IntMatrix* result = nullptr);

}  // namespace bwta
