// SPDX-License-Identifier: Apache-2.0
// Kernel verification and micro-benchmark harness behind the `bwta` CLI.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bwta {

// ---------------------------------------------------------------------------
// verify

struct VerifyOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 200;
  /// Flips one plane_neg bit of the activation operand in the first trial,
  /// to show that the harness catches and locates a corrupted operand.
  bool inject_flip = false;
};

struct Counterexample {
  std::string check;  // case1, case1-naive-and, case2, case3, pack-*, padding
  std::size_t m = 0, n = 0, k = 0;
  std::uint64_t seed = 0;  // per-trial seed
  std::size_t row = 0, col = 0;
  long long expected = 0, actual = 0;

  std::string describe() const;
};

struct VerifyReport {
  std::size_t trials = 0;
  std::size_t checks = 0;
  std::optional<Counterexample> failure;  // first one found
  std::vector<std::string> warnings;

  bool passed() const { return !failure; }
};

/// Per trial: random M, N in [1, 16] and K in [1, 257]; every kernel case
/// against gemm_int_oracle, pack/unpack roundtrips and clear padding bits.
VerifyReport run_verify(const VerifyOptions& opts);

// ---------------------------------------------------------------------------
// bench

enum class BenchCase { Fp32, Case1, Case1NaiveAnd, Case2, Case3, PackBinary, PackTernary };

BenchCase parse_bench_case(const std::string& name);
const char* bench_case_name(BenchCase c);
bool is_gemm(BenchCase c);

/// Output is [M x N] with reduction K for the GEMM cases; the pack cases
/// pack an [M x K] matrix and ignore N.
struct BenchSpec {
  BenchCase kase = BenchCase::Case1;
  std::size_t m = 128, n = 128, k = 128;
  std::size_t repeats = 50;
  std::size_t warmup = 5;
  bool check = true;
  bool parallel = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// Bytes for operands, packed copies, outputs and (when checking) the oracle.
  std::size_t estimated_bytes() const;
  /// 2 M N K for GEMM cases, M K for packing.
  double ops() const;
};

struct BenchRow {
  BenchSpec spec;
  double median_us = 0.0, min_us = 0.0, max_us = 0.0;
  double gops = 0.0;  // ops() / median
  std::uint64_t checksum = 0;
  bool checksum_stable = true;  // every repeat produced the same checksum
  std::string check = "skipped";  // pass | fail | skipped
};

/// Default ceiling for estimated_bytes(): half of physical memory.
std::size_t bench_memory_limit();

/// Throws std::invalid_argument on a bad spec or one whose size estimate
/// exceeds `memory_limit`.
BenchRow run_bench(const BenchSpec& spec, std::size_t memory_limit = bench_memory_limit());

/// Transformer-scale shapes: linear layers, Att x V and Q x K^T,
/// each with its BWTA case and an fp32 baseline row.
std::vector<BenchSpec> layer_shape_preset(const BenchSpec& base);

std::string machine_specs();

enum class ReportFormat { Csv, Markdown };
void write_bench_report(const std::vector<BenchRow>& rows, ReportFormat format, std::ostream& out);

}  // namespace bwta
