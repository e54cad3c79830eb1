// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bwta/quant.hpp"
#include "bwta/tensor.hpp"

namespace bwta {

struct Stage {
  int levels = 1;  // half-range L: signed grids span [-L, L]
  int epochs = 1;
  bool operator==(const Stage&) const = default;
};

/// Multi-stage quantization schedule. Levels strictly decrease to 1 and the
/// epochs sum to total_epochs, each stage getting at least one.
struct Schedule {
  std::vector<Stage> stages;
  int total_epochs = 0;

  void validate() const;
  std::vector<int> levels() const;
  std::vector<int> epochs() const;
  /// Stage index that owns a 0-based epoch.
  std::size_t stage_of_epoch(int epoch) const;
};

/// Levelwise schedule L0, L0 - stride, ..., 1. The final stage gets
/// ceil(total/2) epochs; the rest are split evenly over the earlier stages,
/// leftovers going one each to the stages just before the final one.
Schedule build_schedule(int l0, int stride, int total_epochs);

/// Bitwise baseline: L0, L0/2, ..., 1 with the same epoch allocation.
Schedule build_bitwise_schedule(int l0, int total_epochs);

/// Converts a level count (2L + 1 integers) to the half-range L.
int half_range_from_count(int count);

/// Sum|prev| / Sum|cur|. Throws when Sum|cur| == 0 or shapes differ.
double projection_factor(const IntMatrix& prev, const IntMatrix& cur);

/// Fraction of entries that quantize to 0 at scale s on the signed grid [-L, L].
double zero_fraction(const DenseMatrix& a, float s, int levels);

enum class TransitionStrategy {
  Ours,  // s <- s * projection_factor
  Mean,  // s <- 2 mean|A|
  None,  // keep s
};

TransitionStrategy parse_strategy(const std::string& name);
const char* strategy_name(TransitionStrategy s);

/// New scale for one quantizer moving from `from` to `to` (same kind), given
/// calibration activations. Ours falls back to the old scale when the new
/// grid quantizes the whole batch to zero.
float transition_scale(const DenseMatrix& calib, const QuantState& from, const QuantMode& to,
                       TransitionStrategy strategy);

// ---------------------------------------------------------------------------
// Convergence diagnostics over per-epoch scale histories

struct ScaleTrace {
  std::string name;
  std::vector<double> values;  // one per epoch
  std::vector<double> grads;   // mean |gradient| per epoch
};

struct ScaleVerdict {
  std::string name;
  bool converged = true;
  std::vector<std::string> tags;  // diverging, oscillating, vanished-gradient
};

struct ConvergenceReport {
  double non_converged_fraction = 0.0;
  std::vector<ScaleVerdict> scales;
};

/// A scale is non-converged when max|delta s| over the last window_frac of
/// epochs exceeds tol * |s_final|. Non-converged scales are tagged diverging
/// (all deltas in the window share a sign) or oscillating (the delta sign
/// flips on at least half the window steps). Any scale whose mean |grad|
/// over the window fell below 1% of its peak epoch value is tagged
/// vanished-gradient.
ConvergenceReport convergence_report(const std::vector<ScaleTrace>& traces, double window_frac, double tol);

}  // namespace bwta
