// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the unit tests and the acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bwta/layers.hpp"

namespace bwta::testing {

inline IntMatrix random_ints(std::size_t rows, std::size_t cols, std::vector<float> grid, std::uint64_t seed) {
  const auto f = random_matrix(rows, cols, Grid{std::move(grid)}, seed);
  IntMatrix q(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) q[i] = static_cast<int>(f[i]);
  return q;
}

/// Block with scales calibrated on a few standard-normal [t x d_model] inputs.
inline TransformerBlock calibrated_block(const BlockConfig& cfg, std::uint64_t seed, std::size_t t) {
  TransformerBlock b(cfg, seed);
  std::vector<DenseMatrix> xs;
  for (std::uint64_t i = 0; i < 4; ++i) xs.push_back(random_matrix(t, cfg.d_model, Normal{0, 1}, seed * 10 + i));
  b.calibrate(xs);
  return b;
}

struct ScaleGradCheck {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  bool valid = false;  // both perturbed passes stayed on the base pass's smooth piece

  double rel_error() const {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
    return std::fabs(analytic - numeric) / denom;
  }
};

/// Central differences of L(s) = sum(g * block(x)) for every activation
/// scale against the analytic backward pass, on the frozen-residual
/// surrogate (LSQ normalizer off, since the surrogate has none).
///
/// Residuals are recorded at the block's scales, where every quantized
/// product lies on an integer lattice and many pre-ReLU values are exactly
/// zero, i.e. on a kink. The check therefore runs at scales shifted a few
/// steps off the recording point, where the surrogate is generic.
inline std::vector<ScaleGradCheck> check_scale_grads(TransformerBlock block, const DenseMatrix& input,
                                                     const DenseMatrix& upstream, double step) {
  const DoubleMatrix x = to_double(input), g = to_double(upstream);
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    block.scale(s).state.lsq_normalizer = false;
    block.scale(s).grad = 0.0f;
  }
  auto loss = [&](const DoubleMatrix& out) {
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += g[i] * out[i];
    return total;
  };

  QuantTrace trace;
  trace.residuals = QuantTrace::Residuals::Record;
  block.forward_train(x, trace, nullptr);

  for (std::size_t s = 0; s < kSlotCount; ++s)
    block.scale(s).state.scale += static_cast<float>((2.5 + 0.37 * double(s)) * step);

  trace.residuals = QuantTrace::Residuals::Replay;
  std::vector<std::uint8_t> base_pattern;
  trace.pattern = &base_pattern;
  trace.rewind();
  TransformerBlock::Cache cache;
  block.forward_train(x, trace, &cache);
  block.backward(cache, g, trace);

  std::vector<ScaleGradCheck> out;
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    ScaleGradCheck c;
    c.name = slot_name(s);
    c.analytic = block.scale(s).grad;
    const float base = block.scale(s).state.scale;
    const float at[2] = {static_cast<float>(base + step), static_cast<float>(base - step)};
    double value[2];
    bool same = true;
    for (int side = 0; side < 2; ++side) {
      block.scale(s).state.scale = at[side];
      std::vector<std::uint8_t> pattern;
      trace.pattern = &pattern;
      trace.rewind();
      value[side] = loss(block.forward_train(x, trace, nullptr));
      same = same && pattern == base_pattern;
    }
    block.scale(s).state.scale = base;
    c.numeric = (value[0] - value[1]) / (double(at[0]) - double(at[1]));
    c.valid = same;
    out.push_back(c);
  }
  return out;
}

}  // namespace bwta::testing
