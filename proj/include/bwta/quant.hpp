// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>

#include "bwta/tensor.hpp"

namespace bwta {

inline constexpr float kScaleFloor = 1e-6f;

enum class QuantKind {
  SignBinary,  // {-1, +1}, sign(0) = +1
  Unsigned,    // [0, L]; L = 1 is the boolean quantizer
  Signed,      // [-L, L]; L = 1 is the ternary quantizer
};

/// Quantizer grid. Ternary is Signed with L = 1 and Bool is Unsigned with
/// L = 1; larger L are the intermediate levelwise stages.
struct QuantMode {
  QuantKind kind = QuantKind::Signed;
  int levels = 1;

  static QuantMode sign_binary() { return {QuantKind::SignBinary, 1}; }
  static QuantMode boolean() { return {QuantKind::Unsigned, 1}; }
  static QuantMode ternary() { return {QuantKind::Signed, 1}; }
  static QuantMode levelwise(int half_range);
  static QuantMode unsigned_levels(int top);

  int lo() const;
  int hi() const;
  bool is_ternary() const { return kind == QuantKind::Signed && levels == 1; }
  bool is_boolean() const { return kind == QuantKind::Unsigned && levels == 1; }
  /// Same kind with a different half-range (SignBinary is unaffected).
  QuantMode with_levels(int half_range) const;
  std::string name() const;

  bool operator==(const QuantMode&) const = default;
};

/// A learnable quantizer: scale, grid, and whether the LSQ gradient
/// normalizer 1/sqrt(n * hi) is applied to the scale gradient.
struct QuantState {
  float scale = 1.0f;
  QuantMode mode = QuantMode::ternary();
  bool lsq_normalizer = true;

  QuantState() = default;
  QuantState(float s, QuantMode m, bool normalize = true);

  /// Assigns s, clamped to kScaleFloor.
  void set_scale(float s);
  float grad_scale(std::size_t n) const;
};

struct WeightSigns {
  IntMatrix signs;  // {-1, +1}
  float scale = 0.0f;  // ||W||_F / n_W
  float mean = 0.0f;
};

WeightSigns weight_sign_quantize(const DenseMatrix& w);

/// 2 * mean(|A|). Throws on empty or all-zero input.
float activation_scale_init(const DenseMatrix& a);

/// Round-half-away-from-zero of clip(A / s) onto the mode's grid.
IntMatrix quantize(const DenseMatrix& a, const QuantState& state);
DenseMatrix dequantize(const IntMatrix& q, const QuantState& state);
/// dequantize(quantize(a)) without the integer intermediate.
DenseMatrix fake_quantize(const DenseMatrix& a, const QuantState& state);
DoubleMatrix fake_quantize(const DoubleMatrix& a, const QuantState& state);

template <typename T>
struct BasicSteGrad {
  Matrix<T> grad_input;
  T grad_scale = 0;
};
using SteGrad = BasicSteGrad<float>;

/// Clipped STE for the input and the LSQ gradient for the scale.
SteGrad ste_backward(const DenseMatrix& a, const QuantState& state, const DenseMatrix& upstream);
BasicSteGrad<double> ste_backward(const DoubleMatrix& a, const QuantState& state,
                                  const DoubleMatrix& upstream);

/// round(clip(v)) - clip(v) per element at the state's scale.
DenseMatrix rounding_residual(const DenseMatrix& a, const QuantState& state);
DoubleMatrix rounding_residual(const DoubleMatrix& a, const QuantState& state);

/// s * (clip(A / s) + residual): the differentiable surrogate whose exact
/// derivative in s is the LSQ scale gradient. Equals fake_quantize when the
/// residual was taken at the same scale.
DenseMatrix surrogate_dequantize(const DenseMatrix& a, const QuantState& state,
                                 const DenseMatrix& residual);
DoubleMatrix surrogate_dequantize(const DoubleMatrix& a, const QuantState& state,
                                  const DoubleMatrix& residual);

/// Exact derivative of surrogate_dequantize: upstream passes where A / s
/// is inside the clip range; the scale gets residual there and bound +
/// residual where clipped, times the LSQ normalizer. At the scale the
/// residual was taken this equals ste_backward.
BasicSteGrad<double> surrogate_backward(const DoubleMatrix& a, const QuantState& state,
                                        const DoubleMatrix& residual, const DoubleMatrix& upstream);

/// Smallest distance of any A / s to a clip edge (and, optionally, to a
/// rounding midpoint). Exact zeros are skipped since they map to zero for
/// every scale.
float boundary_margin(const DenseMatrix& a, const QuantState& state, bool include_rounding);

}  // namespace bwta
