// SPDX-License-Identifier: Apache-2.0
#include "bwta/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace bwta {

QuantMode QuantMode::levelwise(int half_range) {
  if (half_range < 1) throw std::invalid_argument("levelwise: L must be >= 1");
  return {QuantKind::Signed, half_range};
}

QuantMode QuantMode::unsigned_levels(int top) {
  if (top < 1) throw std::invalid_argument("unsigned_levels: L must be >= 1");
  return {QuantKind::Unsigned, top};
}

int QuantMode::lo() const {
  switch (kind) {
    case QuantKind::SignBinary: return -1;
    case QuantKind::Unsigned: return 0;
    case QuantKind::Signed: return -levels;
  }
  return 0;
}

int QuantMode::hi() const { return kind == QuantKind::SignBinary ? 1 : levels; }

QuantMode QuantMode::with_levels(int half_range) const {
  switch (kind) {
    case QuantKind::SignBinary: return *this;
    case QuantKind::Unsigned: return unsigned_levels(half_range);
    case QuantKind::Signed: return levelwise(half_range);
  }
  return *this;
}

std::string QuantMode::name() const {
  switch (kind) {
    case QuantKind::SignBinary: return "sign";
    case QuantKind::Unsigned: return levels == 1 ? "bool" : "unsigned" + std::to_string(levels);
    case QuantKind::Signed: return levels == 1 ? "ternary" : "levelwise" + std::to_string(levels);
  }
  return "?";
}

QuantState::QuantState(float s, QuantMode m, bool normalize)
    : scale(std::max(s, kScaleFloor)), mode(m), lsq_normalizer(normalize) {
  if (!(s > 0.0f)) throw std::invalid_argument("QuantState: scale must be positive");
}

void QuantState::set_scale(float s) {
  scale = std::isfinite(s) ? std::max(s, kScaleFloor) : kScaleFloor;
}

float QuantState::grad_scale(std::size_t n) const {
  if (!lsq_normalizer || n == 0) return 1.0f;
  const double hi = std::max(1, mode.hi());
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(n) * hi));
}

WeightSigns weight_sign_quantize(const DenseMatrix& w) {
  if (w.empty()) throw std::invalid_argument("weight_sign_quantize: empty matrix");
  double sum = 0.0, sq = 0.0;
  for (float x : w.values()) {
    sum += x;
    sq += static_cast<double>(x) * x;
  }
  const double n = static_cast<double>(w.size());
  WeightSigns out;
  out.mean = static_cast<float>(sum / n);
  out.scale = static_cast<float>(std::sqrt(sq) / n);
  out.signs = IntMatrix(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) out.signs[i] = (w[i] - out.mean >= 0.0f) ? 1 : -1;
  return out;
}

float activation_scale_init(const DenseMatrix& a) {
  if (a.empty()) throw std::invalid_argument("activation_scale_init: empty matrix");
  double l1 = 0.0;
  for (float x : a.values()) l1 += std::fabs(x);
  if (l1 == 0.0) throw std::invalid_argument("activation_scale_init: all-zero input");
  return static_cast<float>(2.0 * l1 / static_cast<double>(a.size()));
}

namespace {

void check_scale(const QuantState& st) {
  if (!(st.scale > 0.0f)) throw std::invalid_argument("quantizer scale must be positive");
}

// Shared by quantize and the fused packers so both agree on boundary values.
template <typename T>
inline T grid_point(T a, float s, T lo, T hi) {
  const T v = a / static_cast<T>(s);
  return std::round(std::clamp(v, lo, hi));
}

}  // namespace

IntMatrix quantize(const DenseMatrix& a, const QuantState& state) {
  check_scale(state);
  IntMatrix q(a.rows(), a.cols());
  if (state.mode.kind == QuantKind::SignBinary) {
    for (std::size_t i = 0; i < a.size(); ++i) q[i] = a[i] >= 0.0f ? 1 : -1;
    return q;
  }
  const float lo = static_cast<float>(state.mode.lo());
  const float hi = static_cast<float>(state.mode.hi());
  for (std::size_t i = 0; i < a.size(); ++i)
    q[i] = static_cast<std::int32_t>(grid_point(a[i], state.scale, lo, hi));
  return q;
}

DenseMatrix dequantize(const IntMatrix& q, const QuantState& state) {
  check_scale(state);
  const int lo = state.mode.lo(), hi = state.mode.hi();
  const bool sign = state.mode.kind == QuantKind::SignBinary;
  DenseMatrix out(q.rows(), q.cols());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const int v = q[i];
    if (v < lo || v > hi || (sign && v == 0)) {
      throw std::invalid_argument("dequantize: integer " + std::to_string(v) + " outside " +
                                  state.mode.name() + " grid at index " + std::to_string(i));
    }
    out[i] = state.scale * static_cast<float>(v);
  }
  return out;
}

namespace {

template <typename T>
Matrix<T> fake_quantize_impl(const Matrix<T>& a, const QuantState& state) {
  check_scale(state);
  Matrix<T> out(a.rows(), a.cols());
  const T s = state.scale;
  if (state.mode.kind == QuantKind::SignBinary) {
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] >= T(0) ? s : -s;
    return out;
  }
  const T lo = static_cast<T>(state.mode.lo());
  const T hi = static_cast<T>(state.mode.hi());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * grid_point(a[i], state.scale, lo, hi);
  return out;
}

template <typename T>
BasicSteGrad<T> ste_backward_impl(const Matrix<T>& a, const QuantState& state, const Matrix<T>& upstream) {
  if (a.rows() != upstream.rows() || a.cols() != upstream.cols()) {
    throw std::invalid_argument("ste_backward: shape mismatch " + shape_of(a) + " vs " +
                                shape_of(upstream));
  }
  check_scale(state);
  BasicSteGrad<T> g{Matrix<T>(a.rows(), a.cols()), T(0)};
  double acc = 0.0;
  if (state.mode.kind == QuantKind::SignBinary) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      g.grad_input[i] = upstream[i];
      acc += static_cast<double>(upstream[i]) * (a[i] >= T(0) ? 1.0 : -1.0);
    }
  } else {
    const T lo = static_cast<T>(state.mode.lo());
    const T hi = static_cast<T>(state.mode.hi());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T v = a[i] / static_cast<T>(state.scale);
      double d;
      if (v < lo) {
        d = lo;
      } else if (v > hi) {
        d = hi;
      } else {
        g.grad_input[i] = upstream[i];
        d = static_cast<double>(std::round(v)) - v;
      }
      acc += static_cast<double>(upstream[i]) * d;
    }
  }
  g.grad_scale = static_cast<T>(acc * state.grad_scale(a.size()));
  return g;
}

template <typename T>
Matrix<T> rounding_residual_impl(const Matrix<T>& a, const QuantState& state) {
  check_scale(state);
  Matrix<T> out(a.rows(), a.cols());
  if (state.mode.kind == QuantKind::SignBinary) return out;
  const T lo = static_cast<T>(state.mode.lo());
  const T hi = static_cast<T>(state.mode.hi());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T c = std::clamp(a[i] / static_cast<T>(state.scale), lo, hi);
    out[i] = std::round(c) - c;
  }
  return out;
}

template <typename T>
Matrix<T> surrogate_impl(const Matrix<T>& a, const QuantState& state, const Matrix<T>& residual) {
  if (a.rows() != residual.rows() || a.cols() != residual.cols()) {
    throw std::invalid_argument("surrogate_dequantize: residual shape mismatch");
  }
  if (state.mode.kind == QuantKind::SignBinary) return fake_quantize_impl(a, state);
  const T lo = static_cast<T>(state.mode.lo());
  const T hi = static_cast<T>(state.mode.hi());
  const T s = state.scale;
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * (std::clamp(a[i] / s, lo, hi) + residual[i]);
  return out;
}

}  // namespace

DenseMatrix fake_quantize(const DenseMatrix& a, const QuantState& state) { return fake_quantize_impl(a, state); }
DoubleMatrix fake_quantize(const DoubleMatrix& a, const QuantState& state) { return fake_quantize_impl(a, state); }

SteGrad ste_backward(const DenseMatrix& a, const QuantState& state, const DenseMatrix& upstream) {
  return ste_backward_impl(a, state, upstream);
}
BasicSteGrad<double> ste_backward(const DoubleMatrix& a, const QuantState& state, const DoubleMatrix& upstream) {
  return ste_backward_impl(a, state, upstream);
}

DenseMatrix rounding_residual(const DenseMatrix& a, const QuantState& state) {
  return rounding_residual_impl(a, state);
}
DoubleMatrix rounding_residual(const DoubleMatrix& a, const QuantState& state) {
  return rounding_residual_impl(a, state);
}

DenseMatrix surrogate_dequantize(const DenseMatrix& a, const QuantState& state, const DenseMatrix& residual) {
  return surrogate_impl(a, state, residual);
}
DoubleMatrix surrogate_dequantize(const DoubleMatrix& a, const QuantState& state,
                                  const DoubleMatrix& residual) {
  return surrogate_impl(a, state, residual);
}

BasicSteGrad<double> surrogate_backward(const DoubleMatrix& a, const QuantState& state,
                                        const DoubleMatrix& residual, const DoubleMatrix& upstream) {
  if (a.rows() != upstream.rows() || a.cols() != upstream.cols() || a.rows() != residual.rows() ||
      a.cols() != residual.cols()) {
    throw std::invalid_argument("surrogate_backward: shape mismatch " + shape_of(a) + ", " +
                                shape_of(residual) + ", " + shape_of(upstream));
  }
  if (state.mode.kind == QuantKind::SignBinary) return ste_backward(a, state, upstream);
  check_scale(state);
  BasicSteGrad<double> g{DoubleMatrix(a.rows(), a.cols()), 0.0};
  const double lo = state.mode.lo(), hi = state.mode.hi();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = a[i] / state.scale;
    double d = residual[i];
    if (v < lo) {
      d += lo;
    } else if (v > hi) {
      d += hi;
    } else {
      g.grad_input[i] = upstream[i];
    }
    acc += upstream[i] * d;
  }
  g.grad_scale = acc * state.grad_scale(a.size());
  return g;
}

float boundary_margin(const DenseMatrix& a, const QuantState& state, bool include_rounding) {
  if (state.mode.kind == QuantKind::SignBinary) return std::numeric_limits<float>::infinity();
  const float lo = static_cast<float>(state.mode.lo());
  const float hi = static_cast<float>(state.mode.hi());
  float margin = std::numeric_limits<float>::infinity();
  for (float x : a.values()) {
    if (x == 0.0f) continue;
    const float v = x / state.scale;
    margin = std::min({margin, std::fabs(v - lo), std::fabs(v - hi)});
    if (include_rounding && v > lo && v < hi) {
      const float frac = v - std::floor(v);
      margin = std::min(margin, std::fabs(frac - 0.5f));
    }
  }
  return margin;
}

}  // namespace bwta
