// SPDX-License-Identifier: Apache-2.0
#include "bwta/tensor.hpp"

#include <cmath>
#include <type_traits>

namespace bwta {

std::string shape_string(std::size_t rows, std::size_t cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

std::size_t Rng::below(std::size_t n) {
  // Lemire's multiply-shift; the bias is negligible for fixture sizes.
  return static_cast<std::size_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

DenseMatrix random_matrix(std::size_t rows, std::size_t cols, const Distribution& dist,
                          std::uint64_t seed) {
  if (rows == 0 || cols == 0) {
    throw std::invalid_argument("random_matrix: zero dimension " + shape_string(rows, cols));
  }
  Rng rng(seed);
  DenseMatrix out(rows, cols);
  std::visit(
      [&](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<D, Normal>) {
          for (auto& x : out.values()) x = static_cast<float>(d.mean + d.stddev * rng.normal());
        } else if constexpr (std::is_same_v<D, Uniform>) {
          for (auto& x : out.values()) x = static_cast<float>(rng.uniform(d.lo, d.hi));
        } else {
          if (d.values.empty()) throw std::invalid_argument("random_matrix: empty grid");
          for (auto& x : out.values()) x = d.values[rng.below(d.values.size())];
        }
      },
      dist);
  return out;
}

DenseMatrix gemm_f32(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("gemm_f32: reduction mismatch A" + shape_of(a) + " B" +
                                shape_of(b));
  }
  const std::size_t m_count = a.rows(), n_count = b.rows(), k_count = a.cols();
  DenseMatrix out(m_count, n_count);
  for (std::size_t m = 0; m < m_count; ++m) {
    const float* ar = a.data() + m * k_count;
    for (std::size_t n = 0; n < n_count; ++n) {
      const float* br = b.data() + n * k_count;
      float acc = 0.0f;
      for (std::size_t k = 0; k < k_count; ++k) acc += ar[k] * br[k];
      out(m, n) = acc;
    }
  }
  return out;
}

IntMatrix gemm_int_oracle(const IntMatrix& a, const IntMatrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("gemm_int_oracle: reduction mismatch A" + shape_of(a) + " B" +
                                shape_of(b));
  }
  IntMatrix out(a.rows(), b.rows());
  for (std::size_t m = 0; m < a.rows(); ++m) {
    for (std::size_t n = 0; n < b.rows(); ++n) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += std::int64_t{a(m, k)} * b(n, k);
      out(m, n) = static_cast<std::int32_t>(acc);
    }
  }
  return out;
}

namespace {
template <typename T>
Matrix<T> transpose_impl(const Matrix<T>& m) {
  Matrix<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  return out;
}
}  // namespace

DenseMatrix transpose(const DenseMatrix& m) { return transpose_impl(m); }
IntMatrix transpose(const IntMatrix& m) { return transpose_impl(m); }
DoubleMatrix transpose(const DoubleMatrix& m) { return transpose_impl(m); }

DoubleMatrix to_double(const DenseMatrix& m) {
  DoubleMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i];
  return out;
}

DenseMatrix to_float(const DoubleMatrix& m) {
  DenseMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m[i]);
  return out;
}

DenseMatrix to_dense(const IntMatrix& m) {
  DenseMatrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<float>(m[i]);
  return out;
}

bool all_finite(const DenseMatrix& m) {
  for (float x : m.values())
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const DoubleMatrix& m) {
  for (double x : m.values())
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace bwta
