// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace bwta {

/// Row-major 2-D matrix with value semantics. Element (r, c) lives at
/// data[r * cols + c].
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                  " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using DenseMatrix = Matrix<float>;
using IntMatrix = Matrix<std::int32_t>;
/// Training passes run in double so finite-difference checks of whole
/// blocks resolve gradients far below float rounding noise.
using DoubleMatrix = Matrix<double>;

std::string shape_string(std::size_t rows, std::size_t cols);

template <typename T>
std::string shape_of(const Matrix<T>& m) {
  return shape_string(m.rows(), m.cols());
}

// xoshiro256** seeded through splitmix64. Fixed so fixtures are reproducible
// across standard libraries (std::normal_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via the Marsaglia polar method.
  double normal();
  std::size_t below(std::size_t n);

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct Normal {
  double mean = 0.0;
  double stddev = 1.0;
};
struct Uniform {
  double lo = 0.0;
  double hi = 1.0;
};
struct Grid {
  std::vector<float> values;
};
using Distribution = std::variant<Normal, Uniform, Grid>;

DenseMatrix random_matrix(std::size_t rows, std::size_t cols, const Distribution& dist,
                          std::uint64_t seed);

/// out[m][n] = sum_k a[m][k] * b[n][k]. Both operands are reduction-major.
DenseMatrix gemm_f32(const DenseMatrix& a, const DenseMatrix& b);

/// Exact integer reference for the bitwise kernels; same layout as gemm_f32.
IntMatrix gemm_int_oracle(const IntMatrix& a, const IntMatrix& b);

DenseMatrix transpose(const DenseMatrix& m);
IntMatrix transpose(const IntMatrix& m);
DoubleMatrix transpose(const DoubleMatrix& m);
DoubleMatrix to_double(const DenseMatrix& m);
DenseMatrix to_float(const DoubleMatrix& m);
DenseMatrix to_dense(const IntMatrix& m);
bool all_finite(const DenseMatrix& m);
bool all_finite(const DoubleMatrix& m);

}  // namespace bwta
