// SPDX-License-Identifier: Apache-2.0
#include "bwta/bitpack.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>
#include <string>

namespace bwta {

namespace {

void check_scale(float s, const char* who) {
  if (!(s > 0.0f)) throw std::invalid_argument(std::string(who) + ": scale must be positive");
}

}  // namespace

PackedBinaryMatrix pack_sign(const IntMatrix& signs) {
  PackedBinaryMatrix p(signs.rows(), signs.cols(), BinaryKind::SignNegIsOne);
  for (std::size_t r = 0; r < signs.rows(); ++r) {
    auto dst = p.row(r);
    const auto src = signs.row(r);
    for (std::size_t k = 0; k < src.size(); ++k) {
      const int v = src[k];
      if (v != 1 && v != -1) {
        throw std::invalid_argument("pack_sign: entry " + std::to_string(v) + " at (" +
                                    std::to_string(r) + "," + std::to_string(k) +
                                    ") is not +-1");
      }
      dst[k / kWordBits] |= std::uint64_t{v < 0} << (k % kWordBits);
    }
  }
  return p;
}

PackedTernaryMatrix pack_ternary(const DenseMatrix& a, float scale) {
  check_scale(scale, "pack_ternary");
  PackedTernaryMatrix p(a.rows(), a.cols());
  const std::size_t wpr = p.words_per_row;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const float* src = a.data() + r * a.cols();
    for (std::size_t w = 0; w < wpr; ++w) {
      const std::size_t base = w * kWordBits;
      const std::size_t n = std::min(kWordBits, a.cols() - base);
      std::uint64_t pos = 0, neg = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const float v = src[base + b] / scale;
        pos |= std::uint64_t{v >= 0.5f} << b;
        neg |= std::uint64_t{v <= -0.5f} << b;
      }
      p.pos[r * wpr + w] = pos;
      p.neg[r * wpr + w] = neg;
    }
  }
  return p;
}

PackedBinaryMatrix pack_bool(const DenseMatrix& a, float scale) {
  check_scale(scale, "pack_bool");
  PackedBinaryMatrix p(a.rows(), a.cols(), BinaryKind::BoolOneIsOne);
  const std::size_t wpr = p.words_per_row;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const float* src = a.data() + r * a.cols();
    for (std::size_t w = 0; w < wpr; ++w) {
      const std::size_t base = w * kWordBits;
      const std::size_t n = std::min(kWordBits, a.cols() - base);
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < n; ++b) bits |= std::uint64_t{src[base + b] / scale >= 0.5f} << b;
      p.words[r * wpr + w] = bits;
    }
  }
  return p;
}

PackedTernaryMatrix pack_ternary_ints(const IntMatrix& q) {
  PackedTernaryMatrix p(q.rows(), q.cols());
  const std::size_t wpr = p.words_per_row;
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t k = 0; k < q.cols(); ++k) {
      const int v = q(r, k);
      const std::uint64_t bit = std::uint64_t{1} << (k % kWordBits);
      const std::size_t w = r * wpr + k / kWordBits;
      if (v == 1) {
        p.pos[w] |= bit;
      } else if (v == -1) {
        p.neg[w] |= bit;
      } else if (v != 0) {
        throw std::invalid_argument("pack_ternary_ints: entry " + std::to_string(v) +
                                    " is not in {-1,0,1}");
      }
    }
  }
  return p;
}

PackedTernaryMatrix bool_as_ternary(const PackedBinaryMatrix& b) {
  if (b.kind != BinaryKind::BoolOneIsOne) {
    throw std::invalid_argument("bool_as_ternary: matrix is not boolean");
  }
  PackedTernaryMatrix p(b.rows, b.cols);
  p.pos = b.words;
  return p;
}

IntMatrix unpack(const PackedBinaryMatrix& p) {
  validate(p);
  IntMatrix out(p.rows, p.cols);
  const bool sign = p.kind == BinaryKind::SignNegIsOne;
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto words = p.row(r);
    for (std::size_t k = 0; k < p.cols; ++k) {
      const bool bit = (words[k / kWordBits] >> (k % kWordBits)) & 1u;
      out(r, k) = sign ? (bit ? -1 : 1) : (bit ? 1 : 0);
    }
  }
  return out;
}

IntMatrix unpack(const PackedTernaryMatrix& p) {
  validate(p);
  IntMatrix out(p.rows, p.cols);
  for (std::size_t r = 0; r < p.rows; ++r) {
    const auto pos = p.pos_row(r);
    const auto neg = p.neg_row(r);
    for (std::size_t k = 0; k < p.cols; ++k) {
      const int bp = static_cast<int>((pos[k / kWordBits] >> (k % kWordBits)) & 1u);
      const int bn = static_cast<int>((neg[k / kWordBits] >> (k % kWordBits)) & 1u);
      out(r, k) = bp - bn;
    }
  }
  return out;
}

namespace {

void check_padding(std::span<const std::uint64_t> words, std::size_t rows, std::size_t cols,
                   std::size_t wpr, const char* plane) {
  if (wpr == 0) return;
  const std::uint64_t mask = tail_mask(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (words[r * wpr + wpr - 1] & ~mask) {
      throw std::invalid_argument(std::string("packed matrix: nonzero padding bits in ") + plane +
                                  " row " + std::to_string(r));
    }
  }
}

}  // namespace

void validate(const PackedBinaryMatrix& p) {
  if (p.words_per_row != words_for(p.cols) || p.words.size() != p.rows * p.words_per_row) {
    throw std::invalid_argument("packed binary matrix: inconsistent geometry");
  }
  check_padding(p.words, p.rows, p.cols, p.words_per_row, "plane");
}

void validate(const PackedTernaryMatrix& p) {
  const std::size_t n = p.rows * p.words_per_row;
  if (p.words_per_row != words_for(p.cols) || p.pos.size() != n || p.neg.size() != n) {
    throw std::invalid_argument("packed ternary matrix: inconsistent geometry");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (p.pos[i] & p.neg[i]) {
      const std::size_t r = i / p.words_per_row;
      const std::size_t k = (i % p.words_per_row) * kWordBits +
                            static_cast<std::size_t>(std::countr_zero(p.pos[i] & p.neg[i]));
      throw std::invalid_argument("packed ternary matrix: planes intersect at (" +
                                  std::to_string(r) + "," + std::to_string(k) + ")");
    }
  }
  check_padding(p.pos, p.rows, p.cols, p.words_per_row, "plane_pos");
  check_padding(p.neg, p.rows, p.cols, p.words_per_row, "plane_neg");
}

}  // namespace bwta
