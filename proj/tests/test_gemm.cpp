// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <bit>
#include <cstdlib>

#include "bwta/gemm.hpp"

using namespace bwta;

namespace {

IntMatrix random_ints(std::size_t rows, std::size_t cols, std::vector<float> grid, std::uint64_t seed) {
  const auto f = random_matrix(rows, cols, Grid{std::move(grid)}, seed);
  IntMatrix q(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) q[i] = static_cast<int>(f[i]);
  return q;
}

PackedBinaryMatrix bool_pack(const IntMatrix& b) { return pack_bool(to_dense(b), 1.0f); }

// Appends `extra` zero words to every row: cols grow by 64 * extra.
PackedBinaryMatrix widen(const PackedBinaryMatrix& p, std::size_t extra) {
  PackedBinaryMatrix out(p.rows, p.cols + 64 * extra, p.kind);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t w = 0; w < p.words_per_row; ++w) out.row(r)[w] = p.row(r)[w];
  return out;
}

PackedTernaryMatrix widen(const PackedTernaryMatrix& p, std::size_t extra) {
  PackedTernaryMatrix out(p.rows, p.cols + 64 * extra);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t w = 0; w < p.words_per_row; ++w) {
      out.pos[r * out.words_per_row + w] = p.pos_row(r)[w];
      out.neg[r * out.words_per_row + w] = p.neg_row(r)[w];
    }
  return out;
}

}  // namespace

TEST_CASE("case 1 hand example") {
  const auto w = pack_sign(IntMatrix{{1, -1, 1, 1}});
  const auto a = pack_ternary_ints(IntMatrix{{1, -1, 0, 1}});
  REQUIRE(w.words[0] == 0b0010);
  REQUIRE(a.pos[0] == 0b1001);
  REQUIRE(a.neg[0] == 0b0010);
  CHECK(gemm_case1(w, a) == IntMatrix{{3}});
  CHECK(gemm_case1_naive_and(w, a) == IntMatrix{{3}});
}

TEST_CASE("case 2 hand example") {
  const auto att = bool_pack(IntMatrix{{1, 0, 1, 1}});
  const auto v = pack_ternary_ints(IntMatrix{{-1, 1, 0, 1}});
  REQUIRE(att.words[0] == 0b1101);
  REQUIRE(v.pos[0] == 0b1010);
  REQUIRE(v.neg[0] == 0b0001);
  CHECK(gemm_case2(att, v) == IntMatrix{{0}});
}

TEST_CASE("case 3 hand example and self inner product") {
  const auto q = pack_ternary_ints(IntMatrix{{1, -1, 0, 1}});
  const auto k = pack_ternary_ints(IntMatrix{{-1, -1, 1, 1}});
  REQUIRE(q.pos[0] == 9);
  REQUIRE(q.neg[0] == 2);
  REQUIRE(k.pos[0] == 12);
  REQUIRE(k.neg[0] == 3);
  CHECK(gemm_case3(q, k) == IntMatrix{{1}});

  const auto t = random_ints(9, 150, {-1, 0, 1}, 31);
  const auto pt = pack_ternary_ints(t);
  const auto self = gemm_case3(pt, pt);
  for (std::size_t m = 0; m < t.rows(); ++m) {
    int nonzero = 0;
    for (int v : t.row(m)) nonzero += v != 0;
    CHECK(self(m, m) == nonzero);
  }
}

TEST_CASE("zero operands annihilate") {
  const auto w = pack_sign(random_ints(5, 100, {-1, 1}, 1));
  const PackedTernaryMatrix zero(3, 100);
  CHECK(gemm_case1(w, zero) == IntMatrix(5, 3, 0));
  CHECK(gemm_case1_naive_and(w, zero) == IntMatrix(5, 3, 0));
  const PackedBinaryMatrix no_att(4, 100, BinaryKind::BoolOneIsOne);
  CHECK(gemm_case2(no_att, pack_ternary_ints(random_ints(6, 100, {-1, 0, 1}, 2))) == IntMatrix(4, 6, 0));
}

TEST_CASE("kernels equal the integer oracle on fuzzed shapes") {
  Rng rng(2025);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16), k = 1 + rng.below(257);
    const auto s = random_ints(m, k, {-1, 1}, rng.next_u64());
    const auto b = random_ints(m, k, {0, 1}, rng.next_u64());
    const auto t = random_ints(m, k, {-1, 0, 1}, rng.next_u64());
    const auto u = random_ints(n, k, {-1, 0, 1}, rng.next_u64());
    const auto pu = pack_ternary_ints(u);

    CAPTURE(m);
    CAPTURE(n);
    CAPTURE(k);
    CHECK(gemm_case1(pack_sign(s), pu) == gemm_int_oracle(s, u));
    CHECK(gemm_case1_naive_and(pack_sign(s), pu) == gemm_int_oracle(s, u));
    CHECK(gemm_case2(bool_pack(b), pu) == gemm_int_oracle(b, u));
    CHECK(gemm_case3(pack_ternary_ints(t), pu) == gemm_int_oracle(t, u));
  }
}

TEST_CASE("every tile shape and parallel mode agree") {
  const auto s = random_ints(23, 300, {-1, 1}, 5);
  const auto u = random_ints(19, 300, {-1, 0, 1}, 6);
  const auto ref = gemm_int_oracle(s, u);
  for (std::size_t rt : {1, 2, 3, 4, 5, 8}) {
    for (std::size_t ct : {1, 2, 4, 7, 8}) {
      for (bool par : {false, true}) {
        const KernelConfig cfg{rt, ct, par, 3};
        CHECK(gemm_case1(pack_sign(s), pack_ternary_ints(u), cfg) == ref);
        CHECK(gemm_case3(pack_ternary_ints(u), pack_ternary_ints(u), cfg) == gemm_int_oracle(u, u));
      }
    }
  }
  CHECK_THROWS_AS(gemm_case1(pack_sign(s), pack_ternary_ints(u), KernelConfig{0, 4}), std::invalid_argument);
}

TEST_CASE("appending zero padding words never changes outputs") {
  const auto s = random_ints(6, 77, {-1, 1}, 8);
  const auto b = random_ints(6, 77, {0, 1}, 9);
  const auto t = random_ints(5, 77, {-1, 0, 1}, 10);
  const auto u = random_ints(4, 77, {-1, 0, 1}, 11);
  const auto ps = pack_sign(s);
  const auto pb = bool_pack(b);
  const auto pt = pack_ternary_ints(t);
  const auto pu = pack_ternary_ints(u);
  for (std::size_t extra : {1, 2, 5}) {
    CHECK(gemm_case1(widen(ps, extra), widen(pu, extra)) == gemm_case1(ps, pu));
    CHECK(gemm_case1_naive_and(widen(ps, extra), widen(pu, extra)) == gemm_case1(ps, pu));
    CHECK(gemm_case2(widen(pb, extra), widen(pu, extra)) == gemm_case2(pb, pu));
    CHECK(gemm_case3(widen(pt, extra), widen(pu, extra)) == gemm_case3(pt, pu));
  }
}

TEST_CASE("xor-based case 1 identity on random words") {
  Rng rng(99);
  for (int i = 0; i < 20000; ++i) {
    const std::uint64_t w = rng.next_u64();
    std::uint64_t ap = rng.next_u64();
    const std::uint64_t an = rng.next_u64() & ~ap;
    if (i % 3 == 0) ap &= rng.next_u64();  // sparser planes too
    const int lhs = std::popcount(w ^ ap) - std::popcount(w ^ an);
    const int rhs = std::popcount(ap) - std::popcount(an) - 2 * std::popcount(w & ap) +
                    2 * std::popcount(w & an);
    REQUIRE(lhs == rhs);
  }
}

TEST_CASE("outputs are bounded by K") {
  const auto t = random_ints(16, 200, {-1, 0, 1}, 12);
  const auto out = gemm_case3(pack_ternary_ints(t), pack_ternary_ints(t));
  for (int v : out.values()) CHECK(std::abs(v) <= 200);
}

TEST_CASE("argument validation") {
  const auto s = pack_sign(IntMatrix(2, 10, 1));
  const PackedTernaryMatrix t9(2, 9);
  CHECK_THROWS_AS(gemm_case1(s, t9), std::invalid_argument);
  CHECK_THROWS_AS(gemm_case3(PackedTernaryMatrix(2, 10), t9), std::invalid_argument);
  const PackedBinaryMatrix b(2, 10, BinaryKind::BoolOneIsOne);
  const PackedTernaryMatrix t10(2, 10);
  CHECK_THROWS_AS(gemm_case1(b, t10), std::invalid_argument);
  CHECK_THROWS_AS(gemm_case2(s, t10), std::invalid_argument);
}

TEST_CASE("naive AND variant needs at least twice the word operations") {
  const auto s = random_ints(8, 256, {-1, 1}, 13);
  const auto u = random_ints(8, 256, {-1, 0, 1}, 14);
  IntMatrix r1, r2;
  const auto xor_ops = count_word_ops(pack_sign(s), pack_ternary_ints(u), KernelCase::Case1, &r1);
  const auto and_ops = count_word_ops(pack_sign(s), pack_ternary_ints(u), KernelCase::Case1NaiveAnd, &r2);
  CHECK(r1 == gemm_int_oracle(s, u));
  CHECK(r2 == r1);
  // 4 words per output: xor rule = 2 xor + 2 popcount + 1 sub + 1 accumulate.
  CHECK(xor_ops.per_output() == doctest::Approx(4 * 6));
  CHECK(and_ops.per_output() == doctest::Approx(4 * 13));
  CHECK(and_ops.total() >= 2 * xor_ops.total());
  CHECK(and_ops.popcount == 2 * xor_ops.popcount);

  const auto q = pack_ternary_ints(u);
  const auto c3 = count_word_ops(q, q);
  CHECK(c3.popcount == 4 * 4 * 64);
}
