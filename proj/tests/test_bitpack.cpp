// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <bit>
#include <filesystem>
#include <fstream>

#include "bwta/bitpack.hpp"
#include "bwta/bwta_file.hpp"
#include "bwta/quant.hpp"

using namespace bwta;

namespace {

IntMatrix random_ints(std::size_t rows, std::size_t cols, std::vector<float> grid, std::uint64_t seed) {
  const auto f = random_matrix(rows, cols, Grid{std::move(grid)}, seed);
  IntMatrix q(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) q[i] = static_cast<int>(f[i]);
  return q;
}

bool padding_clear(std::span<const std::uint64_t> words, std::size_t rows, std::size_t cols) {
  const std::size_t wpr = words_for(cols);
  for (std::size_t r = 0; r < rows; ++r)
    if (words[r * wpr + wpr - 1] & ~tail_mask(cols)) return false;
  return true;
}

}  // namespace

TEST_CASE("pack_sign encoding") {
  const auto p = pack_sign(IntMatrix{{-1, 1, 1, -1}});
  CHECK((p.words[0] & 0xF) == 9);
  CHECK(pack_sign(IntMatrix(3, 70, 1)).words == std::vector<std::uint64_t>(6, 0));

  IntMatrix s(1, 65, 1);
  s(0, 64) = -1;
  const auto q = pack_sign(s);
  CHECK(q.words_per_row == 2);
  CHECK(q.words[0] == 0);
  CHECK(q.words[1] == 1);

  CHECK_THROWS_AS(pack_sign(IntMatrix{{1, 0}}), std::invalid_argument);
}

TEST_CASE("pack_ternary encoding") {
  const auto p = pack_ternary(DenseMatrix{{-0.3f, 0.7f, 1.2f, -0.9f}}, 1.0f);
  CHECK(p.pos[0] == 6);
  CHECK(p.neg[0] == 8);

  const auto z = pack_ternary(random_matrix(5, 100, Uniform{-0.49, 0.49}, 3), 1.0f);
  for (auto w : z.pos) CHECK(w == 0);
  for (auto w : z.neg) CHECK(w == 0);

  // -0.5 is inclusive on the negative side, matching round-half-away-from-zero.
  const auto b = pack_ternary(DenseMatrix{{0.5f, -0.5f}}, 1.0f);
  CHECK(b.pos[0] == 1);
  CHECK(b.neg[0] == 2);

  CHECK_THROWS_AS(pack_ternary(DenseMatrix{{1.0f}}, 0.0f), std::invalid_argument);
}

TEST_CASE("pack_bool encoding") {
  CHECK(pack_bool(DenseMatrix{{0.9f, 0.2f, 0.5f, 0.0f}}, 1.0f).words[0] == 5);
  for (auto w : pack_bool(DenseMatrix(4, 130, 0.0f), 1.0f).words) CHECK(w == 0);
  CHECK_THROWS_AS(pack_bool(DenseMatrix{{1.0f}}, -1.0f), std::invalid_argument);
}

TEST_CASE("fused packers agree with quantize on fuzzed inputs") {
  const auto a = random_matrix(100, 1000, Normal{0, 1}, 77);
  for (float s : {0.3f, 1.0f, 1.7f}) {
    CHECK(unpack(pack_ternary(a, s)) == quantize(a, QuantState(s, QuantMode::ternary())));
    CHECK(unpack(pack_bool(a, s)) == quantize(a, QuantState(s, QuantMode::boolean())));
  }
  // Exact half-way values.
  const auto h = random_matrix(10, 70, Grid{{-1.5f, -0.5f, 0.5f, 1.5f, -0.25f, 0.25f}}, 5);
  CHECK(unpack(pack_ternary(h, 1.0f)) == quantize(h, QuantState(1.0f, QuantMode::ternary())));
  CHECK(unpack(pack_bool(h, 1.0f)) == quantize(h, QuantState(1.0f, QuantMode::boolean())));
}

TEST_CASE("roundtrip, padding and plane disjointness across column counts") {
  for (std::size_t cols = 1; cols <= 257; ++cols) {
    const std::size_t rows = 1 + cols % 5;
    const auto s = random_ints(rows, cols, {-1, 1}, cols);
    const auto t = random_ints(rows, cols, {-1, 0, 1}, cols + 1000);
    const auto b = random_ints(rows, cols, {0, 1}, cols + 2000);

    const auto ps = pack_sign(s);
    CHECK(unpack(ps) == s);
    CHECK(padding_clear(ps.words, rows, cols));

    const auto pt = pack_ternary(to_dense(t), 1.0f);
    CHECK(unpack(pt) == t);
    CHECK(pack_ternary_ints(t) == pt);
    CHECK(padding_clear(pt.pos, rows, cols));
    CHECK(padding_clear(pt.neg, rows, cols));
    std::size_t ones = 0;
    for (std::size_t i = 0; i < pt.pos.size(); ++i) {
      CHECK((pt.pos[i] & pt.neg[i]) == 0);
      ones += std::popcount(pt.pos[i]) + std::popcount(pt.neg[i]);
    }
    CHECK(ones <= rows * cols);

    const auto pb = pack_bool(to_dense(b), 1.0f);
    CHECK(unpack(pb) == b);
    CHECK(padding_clear(pb.words, rows, cols));
    CHECK(unpack(bool_as_ternary(pb)) == b);
  }
}

TEST_CASE("unpack rejects corrupt packed data") {
  auto t = pack_ternary_ints(IntMatrix{{1, -1, 0}});
  t.neg[0] |= 1;  // element 0 is now both +1 and -1
  CHECK_THROWS_AS(unpack(t), std::invalid_argument);

  auto s = pack_sign(IntMatrix{{1, -1, 1}});
  s.words[0] |= std::uint64_t{1} << 40;  // padding bit
  CHECK_THROWS_AS(unpack(s), std::invalid_argument);

  const PackedTernaryMatrix zero(2, 9);
  CHECK(unpack(zero) == IntMatrix(2, 9, 0));
}

TEST_CASE(".bwta encoding of a ternary 1x3 matrix, byte by byte") {
  BwtaFile f{0.5f, pack_ternary_ints(IntMatrix{{1, -1, 0}})};
  const auto bytes = encode_bwta(f);
  const std::vector<std::uint8_t> expected = {
      'B', 'W', 'T', 'A', 1, 2,         // magic, version, kind
      1, 0, 0, 0, 3, 0, 0, 0,           // rows, cols
      0x00, 0x00, 0x00, 0x3F,           // 0.5f
      1, 0, 0, 0, 0, 0, 0, 0,           // plane_pos
      2, 0, 0, 0, 0, 0, 0, 0,           // plane_neg
  };
  CHECK(bytes == expected);
  const auto back = decode_bwta(bytes);
  CHECK(back.kind() == BwtaKind::Ternary);
  CHECK(back.scale == 0.5f);
  CHECK(unpack(back) == IntMatrix{{1, -1, 0}});
}

TEST_CASE(".bwta roundtrip for every kind") {
  const auto a = random_matrix(7, 130, Normal{0, 1}, 9);
  for (BwtaFile f : {BwtaFile{0.25f, pack_sign(quantize(a, QuantState(1.0f, QuantMode::sign_binary())))},
                     BwtaFile{1.5f, pack_bool(a, 0.7f)}, BwtaFile{0.7f, pack_ternary(a, 0.7f)}}) {
    const auto bytes = encode_bwta(f);
    CHECK(bytes.size() == kBwtaHeaderBytes + 8 * 7 * 3 * (f.kind() == BwtaKind::Ternary ? 2 : 1));
    const auto back = decode_bwta(bytes);
    CHECK(back.kind() == f.kind());
    CHECK(back.scale == f.scale);
    CHECK(back.matrix == f.matrix);
  }
}

TEST_CASE(".bwta decoder rejects malformed input") {
  BwtaFile f{1.0f, pack_bool(DenseMatrix{{1, 0, 1}}, 1.0f)};
  const auto good = encode_bwta(f);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_bwta(bad_magic), std::runtime_error);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_THROWS_AS(decode_bwta(bad_version), std::runtime_error);

  auto bad_kind = good;
  bad_kind[5] = 3;
  CHECK_THROWS_AS(decode_bwta(bad_kind), std::runtime_error);

  auto truncated = good;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_bwta(truncated), std::runtime_error);
  CHECK_THROWS_AS(decode_bwta(std::span<const std::uint8_t>(good.data(), 10)), std::runtime_error);

  auto padding = good;
  padding[kBwtaHeaderBytes + 7] = 0x80;  // bit 63 of a 3-column row
  CHECK_THROWS_AS(decode_bwta(padding), std::runtime_error);
}

TEST_CASE("golden 4x4 .bwta fixture") {
  // Fixed fixture: ternary pack of this matrix at s = 0.5.
  const DenseMatrix fixture{{0.9f, -0.1f, -0.6f, 0.3f},
                            {-1.2f, 0.25f, 0.75f, 0.0f},
                            {0.5f, -0.5f, 0.1f, -2.0f},
                            {0.2f, 1.4f, -0.24f, -0.26f}};
  const BwtaFile f{0.5f, pack_ternary(fixture, 0.5f)};
  const auto bytes = encode_bwta(f);

  const auto path = std::filesystem::path(BWTA_TEST_DATA_DIR) / "golden_4x4.bwta";
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  const std::vector<std::uint8_t> golden((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes == golden);

  const auto back = read_bwta(path);
  CHECK(encode_bwta(back) == golden);
  CHECK(unpack(back) == quantize(fixture, QuantState(0.5f, QuantMode::ternary())));
}
