// SPDX-License-Identifier: Apache-2.0
#include "bwta/bwta_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

namespace bwta {

BwtaKind BwtaFile::kind() const {
  if (const auto* b = std::get_if<PackedBinaryMatrix>(&matrix)) {
    return b->kind == BinaryKind::SignNegIsOne ? BwtaKind::SignNegIsOne : BwtaKind::BoolOneIsOne;
  }
  return BwtaKind::Ternary;
}

std::size_t BwtaFile::rows() const {
  return std::visit([](const auto& m) { return m.rows; }, matrix);
}

std::size_t BwtaFile::cols() const {
  return std::visit([](const auto& m) { return m.cols; }, matrix);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{p[i]} << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw std::invalid_argument(std::string("bwta: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> encode_bwta(const BwtaFile& file) {
  std::visit([](const auto& m) { validate(m); }, file.matrix);
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'B', 'W', 'T', 'A'});
  out.push_back(kBwtaVersion);
  out.push_back(static_cast<std::uint8_t>(file.kind()));
  put_u32(out, checked_u32(file.rows(), "rows"));
  put_u32(out, checked_u32(file.cols(), "cols"));
  put_u32(out, std::bit_cast<std::uint32_t>(file.scale));
  if (const auto* b = std::get_if<PackedBinaryMatrix>(&file.matrix)) {
    for (auto w : b->words) put_u64(out, w);
  } else {
    const auto& t = std::get<PackedTernaryMatrix>(file.matrix);
    for (auto w : t.pos) put_u64(out, w);
    for (auto w : t.neg) put_u64(out, w);
  }
  return out;
}

BwtaFile decode_bwta(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kBwtaHeaderBytes) {
    throw std::runtime_error("bwta: truncated header (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), "BWTA", 4) != 0) throw std::runtime_error("bwta: bad magic");
  if (bytes[4] != kBwtaVersion) {
    throw std::runtime_error("bwta: unsupported version " + std::to_string(bytes[4]));
  }
  const std::uint8_t kind = bytes[5];
  if (kind > 2) throw std::runtime_error("bwta: unknown kind " + std::to_string(kind));
  const std::size_t rows = get_u32(bytes.data() + 6);
  const std::size_t cols = get_u32(bytes.data() + 10);
  BwtaFile file;
  file.scale = std::bit_cast<float>(get_u32(bytes.data() + 14));

  const std::size_t plane_words = rows * words_for(cols);
  const std::size_t planes = kind == 2 ? 2 : 1;
  const std::size_t expected = kBwtaHeaderBytes + 8 * planes * plane_words;
  if (bytes.size() != expected) {
    throw std::runtime_error("bwta: payload is " + std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(expected));
  }
  const std::uint8_t* p = bytes.data() + kBwtaHeaderBytes;
  try {
    if (kind == 2) {
      PackedTernaryMatrix t(rows, cols);
      for (std::size_t i = 0; i < plane_words; ++i, p += 8) t.pos[i] = get_u64(p);
      for (std::size_t i = 0; i < plane_words; ++i, p += 8) t.neg[i] = get_u64(p);
      validate(t);
      file.matrix = std::move(t);
    } else {
      PackedBinaryMatrix b(rows, cols,
                           kind == 0 ? BinaryKind::SignNegIsOne : BinaryKind::BoolOneIsOne);
      for (std::size_t i = 0; i < plane_words; ++i, p += 8) b.words[i] = get_u64(p);
      validate(b);
      file.matrix = std::move(b);
    }
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("bwta: corrupt payload: ") + e.what());
  }
  return file;
}

void write_bwta(const std::filesystem::path& path, const BwtaFile& file) {
  const auto bytes = encode_bwta(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("bwta: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("bwta: write failed for " + path.string());
}

BwtaFile read_bwta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("bwta: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_bwta(bytes);
}

IntMatrix unpack(const BwtaFile& file) {
  return std::visit([](const auto& m) { return unpack(m); }, file.matrix);
}

}  // namespace bwta
