// SPDX-License-Identifier: Apache-2.0
#include "bwta/gemm.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bwta {

void KernelConfig::validate() const {
  if (row_tile < 1 || col_tile < 1) {
    throw std::invalid_argument("KernelConfig: row_tile and col_tile must be >= 1");
  }
}

const char* kernel_case_name(KernelCase c) {
  switch (c) {
    case KernelCase::Case1: return "case1";
    case KernelCase::Case1NaiveAnd: return "case1-naive-and";
    case KernelCase::Case2: return "case2";
    case KernelCase::Case3: return "case3";
  }
  return "?";
}

namespace {

// Up to two bit-planes of one row. Binary operands use only p0.
struct RowRef {
  const std::uint64_t* p0;
  const std::uint64_t* p1;
};

struct Operand {
  std::size_t rows;
  std::size_t wpr;
  const std::uint64_t* p0;
  const std::uint64_t* p1;

  RowRef row(std::size_t r) const {
    return {p0 + r * wpr, p1 ? p1 + r * wpr : nullptr};
  }
};

Operand view(const PackedBinaryMatrix& m) { return {m.rows, m.words_per_row, m.words.data(), nullptr}; }
Operand view(const PackedTernaryMatrix& m) {
  return {m.rows, m.words_per_row, m.pos.data(), m.neg.data()};
}

struct FastOps {
  static std::uint64_t x_or(std::uint64_t a, std::uint64_t b) { return a ^ b; }
  static std::uint64_t x_and(std::uint64_t a, std::uint64_t b) { return a & b; }
  static std::uint64_t x_not(std::uint64_t a) { return ~a; }
  static std::int32_t pc(std::uint64_t a) { return std::popcount(a); }
  static std::int32_t add(std::int32_t a, std::int32_t b) { return a + b; }
  static std::int32_t sub(std::int32_t a, std::int32_t b) { return a - b; }
};

struct CountingOps {
  WordOpCounts* counts;

  std::uint64_t x_or(std::uint64_t a, std::uint64_t b) { ++counts->logic; return a ^ b; }
  std::uint64_t x_and(std::uint64_t a, std::uint64_t b) { ++counts->logic; return a & b; }
  std::uint64_t x_not(std::uint64_t a) { ++counts->logic; return ~a; }
  std::int32_t pc(std::uint64_t a) { ++counts->popcount; return std::popcount(a); }
  std::int32_t add(std::int32_t a, std::int32_t b) { ++counts->add_sub; return a + b; }
  std::int32_t sub(std::int32_t a, std::int32_t b) { ++counts->add_sub; return a - b; }
};

struct Case1Rule {
  template <class Ops>
  static std::int32_t step(Ops& ops, RowRef l, RowRef r, std::size_t w) {
    const std::uint64_t wb = l.p0[w];
    return ops.sub(ops.pc(ops.x_or(wb, r.p0[w])), ops.pc(ops.x_or(wb, r.p1[w])));
  }
};

struct Case1NaiveAndRule {
  template <class Ops>
  static std::int32_t step(Ops& ops, RowRef l, RowRef r, std::size_t w) {
    const std::uint64_t neg_w = l.p0[w];
    const std::uint64_t pos_w = ops.x_not(neg_w);
    const std::int32_t t0 = ops.pc(ops.x_and(neg_w, r.p0[w]));
    const std::int32_t t1 = ops.pc(ops.x_and(neg_w, r.p1[w]));
    const std::int32_t t2 = ops.pc(ops.x_and(pos_w, r.p0[w]));
    const std::int32_t t3 = ops.pc(ops.x_and(pos_w, r.p1[w]));
    return ops.sub(ops.add(ops.sub(t1, t0), t2), t3);
  }
};

struct Case2Rule {
  template <class Ops>
  static std::int32_t step(Ops& ops, RowRef l, RowRef r, std::size_t w) {
    const std::uint64_t att = l.p0[w];
    return ops.sub(ops.pc(ops.x_and(att, r.p0[w])), ops.pc(ops.x_and(att, r.p1[w])));
  }
};

struct Case3Rule {
  template <class Ops>
  static std::int32_t step(Ops& ops, RowRef l, RowRef r, std::size_t w) {
    const std::uint64_t qp = l.p0[w], qn = l.p1[w], kp = r.p0[w], kn = r.p1[w];
    const std::int32_t same = ops.add(ops.pc(ops.x_and(qp, kp)), ops.pc(ops.x_and(qn, kn)));
    const std::int32_t diff = ops.add(ops.pc(ops.x_and(qp, kn)), ops.pc(ops.x_and(qn, kp)));
    return ops.sub(same, diff);
  }
};

// Micro-tile of RT x CT outputs; the word loop is innermost-but-one so each
// left/right word is loaded once per tile.
template <class Rule, std::size_t RT, std::size_t CT, class Ops>
void tile(Ops& ops, const Operand& left, const Operand& right, std::size_t m0, std::size_t n0,
          IntMatrix& out) {
  RowRef lr[RT];
  RowRef rr[CT];
  for (std::size_t i = 0; i < RT; ++i) lr[i] = left.row(m0 + i);
  for (std::size_t j = 0; j < CT; ++j) rr[j] = right.row(n0 + j);
  std::int32_t acc[RT][CT] = {};
  for (std::size_t w = 0; w < left.wpr; ++w) {
    for (std::size_t i = 0; i < RT; ++i)
      for (std::size_t j = 0; j < CT; ++j) acc[i][j] = ops.add(acc[i][j], Rule::step(ops, lr[i], rr[j], w));
  }
  for (std::size_t i = 0; i < RT; ++i)
    for (std::size_t j = 0; j < CT; ++j) out(m0 + i, n0 + j) = acc[i][j];
}

// Runtime-sized fallback for tile shapes without a compiled micro-kernel.
template <class Rule, class Ops>
void tile_dynamic(Ops& ops, const Operand& left, const Operand& right, std::size_t m0,
                  std::size_t rt, std::size_t n0, std::size_t ct, IntMatrix& out) {
  std::vector<std::int32_t> acc(rt * ct, 0);
  for (std::size_t w = 0; w < left.wpr; ++w)
    for (std::size_t i = 0; i < rt; ++i)
      for (std::size_t j = 0; j < ct; ++j)
        acc[i * ct + j] = ops.add(acc[i * ct + j], Rule::step(ops, left.row(m0 + i), right.row(n0 + j), w));
  for (std::size_t i = 0; i < rt; ++i)
    for (std::size_t j = 0; j < ct; ++j) out(m0 + i, n0 + j) = acc[i * ct + j];
}

template <class Rule, std::size_t RT, std::size_t CT, class Ops>
void row_block(Ops& ops, const Operand& left, const Operand& right, std::size_t m0,
               IntMatrix& out) {
  std::size_t n0 = 0;
  for (; n0 + CT <= right.rows; n0 += CT) tile<Rule, RT, CT>(ops, left, right, m0, n0, out);
  for (; n0 < right.rows; ++n0) tile<Rule, RT, 1>(ops, left, right, m0, n0, out);
}

template <class Rule, std::size_t RT, std::size_t CT, class Ops>
void run_rows(Ops& ops, const Operand& left, const Operand& right, std::size_t m_begin,
              std::size_t m_end, IntMatrix& out) {
  std::size_t m0 = m_begin;
  for (; m0 + RT <= m_end; m0 += RT) row_block<Rule, RT, CT>(ops, left, right, m0, out);
  for (; m0 < m_end; ++m0) row_block<Rule, 1, CT>(ops, left, right, m0, out);
}

template <class Rule, class Ops>
void run_rows_dynamic(Ops& ops, const Operand& left, const Operand& right, std::size_t rt,
                      std::size_t ct, std::size_t m_begin, std::size_t m_end, IntMatrix& out) {
  for (std::size_t m0 = m_begin; m0 < m_end; m0 += rt) {
    const std::size_t rows = std::min(rt, m_end - m0);
    for (std::size_t n0 = 0; n0 < right.rows; n0 += ct)
      tile_dynamic<Rule>(ops, left, right, m0, rows, n0, std::min(ct, right.rows - n0), out);
  }
}

template <class Rule, std::size_t RT, class Ops>
bool dispatch_cols(Ops& ops, const Operand& l, const Operand& r, std::size_t ct, std::size_t b,
                   std::size_t e, IntMatrix& out) {
  switch (ct) {
    case 1: run_rows<Rule, RT, 1>(ops, l, r, b, e, out); return true;
    case 2: run_rows<Rule, RT, 2>(ops, l, r, b, e, out); return true;
    case 4: run_rows<Rule, RT, 4>(ops, l, r, b, e, out); return true;
    case 8: run_rows<Rule, RT, 8>(ops, l, r, b, e, out); return true;
    default: return false;
  }
}

template <class Rule, class Ops>
void run_range(Ops& ops, const Operand& l, const Operand& r, const KernelConfig& cfg,
               std::size_t b, std::size_t e, IntMatrix& out) {
  bool done = false;
  switch (cfg.row_tile) {
    case 1: done = dispatch_cols<Rule, 1>(ops, l, r, cfg.col_tile, b, e, out); break;
    case 2: done = dispatch_cols<Rule, 2>(ops, l, r, cfg.col_tile, b, e, out); break;
    case 4: done = dispatch_cols<Rule, 4>(ops, l, r, cfg.col_tile, b, e, out); break;
    case 8: done = dispatch_cols<Rule, 8>(ops, l, r, cfg.col_tile, b, e, out); break;
    default: break;
  }
  if (!done) run_rows_dynamic<Rule>(ops, l, r, cfg.row_tile, cfg.col_tile, b, e, out);
}

template <class Rule>
IntMatrix run_kernel(const Operand& left, const Operand& right, const KernelConfig& cfg) {
  IntMatrix out(left.rows, right.rows);
  FastOps ops;
  std::size_t workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
  const std::size_t blocks = (left.rows + cfg.row_tile - 1) / cfg.row_tile;
  workers = std::min(workers, blocks);
  if (!cfg.parallel || workers <= 1) {
    run_range<Rule>(ops, left, right, cfg, 0, left.rows, out);
    return out;
  }
  // Each worker owns a contiguous range of whole row tiles.
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) {
    const std::size_t b = (blocks * t / workers) * cfg.row_tile;
    const std::size_t e = std::min(left.rows, (blocks * (t + 1) / workers) * cfg.row_tile);
    if (b >= e) continue;
    pool.emplace_back([&, b, e] {
      FastOps local;
      run_range<Rule>(local, left, right, cfg, b, e, out);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

void check_reduction(std::size_t lk, std::size_t rk, const char* who) {
  if (lk != rk) {
    throw std::invalid_argument(std::string(who) + ": reduction mismatch (" + std::to_string(lk) +
                                " vs " + std::to_string(rk) + ")");
  }
  if (lk > kMaxReduction) {
    throw std::invalid_argument(std::string(who) + ": reduction length " + std::to_string(lk) +
                                " exceeds 2^24");
  }
}

void check_kind(const PackedBinaryMatrix& m, BinaryKind want, const char* who) {
  if (m.kind != want) {
    throw std::invalid_argument(std::string(who) + ": left operand has the wrong binary kind");
  }
}

}  // namespace

IntMatrix gemm_case1(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                     const KernelConfig& cfg) {
  cfg.validate();
  check_reduction(w.cols, a.cols, "gemm_case1");
  check_kind(w, BinaryKind::SignNegIsOne, "gemm_case1");
  return run_kernel<Case1Rule>(view(w), view(a), cfg);
}

IntMatrix gemm_case1_naive_and(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                               const KernelConfig& cfg) {
  cfg.validate();
  check_reduction(w.cols, a.cols, "gemm_case1_naive_and");
  check_kind(w, BinaryKind::SignNegIsOne, "gemm_case1_naive_and");
  return run_kernel<Case1NaiveAndRule>(view(w), view(a), cfg);
}

IntMatrix gemm_case2(const PackedBinaryMatrix& att, const PackedTernaryMatrix& v,
                     const KernelConfig& cfg) {
  cfg.validate();
  check_reduction(att.cols, v.cols, "gemm_case2");
  check_kind(att, BinaryKind::BoolOneIsOne, "gemm_case2");
  return run_kernel<Case2Rule>(view(att), view(v), cfg);
}

IntMatrix gemm_case3(const PackedTernaryMatrix& q, const PackedTernaryMatrix& k,
                     const KernelConfig& cfg) {
  cfg.validate();
  check_reduction(q.cols, k.cols, "gemm_case3");
  return run_kernel<Case3Rule>(view(q), view(k), cfg);
}

WordOpCounts count_word_ops(const PackedBinaryMatrix& w, const PackedTernaryMatrix& a,
                            KernelCase which, IntMatrix* result) {
  check_reduction(w.cols, a.cols, "count_word_ops");
  WordOpCounts counts;
  CountingOps ops{&counts};
  IntMatrix out(w.rows, a.rows);
  const KernelConfig cfg{1, 1, false, 1};
  switch (which) {
    case KernelCase::Case1:
      check_kind(w, BinaryKind::SignNegIsOne, "count_word_ops");
      run_range<Case1Rule>(ops, view(w), view(a), cfg, 0, w.rows, out);
      break;
    case KernelCase::Case1NaiveAnd:
      check_kind(w, BinaryKind::SignNegIsOne, "count_word_ops");
      run_range<Case1NaiveAndRule>(ops, view(w), view(a), cfg, 0, w.rows, out);
      break;
    case KernelCase::Case2:
      check_kind(w, BinaryKind::BoolOneIsOne, "count_word_ops");
      run_range<Case2Rule>(ops, view(w), view(a), cfg, 0, w.rows, out);
      break;
    case KernelCase::Case3:
      throw std::invalid_argument("count_word_ops: case3 takes two ternary operands");
  }
  counts.outputs = out.size();
  if (result) *result = std::move(out);
  return counts;
}

WordOpCounts count_word_ops(const PackedTernaryMatrix& q, const PackedTernaryMatrix& k,
                            IntMatrix* result) {
  check_reduction(q.cols, k.cols, "count_word_ops");
  WordOpCounts counts;
  CountingOps ops{&counts};
  IntMatrix out(q.rows, k.rows);
  run_range<Case3Rule>(ops, view(q), view(k), KernelConfig{1, 1, false, 1}, 0, q.rows, out);
  counts.outputs = out.size();
  if (result) *result = std::move(out);
  return counts;
}

}  // namespace bwta
