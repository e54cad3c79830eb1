// SPDX-License-Identifier: Apache-2.0
// Acceptance runner: one PASS/FAIL line per criterion; exit status 1 if any fail.
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "bwta/bwta_file.hpp"
#include "bwta/harness.hpp"
#include "bwta/train.hpp"
#include "support.hpp"

using namespace bwta;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

int failures = 0;

void criterion(const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs > budget_s) {
    o.pass = false;
    o.detail += fmt("; over the %.0f s budget", budget_s);
  }
  if (!o.pass) ++failures;
  std::printf("%s  %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

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

bool padding_clear(const std::vector<std::uint64_t>& words, std::size_t rows, std::size_t cols) {
  const std::size_t wpr = words_for(cols);
  for (std::size_t r = 0; r < rows; ++r)
    if (words[r * wpr + wpr - 1] & ~tail_mask(cols)) return false;
  return true;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  const auto report = run_verify({2024, 256, false});
  if (!report.passed()) return {false, report.failure->describe()};
  return {true, std::to_string(report.trials) +
                    " instances each of case1, case1-naive-and, case2, case3 (M,N<=16, K<=257) equal the oracle"};
}

Outcome xor_identity() {
  Rng rng(7);
  std::size_t n = 0, via_kernel = 0;
  for (; n < 100000; ++n) {
    const std::uint64_t w = rng.next_u64();
    std::uint64_t ap = rng.next_u64();
    if (n % 4 == 1) ap &= rng.next_u64();
    const std::uint64_t an = rng.next_u64() & ~ap;
    // Bit-by-bit oracle: weight bit 1 is -1, activation is +1 / -1 / 0.
    long expected = 0;
    for (int b = 0; b < 64; ++b) {
      const long ws = (w >> b & 1) ? -1 : 1;
      const long av = (ap >> b & 1) ? 1 : (an >> b & 1) ? -1 : 0;
      expected += ws * av;
    }
    const long xor_form = std::popcount(w ^ ap) - std::popcount(w ^ an);
    if (xor_form != expected) return {false, fmt("triple %.0f: xor form %.0f, oracle %.0f", n, xor_form, expected)};
    if (n % 100 == 0) {
      PackedBinaryMatrix pw(1, 64, BinaryKind::SignNegIsOne);
      pw.words[0] = w;
      PackedTernaryMatrix pa(1, 64);
      pa.pos[0] = ap;
      pa.neg[0] = an;
      if (gemm_case1(pw, pa)(0, 0) != expected) return {false, fmt("gemm_case1 disagrees on triple %.0f", n)};
      ++via_kernel;
    }
  }
  return {true, fmt("%.0f triples exact against a per-bit oracle (%.0f also through gemm_case1)", n, via_kernel)};
}

Outcome bitpack_roundtrip() {
  std::size_t checked = 0;
  for (std::size_t cols = 1; cols <= 257; ++cols) {
    const std::size_t rows = 1 + cols % 7;
    const auto s = testing::random_ints(rows, cols, {-1, 1}, cols);
    const auto t = testing::random_ints(rows, cols, {-1, 0, 1}, cols + 500);
    const auto b = testing::random_ints(rows, cols, {0, 1}, cols + 900);
    const auto ps = pack_sign(s);
    const auto pt = pack_ternary(to_dense(t), 1.0f);
    const auto pb = pack_bool(to_dense(b), 1.0f);
    if (unpack(ps) != s || unpack(pt) != t || unpack(pb) != b)
      return {false, fmt("roundtrip mismatch at cols=%.0f", cols)};
    if (!padding_clear(ps.words, rows, cols) || !padding_clear(pt.pos, rows, cols) ||
        !padding_clear(pt.neg, rows, cols) || !padding_clear(pb.words, rows, cols))
      return {false, fmt("padding bits set at cols=%.0f", cols)};
    const auto c1 = gemm_case1(ps, pt), c2 = gemm_case2(pb, pt), c3 = gemm_case3(pt, pt);
    for (std::size_t extra : {1, 3}) {
      if (gemm_case1(widen(ps, extra), widen(pt, extra)) != c1 || gemm_case2(widen(pb, extra), widen(pt, extra)) != c2 ||
          gemm_case3(widen(pt, extra), widen(pt, extra)) != c3)
        return {false, fmt("appending %.0f zero words changed outputs at cols=%.0f", extra, cols)};
    }
    ++checked;
  }
  return {true, fmt("cols 1..257 (%.0f widths): unpack(pack) identity, clear padding, padding-append invariance", checked)};
}

Outcome zero_fraction_stat() {
  const auto a = random_matrix(1, 1000000, Normal{}, 31337);
  const double z = zero_fraction(a, activation_scale_init(a), 1);
  const double analytic = std::erf(std::sqrt(1.0 / 3.14159265358979323846));
  return {std::fabs(z - 0.575) <= 0.02,
          fmt("zero fraction %.4f over 1e6 N(0,1) samples (target 0.575 +- 0.02, analytic %.4f)", z, analytic)};
}

Outcome gradient_checks() {
  // The toy classifier's block, scales calibrated on standard-normal inputs.
  const BlockConfig cfg = ModelConfig{}.block;
  const auto block = testing::calibrated_block(cfg, 5, 8);
  std::vector<std::size_t> valid(kSlotCount, 0);
  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t total = 0, seeds = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed, ++seeds) {
    const auto x = random_matrix(8, cfg.d_model, Normal{}, 1000 + seed);
    const auto g = random_matrix(8, cfg.d_model, Normal{}, 2000 + seed);
    const auto results = testing::check_scale_grads(block, x, g, 1e-3);
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      if (!results[s].valid) continue;
      ++valid[s];
      ++total;
      if (results[s].rel_error() > worst) {
        worst = results[s].rel_error();
        worst_name = results[s].name;
      }
    }
    if (std::all_of(valid.begin(), valid.end(), [](std::size_t v) { return v >= 5; })) {
      ++seeds;
      break;
    }
  }
  std::string uncovered;
  for (std::size_t s = 0; s < kSlotCount; ++s)
    if (valid[s] == 0) uncovered += std::string(" ") + slot_name(s);
  const bool pass = worst < 1e-2 && uncovered.empty();
  return {pass, fmt("%.0f boundary-free checks over %.0f inputs, all %.0f quantizers covered; max rel error %.2e", total,
                    seeds, kSlotCount, worst) +
                    " (" + worst_name + ")" + (uncovered.empty() ? "" : "; no valid sample for" + uncovered)};
}

Outcome schedule_and_transitions() {
  struct Example {
    int l0, stride, total;
    std::vector<int> levels, epochs;
  };
  const std::vector<Example> examples{{4, 1, 30, {4, 3, 2, 1}, {5, 5, 5, 15}},
                                      {1, 1, 10, {1}, {10}},
                                      {9, 2, 20, {9, 7, 5, 3, 1}, {2, 2, 3, 3, 10}}};
  for (const auto& e : examples) {
    const auto s = build_schedule(e.l0, e.stride, e.total);
    if (s.levels() != e.levels || s.epochs() != e.epochs)
      return {false, fmt("build_schedule(%.0f, %.0f, %.0f) differs from the expected allocation", e.l0, e.stride, e.total)};
  }
  // Mean |dequantized| before and after each step, recomputed here with an
  // independent round-half-away-from-zero grid.
  auto mean_abs = [](const DenseMatrix& a, double s, int levels) {
    double sum = 0.0;
    for (float v : a.values()) {
      const double x = std::clamp(double(v) / s, double(-levels), double(levels));
      sum += s * std::floor(std::fabs(x) + 0.5);
    }
    return sum / double(a.size());
  };
  const auto a = random_matrix(1, 200000, Normal{}, 99);
  float s = activation_scale_init(a);
  std::string drifts;
  double worst = 0.0;
  for (int l = 4; l > 1; --l) {
    const double before = mean_abs(a, s, l);
    const float next =
        transition_scale(a, QuantState(s, QuantMode::levelwise(l)), QuantMode::levelwise(l - 1), TransitionStrategy::Ours);
    const double rel = (mean_abs(a, next, l - 1) - before) / before;
    drifts += fmt(" %.0f->%.0f %+.1f%%", l, l - 1, 100 * rel);
    worst = std::max(worst, std::fabs(rel));
    s = next;
  }
  return {worst <= 0.10, "3 allocation examples exact; magnitude drift" + drifts + " (limit 10%)"};
}

TrainResult run_demo(std::uint64_t seed, ScheduleKind kind, TransitionStrategy strategy) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.schedule = kind;
  cfg.strategy = strategy;
  const auto task =
      make_synthetic_task(cfg.model.seq_len, cfg.model.d_in, cfg.train_samples, cfg.test_samples, cfg.margin, seed);
  return train(cfg, task);
}

Outcome training_demo() {
  const TrainConfig defaults;
  double min_acc = 1.0, spike_ours = 0.0, spike_none = 0.0, nc_level = 0.0, nc_bit = 0.0;
  const int seeds = 3;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto ours = run_demo(seed, ScheduleKind::Levelwise, TransitionStrategy::Ours);
    const auto none = run_demo(seed, ScheduleKind::Levelwise, TransitionStrategy::None);
    const auto bit = run_demo(seed, ScheduleKind::Bitwise, TransitionStrategy::Ours);
    min_acc = std::min({min_acc, ours.final_accuracy, none.final_accuracy, bit.final_accuracy});
    spike_ours += ours.mean_spike() / seeds;
    spike_none += none.mean_spike() / seeds;
    nc_level += convergence_report(ours.scale_traces(), defaults.window_frac, defaults.tol).non_converged_fraction / seeds;
    nc_bit += convergence_report(bit.scale_traces(), defaults.window_frac, defaults.tol).non_converged_fraction / seeds;
  }
  const bool a = min_acc >= 0.90, b = spike_ours <= spike_none, c = nc_level <= nc_bit;
  return {a && b && c,
          fmt("(a) min final accuracy %.3f; (b) mean spike ours %.4f vs none %.4f; ", min_acc, spike_ours, spike_none) +
              fmt("(c) non-converged fraction levelwise %.3f vs bitwise %.3f", nc_level, nc_bit) +
              (a ? "" : " [a fails]") + (b ? "" : " [b fails]") + (c ? "" : " [c fails]")};
}

Outcome performance() {
  auto timed = [](BenchCase kase, std::size_t repeats, std::size_t warmup) {
    BenchSpec spec;
    spec.kase = kase;
    spec.m = spec.n = spec.k = 2048;
    spec.repeats = repeats;
    spec.warmup = warmup;
    spec.check = false;  // exactness is covered by the oracle criterion
    return run_bench(spec);
  };
  const auto fp32 = timed(BenchCase::Fp32, 1, 0);
  const auto c1 = timed(BenchCase::Case1, 5, 1);
  const auto naive = timed(BenchCase::Case1NaiveAnd, 5, 1);
  std::vector<BenchRow> rows{fp32, c1, naive};
  std::ostringstream table;
  write_bench_report(rows, ReportFormat::Markdown, table);
  std::istringstream lines(table.str());
  for (std::string line; std::getline(lines, line);) std::printf("      %s\n", line.c_str());
  const double ratio = c1.gops / fp32.gops;
  const bool pass = ratio >= 4.0 && c1.median_us < naive.median_us;
  return {pass, fmt("2048^3 single-thread: case1 %.1f ms (%.1fx fp32 throughput, need 4x), naive-and %.1f ms",
                    c1.median_us / 1e3, ratio, naive.median_us / 1e3)};
}

Outcome golden_file() {
  const DenseMatrix fixture{{0.9f, -0.1f, -0.6f, 0.3f},
                            {-1.2f, 0.25f, 0.75f, 0.0f},
                            {0.5f, -0.5f, 0.1f, -2.0f},
                            {0.2f, 1.4f, -0.24f, -0.26f}};
  const auto path = std::filesystem::path(BWTA_TEST_DATA_DIR) / "golden_4x4.bwta";
  std::ifstream in(path, std::ios::binary);
  if (!in) return {false, "cannot read " + path.string()};
  const std::vector<std::uint8_t> golden((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bytes = encode_bwta(BwtaFile{0.5f, pack_ternary(fixture, 0.5f)});
  if (bytes != golden) return {false, "encoding of the 4x4 fixture differs from the committed bytes"};
  if (encode_bwta(decode_bwta(golden)) != golden) return {false, "decode/encode does not reproduce the committed bytes"};
  return {true, fmt("%.0f committed bytes reproduced by encode and by decode->encode", golden.size())};
}

}  // namespace

int main() {
  std::printf("BWTA acceptance\n");
  criterion("oracle equivalence", 30, oracle_equivalence);
  criterion("case-1 xor identity", 5, xor_identity);
  criterion("bitpack roundtrip and padding", 10, bitpack_roundtrip);
  criterion("zero-fraction statistic", 5, zero_fraction_stat);
  criterion("scale gradient checks", 30, gradient_checks);
  criterion("schedule and transition properties", 10, schedule_and_transitions);
  criterion("training demo", 300, training_demo);
  criterion("case-1 throughput", 600, performance);
  criterion("golden .bwta file", 5, golden_file);
  return failures ? 1 : 0;
}
