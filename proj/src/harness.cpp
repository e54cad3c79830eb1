// SPDX-License-Identifier: Apache-2.0
#include "bwta/harness.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

#include "bwta/gemm.hpp"
#include "bwta/quant.hpp"

namespace bwta {

namespace {

IntMatrix grid_ints(std::size_t rows, std::size_t cols, std::vector<float> grid, std::uint64_t seed) {
  const auto f = random_matrix(rows, cols, Grid{std::move(grid)}, seed);
  IntMatrix q(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) q[i] = static_cast<std::int32_t>(f[i]);
  return q;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// First differing element, if any.
template <typename A, typename B>
std::optional<Counterexample> compare(const std::string& check, const Matrix<A>& expected, const Matrix<B>& actual) {
  if (expected.rows() != actual.rows() || expected.cols() != actual.cols()) {
    Counterexample c;
    c.check = check + " (shape " + shape_of(actual) + " vs " + shape_of(expected) + ")";
    return c;
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (static_cast<long long>(expected[i]) != static_cast<long long>(actual[i])) {
      Counterexample c;
      c.check = check;
      c.row = i / expected.cols();
      c.col = i % expected.cols();
      c.expected = static_cast<long long>(expected[i]);
      c.actual = static_cast<long long>(actual[i]);
      return c;
    }
  }
  return std::nullopt;
}

std::optional<Counterexample> padding_check(const std::string& check, const std::vector<std::uint64_t>& words,
                                            std::size_t rows, std::size_t cols) {
  const std::size_t wpr = words_for(cols);
  const std::uint64_t mask = tail_mask(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint64_t stray = words[r * wpr + wpr - 1] & ~mask;
    if (stray) {
      Counterexample c;
      c.check = check;
      c.row = r;
      c.col = (wpr - 1) * kWordBits + static_cast<std::size_t>(__builtin_ctzll(stray));
      c.expected = 0;
      c.actual = 1;
      return c;
    }
  }
  return std::nullopt;
}

}  // namespace

std::string Counterexample::describe() const {
  std::ostringstream s;
  s << check << " mismatch: M=" << m << " N=" << n << " K=" << k << " seed=" << seed << " at [" << row << ", "
    << col << "]: expected " << expected << ", got " << actual;
  return s.str();
}

VerifyReport run_verify(const VerifyOptions& opts) {
  VerifyReport report;
  if (opts.trials == 0) {
    report.warnings.push_back("trials=0: nothing was checked (vacuous pass)");
    return report;
  }
  for (std::size_t t = 0; t < opts.trials; ++t) {
    const std::uint64_t seed = splitmix(opts.seed * 0x100000001b3ULL + t);
    Rng rng(seed);
    const std::size_t m = 1 + rng.below(16), n = 1 + rng.below(16), k = 1 + rng.below(257);
    IntMatrix w = grid_ints(m, k, {-1, 1}, rng.next_u64());
    IntMatrix a = grid_ints(n, k, {-1, 0, 1}, rng.next_u64());
    IntMatrix b = grid_ints(m, k, {0, 1}, rng.next_u64());
    IntMatrix q = grid_ints(m, k, {-1, 0, 1}, rng.next_u64());

    const auto pw = pack_sign(w);
    auto pa = pack_ternary_ints(a);
    const auto pb = pack_bool(to_dense(b), 1.0f);
    const auto pq = pack_ternary_ints(q);

    if (opts.inject_flip && t == 0) {
      std::vector<std::size_t> zeros;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] == 0) zeros.push_back(i);
      if (zeros.empty()) {
        a[0] = 0;
        pa = pack_ternary_ints(a);
        zeros.push_back(0);
      }
      const std::size_t i = zeros[rng.below(zeros.size())];
      const std::size_t r = i / k, c = i % k;
      pa.neg[r * pa.words_per_row + c / kWordBits] ^= std::uint64_t{1} << (c % kWordBits);
    }

    const KernelConfig cfg;
    std::vector<std::pair<std::string, std::function<std::optional<Counterexample>()>>> checks = {
        {"case1", [&] { return compare("case1", gemm_int_oracle(w, a), gemm_case1(pw, pa, cfg)); }},
        {"case1-naive-and",
         [&] { return compare("case1-naive-and", gemm_int_oracle(w, a), gemm_case1_naive_and(pw, pa, cfg)); }},
        {"case2", [&] { return compare("case2", gemm_int_oracle(b, a), gemm_case2(pb, pa, cfg)); }},
        {"case3", [&] { return compare("case3", gemm_int_oracle(q, a), gemm_case3(pq, pa, cfg)); }},
        {"pack-binary", [&] { return compare("pack-binary", w, unpack(pw)); }},
        {"pack-ternary", [&] { return compare("pack-ternary", a, unpack(pa)); }},
        {"pack-ternary-fused", [&] { return compare("pack-ternary-fused", a, unpack(pack_ternary(to_dense(a), 1.0f))); }},
        {"pack-bool", [&] { return compare("pack-bool", b, unpack(pb)); }},
        {"padding",
         [&]() -> std::optional<Counterexample> {
           using Words = const std::vector<std::uint64_t>*;
           for (Words words : {Words(&pw.words), Words(&pa.pos), Words(&pa.neg), Words(&pb.words), Words(&pq.pos), Words(&pq.neg)}) {
             const std::size_t rows = words == &pw.words || words == &pb.words || words == &pq.pos || words == &pq.neg
                                          ? m
                                          : n;
             if (auto c = padding_check("padding", *words, rows, k)) return c;
           }
           return std::nullopt;
         }},
    };
    ++report.trials;
    for (auto& [name, run] : checks) {
      ++report.checks;
      if (auto c = run()) {
        c->m = m;
        c->n = n;
        c->k = k;
        c->seed = seed;
        report.failure = *c;
        return report;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// bench

BenchCase parse_bench_case(const std::string& name) {
  static const std::map<std::string, BenchCase> names = {
      {"fp32", BenchCase::Fp32},           {"case1", BenchCase::Case1},
      {"case1-naive-and", BenchCase::Case1NaiveAnd}, {"case2", BenchCase::Case2},
      {"case3", BenchCase::Case3},         {"pack-binary", BenchCase::PackBinary},
      {"pack-ternary", BenchCase::PackTernary}};
  const auto it = names.find(name);
  if (it == names.end()) throw std::invalid_argument("unknown case '" + name + "'");
  return it->second;
}

const char* bench_case_name(BenchCase c) {
  switch (c) {
    case BenchCase::Fp32: return "fp32";
    case BenchCase::Case1: return "case1";
    case BenchCase::Case1NaiveAnd: return "case1-naive-and";
    case BenchCase::Case2: return "case2";
    case BenchCase::Case3: return "case3";
    case BenchCase::PackBinary: return "pack-binary";
    case BenchCase::PackTernary: return "pack-ternary";
  }
  return "?";
}

bool is_gemm(BenchCase c) { return c != BenchCase::PackBinary && c != BenchCase::PackTernary; }

void BenchSpec::validate() const {
  if (m == 0 || n == 0 || k == 0) throw std::invalid_argument("bench: shapes must be >= 1");
  if (repeats == 0) throw std::invalid_argument("bench: repeats must be >= 1");
  if (k > kMaxReduction) throw std::invalid_argument("bench: K exceeds " + std::to_string(kMaxReduction));
}

std::size_t BenchSpec::estimated_bytes() const {
  const double mk = double(m) * double(k), nk = double(n) * double(k), mn = double(m) * double(n);
  double bytes = 0.0;
  if (is_gemm(kase)) {
    bytes += 4.0 * (mk + nk);                // integer operands
    bytes += 2.0 * (mk + nk) / 8.0 + 64.0;   // packed planes
    bytes += 4.0 * mn;                       // output
    if (kase == BenchCase::Fp32) bytes += 4.0 * (mk + nk);
    if (check) bytes += 4.0 * mn;            // oracle output
  } else {
    bytes += 8.0 * mk + 2.0 * mk / 8.0 + 64.0;
    if (check) bytes += 4.0 * mk;
  }
  return bytes > 1.8e19 ? SIZE_MAX : static_cast<std::size_t>(bytes);
}

double BenchSpec::ops() const {
  return is_gemm(kase) ? 2.0 * double(m) * double(n) * double(k) : double(m) * double(k);
}

std::size_t bench_memory_limit() {
  const long pages = sysconf(_SC_PHYS_PAGES), page = sysconf(_SC_PAGE_SIZE);
  if (pages <= 0 || page <= 0) return std::size_t{4} << 30;
  return static_cast<std::size_t>(pages) * static_cast<std::size_t>(page) / 2;
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

template <typename T>
std::uint64_t checksum_values(const Matrix<T>& m) {
  std::uint64_t h = kFnvBasis;
  for (const T& v : m.values()) h = fnv1a(h, static_cast<std::uint64_t>(static_cast<long long>(v)));
  return h;
}

std::uint64_t checksum_words(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>* b = nullptr) {
  std::uint64_t h = kFnvBasis;
  for (auto w : a) h = fnv1a(h, w);
  if (b)
    for (auto w : *b) h = fnv1a(h, w);
  return h;
}

std::string human_bytes(std::size_t b) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f GiB", double(b) / double(1ULL << 30));
  return buf;
}

}  // namespace

BenchRow run_bench(const BenchSpec& spec, std::size_t memory_limit) {
  spec.validate();
  const std::size_t need = spec.estimated_bytes();
  if (need > memory_limit) {
    throw std::invalid_argument(std::string("bench: ") + bench_case_name(spec.kase) + " at M=" + std::to_string(spec.m) +
                                " N=" + std::to_string(spec.n) + " K=" + std::to_string(spec.k) + " needs about " +
                                human_bytes(need) + ", over the " + human_bytes(memory_limit) + " limit");
  }

  BenchRow row;
  row.spec = spec;
  KernelConfig kcfg;
  kcfg.parallel = spec.parallel;

  Rng rng(splitmix(spec.seed));
  const std::uint64_t s_left = rng.next_u64(), s_right = rng.next_u64();

  // One run produces an output checksum; `verify` compares it to the oracle.
  std::function<std::uint64_t()> run;
  std::function<bool()> verify;

  IntMatrix left, right;
  DenseMatrix dl, dr;
  PackedBinaryMatrix pbin;
  PackedTernaryMatrix pl, pr;
  IntMatrix out_i;
  DenseMatrix out_f;

  switch (spec.kase) {
    case BenchCase::Fp32:
    case BenchCase::Case1:
    case BenchCase::Case1NaiveAnd:
      left = grid_ints(spec.m, spec.k, {-1, 1}, s_left);
      break;
    case BenchCase::Case2:
      left = grid_ints(spec.m, spec.k, {0, 1}, s_left);
      break;
    case BenchCase::Case3:
      left = grid_ints(spec.m, spec.k, {-1, 0, 1}, s_left);
      break;
    case BenchCase::PackBinary:
      left = grid_ints(spec.m, spec.k, {-1, 1}, s_left);
      break;
    case BenchCase::PackTernary:
      dl = random_matrix(spec.m, spec.k, Normal{}, s_left);
      break;
  }
  if (is_gemm(spec.kase)) right = grid_ints(spec.n, spec.k, {-1, 0, 1}, s_right);

  switch (spec.kase) {
    case BenchCase::Fp32:
      dl = to_dense(left);
      dr = to_dense(right);
      run = [&] {
        out_f = gemm_f32(dl, dr);
        return checksum_values(out_f);
      };
      verify = [&] { return !compare("fp32", gemm_int_oracle(left, right), gemm_f32(dl, dr)); };
      break;
    case BenchCase::Case1:
    case BenchCase::Case1NaiveAnd: {
      pbin = pack_sign(left);
      pr = pack_ternary_ints(right);
      const bool naive = spec.kase == BenchCase::Case1NaiveAnd;
      run = [&, naive] {
        out_i = naive ? gemm_case1_naive_and(pbin, pr, kcfg) : gemm_case1(pbin, pr, kcfg);
        return checksum_values(out_i);
      };
      verify = [&, naive] {
        const auto got = naive ? gemm_case1_naive_and(pbin, pr, kcfg) : gemm_case1(pbin, pr, kcfg);
        return !compare("case1", gemm_int_oracle(left, right), got);
      };
      break;
    }
    case BenchCase::Case2:
      pbin = pack_bool(to_dense(left), 1.0f);
      pr = pack_ternary_ints(right);
      run = [&] {
        out_i = gemm_case2(pbin, pr, kcfg);
        return checksum_values(out_i);
      };
      verify = [&] { return !compare("case2", gemm_int_oracle(left, right), gemm_case2(pbin, pr, kcfg)); };
      break;
    case BenchCase::Case3:
      pl = pack_ternary_ints(left);
      pr = pack_ternary_ints(right);
      run = [&] {
        out_i = gemm_case3(pl, pr, kcfg);
        return checksum_values(out_i);
      };
      verify = [&] { return !compare("case3", gemm_int_oracle(left, right), gemm_case3(pl, pr, kcfg)); };
      break;
    case BenchCase::PackBinary:
      run = [&] {
        pbin = pack_sign(left);
        return checksum_words(pbin.words);
      };
      verify = [&] { return unpack(pack_sign(left)) == left; };
      break;
    case BenchCase::PackTernary: {
      const float s = activation_scale_init(dl);
      run = [&, s] {
        pl = pack_ternary(dl, s);
        return checksum_words(pl.pos, &pl.neg);
      };
      verify = [&, s] { return unpack(pack_ternary(dl, s)) == quantize(dl, QuantState(s, QuantMode::ternary())); };
      break;
    }
  }

  if (spec.check) row.check = verify() ? "pass" : "fail";

  for (std::size_t i = 0; i < spec.warmup; ++i) row.checksum = run();
  std::vector<double> times;
  times.reserve(spec.repeats);
  for (std::size_t i = 0; i < spec.repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t sum = run();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    if (i == 0 && spec.warmup == 0) row.checksum = sum;
    if (sum != row.checksum) row.checksum_stable = false;
  }
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t r = sorted.size();
  row.median_us = r % 2 ? sorted[r / 2] : 0.5 * (sorted[r / 2 - 1] + sorted[r / 2]);
  row.min_us = sorted.front();
  row.max_us = sorted.back();
  // Clock granularity can report 0 for tiny shapes.
  const double denom = std::max(row.median_us, 1e-3);
  row.gops = spec.ops() / (denom * 1e3);
  return row;
}

std::vector<BenchSpec> layer_shape_preset(const BenchSpec& base) {
  struct Shape {
    BenchCase kase;
    std::size_t m, n, k;
  };
  // Linear: W [out x in] times A [tokens x in]. Att x V and Q x K^T are square.
  const Shape shapes[] = {
      {BenchCase::Case1, 768, 128, 768},   {BenchCase::Case1, 3072, 128, 768},
      {BenchCase::Case1, 768, 128, 3072},  {BenchCase::Case1, 13824, 32, 5120},
      {BenchCase::Case2, 128, 128, 128},   {BenchCase::Case2, 512, 512, 512},
      {BenchCase::Case2, 2048, 2048, 2048}, {BenchCase::Case3, 128, 128, 128},
      {BenchCase::Case3, 512, 512, 512},   {BenchCase::Case3, 2048, 2048, 2048},
  };
  std::vector<BenchSpec> out;
  for (const auto& s : shapes) {
    for (BenchCase c : {BenchCase::Fp32, s.kase}) {
      BenchSpec spec = base;
      spec.kase = c;
      spec.m = s.m;
      spec.n = s.n;
      spec.k = s.k;
      out.push_back(spec);
    }
  }
  return out;
}

std::string machine_specs() {
  std::string cpu = "unknown";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  std::ostringstream s;
  s << "cpu=" << cpu << "; logical_cores=" << std::thread::hardware_concurrency() << "; compiler=";
#if defined(__clang__)
  s << "clang " << __clang_major__ << '.' << __clang_minor__;
#elif defined(__GNUC__)
  s << "gcc " << __GNUC__ << '.' << __GNUC_MINOR__;
#else
  s << "unknown";
#endif
  s << "; popcnt=";
#if defined(__POPCNT__)
  s << "hw";
#else
  s << "sw";
#endif
  s << "; avx2=";
#if defined(__AVX2__)
  s << "yes";
#else
  s << "no";
#endif
  return s.str();
}

void write_bench_report(const std::vector<BenchRow>& rows, ReportFormat format, std::ostream& out) {
  // fp32 median per shape, for the speedup column.
  std::map<std::tuple<std::size_t, std::size_t, std::size_t, bool>, double> fp32;
  for (const auto& r : rows)
    if (r.spec.kase == BenchCase::Fp32) fp32[{r.spec.m, r.spec.n, r.spec.k, r.spec.parallel}] = r.median_us;
  auto speedup = [&](const BenchRow& r) -> std::string {
    if (!is_gemm(r.spec.kase) || r.spec.kase == BenchCase::Fp32) return "";
    const auto it = fp32.find({r.spec.m, r.spec.n, r.spec.k, r.spec.parallel});
    if (it == fp32.end()) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", it->second / std::max(r.median_us, 1e-3));
    return buf;
  };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return std::string(buf);
  };
  auto hex = [](std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
  };

  const char* cols[] = {"case", "m", "n", "k", "repeats", "warmup", "mode", "median_us", "min_us", "max_us",
                        "gops", "speedup_vs_fp32", "checksum", "checksum_stable", "check"};
  auto fields = [&](const BenchRow& r) {
    return std::vector<std::string>{bench_case_name(r.spec.kase),
                                    std::to_string(r.spec.m),
                                    std::to_string(r.spec.n),
                                    std::to_string(r.spec.k),
                                    std::to_string(r.spec.repeats),
                                    std::to_string(r.spec.warmup),
                                    r.spec.parallel ? "parallel" : "single",
                                    num(r.median_us),
                                    num(r.min_us),
                                    num(r.max_us),
                                    num(r.gops),
                                    speedup(r),
                                    hex(r.checksum),
                                    r.checksum_stable ? "yes" : "no",
                                    r.check};
  };

  if (format == ReportFormat::Csv) {
    out << "# machine: " << machine_specs() << '\n';
    for (std::size_t i = 0; i < std::size(cols); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows) {
      const auto f = fields(r);
      for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << f[i];
      out << '\n';
    }
  } else {
    out << "Machine: " << machine_specs() << "\n\n|";
    for (const char* c : cols) out << ' ' << c << " |";
    out << "\n|";
    for (std::size_t i = 0; i < std::size(cols); ++i) out << (i < 7 ? "---|" : "--:|");
    out << '\n';
    for (const auto& r : rows) {
      out << '|';
      for (const auto& f : fields(r)) out << ' ' << f << " |";
      out << '\n';
    }
  }
}

}  // namespace bwta
