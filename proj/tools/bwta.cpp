// SPDX-License-Identifier: Apache-2.0
// bwta: verify | bench | pack | inspect | train-demo
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bwta/bwta_file.hpp"
#include "bwta/harness.hpp"
#include "bwta/quant.hpp"
#include "bwta/train.hpp"

namespace fs = std::filesystem;
using namespace bwta;

namespace {

/// Rows of floats separated by whitespace and/or commas; blank lines skipped.
DenseMatrix read_float_grid(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<float> values;
  std::size_t cols = 0, rows = 0, lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    for (char& c : line)
      if (c == ',') c = ' ';
    std::istringstream fields(line);
    std::size_t count = 0;
    for (std::string tok; fields >> tok; ++count) {
      std::size_t used = 0;
      float v = 0.0f;
      try {
        v = std::stof(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad number '" + tok + "'");
      values.push_back(v);
    }
    if (count == 0) continue;
    if (rows == 0) cols = count;
    if (count != cols)
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                               " values, found " + std::to_string(count));
    ++rows;
  }
  if (rows == 0) throw std::runtime_error(path.string() + ": empty input");
  return DenseMatrix(rows, cols, std::move(values));
}

int cmd_verify(std::uint64_t seed, std::size_t trials, bool inject) {
  const auto report = run_verify({seed, trials, inject});
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  if (!report.passed()) {
    std::cout << "FAIL after " << report.trials << " trials: " << report.failure->describe() << '\n';
    return 1;
  }
  std::cout << "PASS: " << report.trials << " trials, " << report.checks << " checks (seed " << seed << ")\n";
  return 0;
}

int cmd_pack(const fs::path& input, const std::string& mode, std::optional<float> scale, const fs::path& output) {
  if (scale && !(*scale > 0.0f)) throw std::runtime_error("--scale must be > 0");
  const DenseMatrix a = read_float_grid(input);
  BwtaFile file;
  if (mode == "binary") {
    const float s = scale.value_or(1.0f);
    file = BwtaFile{s, pack_sign(quantize(a, QuantState(s, QuantMode::sign_binary())))};
  } else if (mode == "ternary") {
    const float s = scale ? *scale : activation_scale_init(a);
    file = BwtaFile{s, pack_ternary(a, s)};
  } else if (mode == "bool") {
    const float s = scale ? *scale : activation_scale_init(a);
    file = BwtaFile{s, pack_bool(a, s)};
  } else {
    throw std::runtime_error("unknown mode '" + mode + "'");
  }
  write_bwta(output, file);
  std::cout << "wrote " << output.string() << ": " << mode << ' ' << file.rows() << 'x' << file.cols() << " scale "
            << file.scale << '\n';
  return 0;
}

int cmd_inspect(const fs::path& path) {
  const BwtaFile f = read_bwta(path);
  const char* kind = f.kind() == BwtaKind::Ternary ? "ternary" : f.kind() == BwtaKind::BoolOneIsOne ? "bool" : "binary";
  std::cout << "kind " << kind << "\nrows " << f.rows() << "\ncols " << f.cols() << "\nscale " << f.scale << '\n';
  const IntMatrix q = unpack(f);
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) std::cout << (c ? " " : "") << q(r, c);
    std::cout << '\n';
  }
  return 0;
}

int cmd_train_demo(const fs::path& config, const fs::path& out_dir) {
  const TrainConfig cfg = load_train_config(config);
  const auto schedule = cfg.build();
  std::cerr << "schedule:";
  for (const auto& s : schedule.stages) std::cerr << " L=" << s.levels << "x" << s.epochs;
  std::cerr << " (strategy " << strategy_name(cfg.strategy) << ", seed " << cfg.seed << ")\n";

  const auto task = make_synthetic_task(cfg.model.seq_len, cfg.model.d_in, cfg.train_samples, cfg.test_samples,
                                        cfg.margin, cfg.seed);
  const TrainResult result = train(cfg, task);

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir / "metrics.csv");
  write_metrics_csv(result, csv);
  if (!csv) throw std::runtime_error("cannot write " + (out_dir / "metrics.csv").string());
  save_checkpoint(result.model, out_dir / "checkpoint");

  const auto report = convergence_report(result.scale_traces(), cfg.window_frac, cfg.tol);
  std::cout << "fp_accuracy " << result.fp_accuracy << "\nfinal_accuracy " << result.final_accuracy
            << "\nmean_transition_spike " << result.mean_spike() << "\nnon_converged_fraction "
            << report.non_converged_fraction << '\n';
  for (const auto& v : report.scales) {
    if (v.tags.empty() && v.converged) continue;
    std::cout << "  " << v.name << (v.converged ? " converged" : " not-converged");
    for (const auto& t : v.tags) std::cout << ' ' << t;
    std::cout << '\n';
  }
  std::cout << "wrote " << (out_dir / "metrics.csv").string() << " and " << (out_dir / "checkpoint").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BWTA kernels, packing and training harness"};
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "Fuzz every kernel against the integer oracle");
  std::uint64_t v_seed = 0;
  std::size_t v_trials = 200;
  bool v_inject = false;
  verify->add_option("--seed", v_seed, "Base seed")->capture_default_str();
  verify->add_option("--trials", v_trials, "Random instances")->capture_default_str();
  verify->add_flag("--inject-flip", v_inject, "Corrupt one plane_neg bit (harness self-test; must fail)");

  auto* bench = app.add_subcommand("bench", "Time kernels and report latency");
  BenchSpec spec;
  std::string b_case = "case1", b_format = "csv", b_preset;
  bool b_allow_unchecked = false;
  double b_mem_gib = 0.0;
  bench->add_option("--case", b_case, "fp32|case1|case1-naive-and|case2|case3|pack-binary|pack-ternary")
      ->capture_default_str();
  bench->add_option("--m", spec.m, "Output rows")->capture_default_str();
  bench->add_option("--n", spec.n, "Output cols")->capture_default_str();
  bench->add_option("--k", spec.k, "Reduction length")->capture_default_str();
  bench->add_option("--preset", b_preset, "Shape preset: paper (transformer layer shapes)");
  bench->add_option("--repeats", spec.repeats, "Timed repeats")->capture_default_str();
  bench->add_option("--warmup", spec.warmup, "Untimed warmup runs")->capture_default_str();
  bench->add_option("--seed", spec.seed, "Operand seed")->capture_default_str();
  bench->add_option("--format", b_format, "csv|md")->capture_default_str();
  bench->add_option("--check", spec.check, "Verify against the oracle before timing (true|false)")
      ->capture_default_str();
  bench->add_flag("--allow-unchecked", b_allow_unchecked, "Permit --check false");
  bench->add_flag("--parallel", spec.parallel, "Use the kernels' worker threads");
  bench->add_option("--memory-limit-gib", b_mem_gib, "Reject shapes above this estimate (default: half of RAM)");

  auto* pack = app.add_subcommand("pack", "Pack a text float grid into a .bwta file");
  std::string p_input, p_output, p_mode = "ternary";
  std::optional<float> p_scale;
  pack->add_option("--input", p_input, "Whitespace or comma separated float grid")->required();
  pack->add_option("--output", p_output, ".bwta path")->required();
  pack->add_option("--mode", p_mode, "binary|ternary|bool")->capture_default_str();
  pack->add_option("--scale", p_scale, "Quantizer scale (default 2 mean|A|; 1 for binary)");

  auto* inspect = app.add_subcommand("inspect", "Print a .bwta header and its integers");
  std::string i_path;
  inspect->add_option("file", i_path, ".bwta file")->required();

  auto* demo = app.add_subcommand("train-demo", "Smooth multi-stage training on the synthetic task");
  std::string t_config, t_out = "bwta-train-out";
  demo->add_option("config", t_config, "key=value training config");
  demo->add_option("--out-dir", t_out, "Directory for metrics.csv and checkpoint/")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) return cmd_verify(v_seed, v_trials, v_inject);

    if (*bench) {
      if (b_format != "csv" && b_format != "md") throw std::runtime_error("--format must be csv or md");
      if (!spec.check && !b_allow_unchecked) {
        std::cerr << "error: --check false skips the oracle gate; pass --allow-unchecked to run anyway\n";
        return 2;
      }
      spec.kase = parse_bench_case(b_case);
      std::vector<BenchSpec> specs;
      if (b_preset.empty()) {
        specs.push_back(spec);
      } else if (b_preset == "paper") {
        specs = layer_shape_preset(spec);
        if (bench->count("--case")) {
          std::vector<BenchSpec> only;
          for (auto s : specs)
            if (s.kase != BenchCase::Fp32) {
              s.kase = spec.kase;
              only.push_back(s);
            }
          specs = only;
        }
      } else {
        throw std::runtime_error("unknown preset '" + b_preset + "'");
      }
      const std::size_t limit =
          b_mem_gib > 0 ? static_cast<std::size_t>(b_mem_gib * double(1ULL << 30)) : bench_memory_limit();
      for (const auto& s : specs) {
        s.validate();
        if (s.estimated_bytes() > limit) run_bench(s, limit);  // throws with the size estimate
      }
      std::vector<BenchRow> rows;
      bool ok = true;
      for (const auto& s : specs) {
        rows.push_back(run_bench(s, limit));
        ok = ok && rows.back().check != "fail" && rows.back().checksum_stable;
      }
      write_bench_report(rows, b_format == "md" ? ReportFormat::Markdown : ReportFormat::Csv, std::cout);
      return ok ? 0 : 1;
    }

    if (*pack) return cmd_pack(p_input, p_mode, p_scale, p_output);
    if (*inspect) return cmd_inspect(i_path);

    if (*demo) {
      if (t_config.empty() || !fs::exists(t_config)) {
        std::cerr << "error: " << (t_config.empty() ? std::string("no config given") : "config not found: " + t_config)
                  << "\n\n"
                  << demo->help();
        return 2;
      }
      return cmd_train_demo(t_config, t_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
