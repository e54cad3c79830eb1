// SPDX-License-Identifier: Apache-2.0
#include "bwta/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>

namespace bwta {

// ---------------------------------------------------------------------------
// Config

Schedule TrainConfig::build() const {
  int l0_half = l0, stride_half = stride;
  if (level_convention == LevelConvention::Count) {
    l0_half = l0 == 1 ? 1 : half_range_from_count(l0);
    if (stride % 2 != 0) throw std::invalid_argument("stride must be even in level-count form");
    stride_half = stride / 2;
  }
  return schedule == ScheduleKind::Bitwise ? build_bitwise_schedule(l0_half, total_epochs)
                                           : build_schedule(l0_half, stride_half, total_epochs);
}

void TrainConfig::validate() const {
  model.validate();
  (void)build();
  if (fp_epochs < 0) throw std::invalid_argument("fp_epochs must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (train_samples == 0 || test_samples == 0) throw std::invalid_argument("sample counts must be >= 1");
  if (calib_samples == 0) throw std::invalid_argument("calib_samples must be >= 1");
  if (!(lr_scale >= 0 && lr_weight >= 0 && lr_fp >= 0 && weight_decay >= 0))
    throw std::invalid_argument("learning rates and weight_decay must be >= 0");
  if (warmup_steps < 0 || early_stop_patience < 1) throw std::invalid_argument("bad warmup or patience");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) throw std::invalid_argument("expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("expected true|false, got '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"schedule",
       [](TrainConfig& c, const std::string& v) {
         if (v == "levelwise") c.schedule = ScheduleKind::Levelwise;
         else if (v == "bitwise") c.schedule = ScheduleKind::Bitwise;
         else throw std::invalid_argument("expected levelwise|bitwise, got '" + v + "'");
       }},
      {"level_convention",
       [](TrainConfig& c, const std::string& v) {
         if (v == "half-range") c.level_convention = LevelConvention::HalfRange;
         else if (v == "count") c.level_convention = LevelConvention::Count;
         else throw std::invalid_argument("expected half-range|count, got '" + v + "'");
       }},
      {"L0", [](TrainConfig& c, const std::string& v) { c.l0 = parse_int<int>(v); }},
      {"stride", [](TrainConfig& c, const std::string& v) { c.stride = parse_int<int>(v); }},
      {"total_epochs", [](TrainConfig& c, const std::string& v) { c.total_epochs = parse_int<int>(v); }},
      {"fp_epochs", [](TrainConfig& c, const std::string& v) { c.fp_epochs = parse_int<int>(v); }},
      {"strategy", [](TrainConfig& c, const std::string& v) { c.strategy = parse_strategy(v); }},
      {"early_stop", [](TrainConfig& c, const std::string& v) { c.early_stop = parse_bool(v); }},
      {"early_stop_patience", [](TrainConfig& c, const std::string& v) { c.early_stop_patience = parse_int<int>(v); }},
      {"lr_scale", [](TrainConfig& c, const std::string& v) { c.lr_scale = parse_real(v); }},
      {"lr_weight", [](TrainConfig& c, const std::string& v) { c.lr_weight = parse_real(v); }},
      {"lr_fp", [](TrainConfig& c, const std::string& v) { c.lr_fp = parse_real(v); }},
      {"weight_decay", [](TrainConfig& c, const std::string& v) { c.weight_decay = parse_real(v); }},
      {"warmup_steps", [](TrainConfig& c, const std::string& v) { c.warmup_steps = parse_int<int>(v); }},
      {"batch_size", [](TrainConfig& c, const std::string& v) { c.batch_size = parse_int<std::size_t>(v); }},
      {"lsq_normalizer", [](TrainConfig& c, const std::string& v) { c.lsq_normalizer = parse_bool(v); }},
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>(v); }},
      {"train_samples", [](TrainConfig& c, const std::string& v) { c.train_samples = parse_int<std::size_t>(v); }},
      {"test_samples", [](TrainConfig& c, const std::string& v) { c.test_samples = parse_int<std::size_t>(v); }},
      {"calib_samples", [](TrainConfig& c, const std::string& v) { c.calib_samples = parse_int<std::size_t>(v); }},
      {"margin", [](TrainConfig& c, const std::string& v) { c.margin = parse_real(v); }},
      {"seq_len", [](TrainConfig& c, const std::string& v) { c.model.seq_len = parse_int<std::size_t>(v); }},
      {"d_in", [](TrainConfig& c, const std::string& v) { c.model.d_in = parse_int<std::size_t>(v); }},
      {"d_model", [](TrainConfig& c, const std::string& v) { c.model.block.d_model = parse_int<std::size_t>(v); }},
      {"heads", [](TrainConfig& c, const std::string& v) { c.model.block.heads = parse_int<std::size_t>(v); }},
      {"unit_gain_init", [](TrainConfig& c, const std::string& v) { c.model.block.unit_gain_init = parse_bool(v); }},
      {"d_ff", [](TrainConfig& c, const std::string& v) { c.model.block.d_ff = parse_int<std::size_t>(v); }},
      {"window_frac", [](TrainConfig& c, const std::string& v) { c.window_frac = parse_real(v); }},
      {"tol", [](TrainConfig& c, const std::string& v) { c.tol = parse_real(v); }},
  };
  return table;
}

}  // namespace

TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw std::invalid_argument(where + "unknown key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      throw std::invalid_argument(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return parse_train_config(in);
}

// ---------------------------------------------------------------------------
// Task

SyntheticTask make_synthetic_task(std::size_t seq_len, std::size_t d_in, std::size_t train_samples,
                                  std::size_t test_samples, double margin, std::uint64_t seed) {
  if (seq_len == 0 || d_in == 0) throw std::invalid_argument("make_synthetic_task: empty sequences");
  Rng rng(seed ^ 0x5eed7a5cULL);
  std::vector<double> u(d_in);
  double norm = 0.0;
  for (auto& v : u) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : u) v /= norm;

  auto sample = [&](std::vector<DenseMatrix>& xs, std::vector<std::size_t>& ys) {
    DenseMatrix x(seq_len, d_in);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
    double proj = 0.0;
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t c = 0; c < d_in; ++c) proj += x(t, c) * u[c];
    const double sign = proj >= 0.0 ? 1.0 : -1.0;
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t c = 0; c < d_in; ++c) x(t, c) += static_cast<float>(sign * margin * u[c]);
    xs.push_back(std::move(x));
    ys.push_back(sign > 0 ? 1 : 0);
  };
  SyntheticTask task;
  for (std::size_t i = 0; i < train_samples; ++i) sample(task.train_x, task.train_y);
  for (std::size_t i = 0; i < test_samples; ++i) sample(task.test_x, task.test_y);
  return task;
}

// ---------------------------------------------------------------------------
// Transitions

void stage_transition(TransformerBlock& block, const std::vector<DenseMatrix>& calib, int new_levels,
                      TransitionStrategy strategy) {
  const int current = block.levels();
  if (current == 1) throw std::logic_error("stage_transition: already at the final stage");
  if (new_levels < 1 || new_levels >= current)
    throw std::invalid_argument("stage_transition: L " + std::to_string(current) + " -> " + std::to_string(new_levels));

  std::vector<std::vector<float>> seen(kSlotCount);
  QuantTrace trace;
  trace.collect = &seen;
  for (const auto& x : calib) block.forward_train(to_double(x), trace, nullptr);

  for (std::size_t s = 0; s < kSlotCount; ++s) {
    QuantState& st = block.scale(s).state;
    const QuantMode next = st.mode.with_levels(new_levels);
    const std::size_t n = seen[s].size();
    if (n > 0) {
      const DenseMatrix a(1, n, std::move(seen[s]));
      st.set_scale(transition_scale(a, st, next, strategy));
    }
    st.mode = next;
  }
}

// ---------------------------------------------------------------------------
// Training

double TrainResult::mean_spike() const {
  if (transitions.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : transitions) sum += t.spike();
  return sum / double(transitions.size());
}

std::vector<ScaleTrace> TrainResult::scale_traces() const {
  std::vector<ScaleTrace> out(kSlotCount);
  for (std::size_t s = 0; s < kSlotCount; ++s) out[s].name = slot_name(s);
  for (const auto& e : history) {
    if (e.stage_levels == 0) continue;
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      out[s].values.push_back(e.scales[s]);
      out[s].grads.push_back(e.scale_grads[s]);
    }
  }
  return out;
}

namespace {

class AdamW {
 public:
  void reset() {
    moments_.clear();
    t_ = 0;
  }
  void begin_step() { ++t_; }

  void update(const std::string& name, std::span<float> value, std::span<const float> grad, double lr, double wd) {
    auto& [m, v] = moments_[name];
    if (m.empty()) {
      m.assign(value.size(), 0.0);
      v.assign(value.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(kBeta1, t_), c2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      const double step = (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps) + wd * value[i];
      value[i] = static_cast<float>(value[i] - lr * step);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
  int t_ = 0;
};

/// Linear warmup then cosine decay to zero over `total` steps.
double lr_factor(long step, long total, long warmup) {
  if (warmup > 0 && step < warmup) return double(step + 1) / double(warmup);
  const double span = std::max(1L, total - warmup);
  const double progress = std::min(1.0, double(step - warmup) / span);
  return 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct Eval {
  double loss = 0.0;
  double accuracy = 0.0;
  double zero_fraction = 0.0;
};

double cross_entropy(const DoubleMatrix& logits, std::size_t label, DoubleMatrix* dlogits) {
  double mx = logits[0];
  for (std::size_t c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(logits[c] - mx);
  if (dlogits) {
    *dlogits = DoubleMatrix(1, logits.cols());
    for (std::size_t c = 0; c < logits.cols(); ++c) (*dlogits)[c] = std::exp(logits[c] - mx) / z - (c == label);
  }
  return std::log(z) + mx - logits[label];
}

Eval evaluate(const ToyClassifier& model, const std::vector<DenseMatrix>& xs, const std::vector<std::size_t>& ys) {
  Eval out;
  std::vector<std::vector<float>> seen(kSlotCount);
  QuantTrace trace;
  trace.quantize = model.block.quantized;
  if (trace.quantize) trace.collect = &seen;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const DoubleMatrix z = model.forward_train(to_double(xs[i]), trace, nullptr);
    out.loss += cross_entropy(z, ys[i], nullptr);
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.cols(); ++c)
      if (z[c] > z[best]) best = c;
    correct += best == ys[i];
  }
  out.loss /= double(xs.size());
  out.accuracy = double(correct) / double(xs.size());
  if (trace.quantize) {
    std::size_t zeros = 0, total = 0;
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      const auto& st = model.block.scale(s).state;
      for (float v : seen[s]) {
        const double r = std::clamp(double(v) / st.scale, double(st.mode.lo()), double(st.mode.hi()));
        zeros += std::fabs(r) < 0.5;
      }
      total += seen[s].size();
    }
    out.zero_fraction = total ? double(zeros) / double(total) : 0.0;
  }
  return out;
}

struct EpochStats {
  double loss = 0.0;
  std::vector<double> scale_grads;
};

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const SyntheticTask& task) : cfg_(cfg), task_(task), model_(cfg.model, cfg.seed) {
    for (std::size_t i = 0; i < std::min(cfg.calib_samples, task.train_x.size()); ++i)
      calib_raw_.push_back(task.train_x[i]);
  }

  ToyClassifier& model() { return model_; }

  std::vector<DenseMatrix> calibration_inputs() const {
    std::vector<DenseMatrix> out;
    for (const auto& x : calib_raw_) out.push_back(model_.embed_tokens(x));
    return out;
  }

  /// One pass over the shuffled training set.
  EpochStats run_epoch(int epoch, bool quantized, long& step, long total_steps) {
    std::vector<std::size_t> order(task_.train_x.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg_.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    QuantTrace trace;
    trace.quantize = quantized;
    EpochStats stats;
    stats.scale_grads.assign(kSlotCount, 0.0);
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg_.batch_size) {
      const std::size_t last = std::min(order.size(), first + cfg_.batch_size);
      const double inv_b = 1.0 / double(last - first);
      zero_grads();
      double batch_loss = 0.0;
      for (std::size_t i = first; i < last; ++i) {
        const std::size_t k = order[i];
        ToyClassifier::Cache cache;
        const DoubleMatrix z = model_.forward_train(to_double(task_.train_x[k]), trace, &cache);
        DoubleMatrix dz;
        batch_loss += cross_entropy(z, task_.train_y[k], &dz);
        for (double& g : dz.values()) g *= inv_b;
        model_.backward(cache, dz, trace);
      }
      batch_loss *= inv_b;
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("training diverged: non-finite loss in epoch " + std::to_string(epoch));
      stats.loss += batch_loss;
      for (std::size_t s = 0; s < kSlotCount; ++s) stats.scale_grads[s] += std::fabs(model_.block.scale(s).grad);
      ++batches;
      apply_update(quantized, lr_factor(step++, total_steps, cfg_.warmup_steps));
    }
    stats.loss /= double(batches);
    for (auto& g : stats.scale_grads) g /= double(batches);
    return stats;
  }

  void reset_optimizer() { opt_.reset(); }

 private:
  void zero_grads() {
    model_.visit_params([](const std::string&, ParamKind, std::span<float>, std::span<float> grad) {
      std::fill(grad.begin(), grad.end(), 0.0f);
    });
  }

  void apply_update(bool quantized, double factor) {
    opt_.begin_step();
    model_.visit_params([&](const std::string& name, ParamKind kind, std::span<float> value, std::span<float> grad) {
      const bool is_matrix = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
      switch (kind) {
        case ParamKind::Scale:
          if (quantized) opt_.update(name, value, grad, cfg_.lr_scale * factor, 0.0);
          break;
        case ParamKind::BinaryWeight:
          opt_.update(name, value, grad, (quantized ? cfg_.lr_weight : cfg_.lr_fp) * factor, cfg_.weight_decay);
          break;
        case ParamKind::FullPrecision:
          opt_.update(name, value, grad, cfg_.lr_fp * factor, is_matrix ? cfg_.weight_decay : 0.0);
          break;
      }
    });
    for (std::size_t s = 0; s < kSlotCount; ++s) {
      auto& st = model_.block.scale(s).state;
      st.set_scale(st.scale);
    }
    model_.block.refresh_weights();
  }

  const TrainConfig& cfg_;
  const SyntheticTask& task_;
  ToyClassifier model_;
  std::vector<DenseMatrix> calib_raw_;
  AdamW opt_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const SyntheticTask& task) {
  cfg.validate();
  if (task.train_x.empty() || task.test_x.empty()) throw std::invalid_argument("train: empty task");
  TrainResult result;
  result.schedule = cfg.build();
  Trainer trainer(cfg, task);
  ToyClassifier& model = trainer.model();
  for (std::size_t s = 0; s < kSlotCount; ++s) model.block.scale(s).state.lsq_normalizer = cfg.lsq_normalizer;

  const long steps_per_epoch = static_cast<long>((task.train_x.size() + cfg.batch_size - 1) / cfg.batch_size);
  int epoch = 0;
  auto record = [&](int levels, const EpochStats& stats) {
    const Eval ev = evaluate(model, task.test_x, task.test_y);
    EpochRecord r;
    r.epoch = epoch;
    r.stage_levels = levels;
    r.loss = stats.loss;
    r.eval_loss = ev.loss;
    r.accuracy = ev.accuracy;
    r.zero_fraction = ev.zero_fraction;
    for (std::size_t s = 0; s < kSlotCount; ++s) r.scales.push_back(model.block.scale(s).state.scale);
    r.scale_grads = stats.scale_grads;
    result.history.push_back(std::move(r));
    ++epoch;
    return ev;
  };

  // Full-precision warm start.
  model.block.quantized = false;
  {
    long step = 0;
    const long total = steps_per_epoch * cfg.fp_epochs;
    for (int e = 0; e < cfg.fp_epochs; ++e) record(0, trainer.run_epoch(epoch, false, step, total));
  }
  result.fp_accuracy = evaluate(model, task.test_x, task.test_y).accuracy;

  // Quantized stages. Initial scales follow the LSQ rule 2 mean|A| / sqrt(L).
  model.block.quantized = true;
  const auto& stages = result.schedule.stages;
  model.block.set_levels(stages.front().levels);
  model.block.calibrate(trainer.calibration_inputs(), 1.0f / std::sqrt(static_cast<float>(stages.front().levels)));
  trainer.reset_optimizer();

  long step = 0;
  const long total = steps_per_epoch * cfg.total_epochs;
  double last_eval = evaluate(model, task.test_x, task.test_y).loss;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    if (si > 0) {
      TransitionRecord t;
      t.epoch = epoch;
      t.from_levels = stages[si - 1].levels;
      t.to_levels = stages[si].levels;
      t.loss_before = last_eval;
      stage_transition(model.block, trainer.calibration_inputs(), stages[si].levels, cfg.strategy);
      trainer.reset_optimizer();
      t.loss_after = evaluate(model, task.test_x, task.test_y).loss;
      result.transitions.push_back(t);
    }
    const bool final_stage = si + 1 == stages.size();
    double best = last_eval;
    int stale = 0;
    for (int e = 0; e < stages[si].epochs; ++e) {
      const Eval ev = record(stages[si].levels, trainer.run_epoch(epoch, true, step, total));
      last_eval = ev.loss;
      if (cfg.early_stop && !final_stage) {
        if (ev.loss < best) {
          best = ev.loss;
          stale = 0;
        } else if (++stale >= cfg.early_stop_patience) {
          step += steps_per_epoch * (stages[si].epochs - e - 1);
          break;
        }
      }
    }
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < task.test_x.size(); ++i) correct += model.predict(task.test_x[i]) == task.test_y[i];
  result.final_accuracy = double(correct) / double(task.test_x.size());
  result.model = std::move(model);
  return result;
}

void write_metrics_csv(const TrainResult& result, std::ostream& out) {
  out << "epoch,stage_L,loss,eval_loss,acc,zero_frac";
  for (std::size_t s = 0; s < kSlotCount; ++s) out << ",scale." << slot_name(s);
  out << '\n';
  const auto old_precision = out.precision(9);
  for (const auto& e : result.history) {
    out << e.epoch << ',' << e.stage_levels << ',' << e.loss << ',' << e.eval_loss << ',' << e.accuracy << ','
        << e.zero_fraction;
    for (double s : e.scales) out << ',' << s;
    out << '\n';
  }
  out.precision(old_precision);
}

}  // namespace bwta
