// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "bwta/model.hpp"
#include "bwta/schedule.hpp"

namespace bwta {

enum class ScheduleKind { Levelwise, Bitwise };
enum class LevelConvention { HalfRange, Count };  // how L0 / stride are written

struct TrainConfig {
  // schedule
  ScheduleKind schedule = ScheduleKind::Levelwise;
  LevelConvention level_convention = LevelConvention::HalfRange;
  int l0 = 4;
  int stride = 1;
  int total_epochs = 30;
  int fp_epochs = 4;  // full-precision warm start before the first stage
  TransitionStrategy strategy = TransitionStrategy::Ours;
  bool early_stop = false;
  int early_stop_patience = 3;

  // optimizer (AdamW, cosine decay with linear warmup)
  double lr_scale = 1e-3;
  double lr_weight = 2e-5;
  double lr_fp = 5e-4;
  double weight_decay = 0.01;
  int warmup_steps = 20;
  std::size_t batch_size = 32;
  bool lsq_normalizer = true;

  // task and model
  std::uint64_t seed = 0;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 500;
  std::size_t calib_samples = 64;
  double margin = 0.5;
  ModelConfig model;

  // diagnostics
  double window_frac = 0.2;
  double tol = 0.01;

  /// Schedule in half-range form, honoring the level convention.
  Schedule build() const;
  void validate() const;
};

/// Parses key=value lines ('#' comments, blank lines ignored). Unknown keys
/// and bad values throw std::invalid_argument naming the line number.
TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Two-class sequences: tokens are N(0, 1) plus +-margin along a fixed unit
/// direction u, and the label is the sign of <mean token, u>.
struct SyntheticTask {
  std::vector<DenseMatrix> train_x, test_x;
  std::vector<std::size_t> train_y, test_y;
};

SyntheticTask make_synthetic_task(std::size_t seq_len, std::size_t d_in, std::size_t train_samples,
                                  std::size_t test_samples, double margin, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;  // 0-based, counting the FP warm start
  int stage_levels = 0;  // 0 during the FP warm start
  double loss = 0.0;       // mean training loss over the epoch
  double eval_loss = 0.0;  // loss on the fixed held-out set after the epoch
  double accuracy = 0.0;   // held-out accuracy after the epoch
  double zero_fraction = 0.0;  // share of zeros over all quantized activations
  std::vector<double> scales;      // per slot, end of epoch
  std::vector<double> scale_grads; // per slot, mean |grad| over the epoch
};

struct TransitionRecord {
  int epoch = 0;  // first epoch of the new stage
  int from_levels = 0;
  int to_levels = 0;
  double loss_before = 0.0;  // held-out loss just before the transition
  double loss_after = 0.0;   // held-out loss right after it, before any update
  double spike() const { return loss_after - loss_before; }
};

struct TrainResult {
  Schedule schedule;
  std::vector<EpochRecord> history;
  std::vector<TransitionRecord> transitions;
  double final_accuracy = 0.0;  // packed L = 1 inference on the held-out set
  double fp_accuracy = 0.0;     // after the FP warm start
  ToyClassifier model;

  double mean_spike() const;
  /// Scale traces over the quantized epochs, for convergence_report.
  std::vector<ScaleTrace> scale_traces() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Moves every quantizer of the block to `new_levels`, rescaling each with
/// the strategy from its inputs over `calib` (block inputs) at the current
/// grids. Throws std::logic_error when the block is already at L = 1 and
/// std::invalid_argument unless 1 <= new_levels < current levels.
void stage_transition(TransformerBlock& block, const std::vector<DenseMatrix>& calib, int new_levels,
                      TransitionStrategy strategy);

/// Runs the FP warm start then every stage of the schedule. Deterministic
/// for a given config. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const SyntheticTask& task);

/// epoch, stage_L, loss, eval_loss, acc, zero_frac, then one column per scale.
void write_metrics_csv(const TrainResult& result, std::ostream& out);

}  // namespace bwta
