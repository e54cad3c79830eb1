// SPDX-License-Identifier: Apache-2.0
#include "bwta/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bwta {

void Schedule::validate() const {
  if (stages.empty()) throw std::invalid_argument("Schedule: no stages");
  int sum = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].levels < 1) throw std::invalid_argument("Schedule: levels must be >= 1");
    if (stages[i].epochs < 1) throw std::invalid_argument("Schedule: every stage needs >= 1 epoch");
    if (i > 0 && stages[i].levels >= stages[i - 1].levels)
      throw std::invalid_argument("Schedule: levels must strictly decrease");
    sum += stages[i].epochs;
  }
  if (stages.back().levels != 1) throw std::invalid_argument("Schedule: final stage must be L = 1");
  if (sum != total_epochs) throw std::invalid_argument("Schedule: epochs do not sum to total_epochs");
}

std::vector<int> Schedule::levels() const {
  std::vector<int> out;
  for (const auto& s : stages) out.push_back(s.levels);
  return out;
}

std::vector<int> Schedule::epochs() const {
  std::vector<int> out;
  for (const auto& s : stages) out.push_back(s.epochs);
  return out;
}

std::size_t Schedule::stage_of_epoch(int epoch) const {
  if (epoch < 0) throw std::out_of_range("Schedule: negative epoch");
  int end = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    end += stages[i].epochs;
    if (epoch < end) return i;
  }
  throw std::out_of_range("Schedule: epoch past the end");
}

namespace {

Schedule allocate(std::vector<int> levels, int total) {
  const int n = static_cast<int>(levels.size());
  if (total < n) {
    throw std::invalid_argument("build_schedule: total_epochs " + std::to_string(total) + " < stage count " +
                                std::to_string(n));
  }
  Schedule s;
  s.total_epochs = total;
  const int early = n - 1;
  int final_epochs = early == 0 ? total : (total + 1) / 2;
  int rest = total - final_epochs;
  // Too few epochs to give every earlier stage one: take them from the final stage.
  if (rest < early) {
    final_epochs = total - early;
    rest = early;
  }
  for (int i = 0; i < early; ++i) {
    int e = rest / early;
    if (i >= early - rest % early) ++e;
    s.stages.push_back({levels[i], e});
  }
  s.stages.push_back({1, final_epochs});
  s.validate();
  return s;
}

}  // namespace

Schedule build_schedule(int l0, int stride, int total_epochs) {
  if (l0 < 1) throw std::invalid_argument("build_schedule: L0 must be >= 1");
  if (stride < 1) throw std::invalid_argument("build_schedule: stride must be >= 1");
  std::vector<int> levels;
  for (int l = l0; l > 1; l -= stride) levels.push_back(l);
  levels.push_back(1);
  return allocate(std::move(levels), total_epochs);
}

Schedule build_bitwise_schedule(int l0, int total_epochs) {
  if (l0 < 1) throw std::invalid_argument("build_bitwise_schedule: L0 must be >= 1");
  std::vector<int> levels;
  for (int l = l0; l > 1; l /= 2) levels.push_back(l);
  levels.push_back(1);
  return allocate(std::move(levels), total_epochs);
}

int half_range_from_count(int count) {
  if (count < 3 || count % 2 == 0)
    throw std::invalid_argument("level count must be odd and >= 3, got " + std::to_string(count));
  return (count - 1) / 2;
}

double projection_factor(const IntMatrix& prev, const IntMatrix& cur) {
  if (prev.rows() != cur.rows() || prev.cols() != cur.cols())
    throw std::invalid_argument("projection_factor: shape " + shape_of(prev) + " vs " + shape_of(cur));
  double sp = 0.0, sc = 0.0;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    sp += std::abs(prev[i]);
    sc += std::abs(cur[i]);
  }
  if (sc == 0.0) throw std::domain_error("projection_factor: current activations are all zero");
  return sp / sc;
}

double zero_fraction(const DenseMatrix& a, float s, int levels) {
  if (!(s > 0.0f)) throw std::invalid_argument("zero_fraction: scale must be > 0");
  if (a.empty()) return 0.0;
  const IntMatrix q = quantize(a, QuantState(s, QuantMode::levelwise(levels)));
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < q.size(); ++i) zeros += q[i] == 0;
  return double(zeros) / double(q.size());
}

TransitionStrategy parse_strategy(const std::string& name) {
  if (name == "ours") return TransitionStrategy::Ours;
  if (name == "mean") return TransitionStrategy::Mean;
  if (name == "none" || name == "search-off") return TransitionStrategy::None;
  throw std::invalid_argument("unknown strategy '" + name + "' (ours|mean|none|search-off)");
}

const char* strategy_name(TransitionStrategy s) {
  switch (s) {
    case TransitionStrategy::Ours: return "ours";
    case TransitionStrategy::Mean: return "mean";
    case TransitionStrategy::None: return "none";
  }
  return "?";
}

float transition_scale(const DenseMatrix& calib, const QuantState& from, const QuantMode& to,
                       TransitionStrategy strategy) {
  switch (strategy) {
    case TransitionStrategy::None:
      return from.scale;
    case TransitionStrategy::Mean: {
      for (float v : calib.values())
        if (v != 0.0f) return activation_scale_init(calib);
      return from.scale;
    }
    case TransitionStrategy::Ours: {
      QuantState next = from;
      next.mode = to;
      const IntMatrix prev = quantize(calib, from);
      const IntMatrix cur = quantize(calib, next);
      double sc = 0.0;
      for (std::size_t i = 0; i < cur.size(); ++i) sc += std::abs(cur[i]);
      if (sc == 0.0) return from.scale;
      return static_cast<float>(from.scale * projection_factor(prev, cur));
    }
  }
  return from.scale;
}

ConvergenceReport convergence_report(const std::vector<ScaleTrace>& traces, double window_frac, double tol) {
  if (traces.empty()) throw std::invalid_argument("convergence_report: no scales");
  if (!(window_frac > 0.0 && window_frac <= 1.0))
    throw std::invalid_argument("convergence_report: window_frac must be in (0, 1]");
  ConvergenceReport report;
  std::size_t bad = 0;
  for (const auto& t : traces) {
    const std::size_t n = t.values.size();
    if (n == 0) throw std::invalid_argument("convergence_report: empty history for " + t.name);
    ScaleVerdict v;
    v.name = t.name;
    const std::size_t window = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(window_frac * static_cast<double>(n))));
    const std::size_t first = n > window ? n - window : 0;

    std::vector<double> deltas;
    for (std::size_t i = std::max<std::size_t>(first, 1); i < n; ++i) deltas.push_back(t.values[i] - t.values[i - 1]);
    double max_delta = 0.0;
    for (double d : deltas) max_delta = std::max(max_delta, std::fabs(d));
    v.converged = !(max_delta > tol * std::fabs(t.values.back()));

    if (!v.converged) {
      const bool all_pos = std::all_of(deltas.begin(), deltas.end(), [](double d) { return d > 0; });
      const bool all_neg = std::all_of(deltas.begin(), deltas.end(), [](double d) { return d < 0; });
      std::size_t flips = 0;
      for (std::size_t i = 1; i < deltas.size(); ++i) flips += (deltas[i] > 0) != (deltas[i - 1] > 0);
      if (all_pos || all_neg) v.tags.push_back("diverging");
      else if (deltas.size() > 1 && 2 * flips >= deltas.size() - 1) v.tags.push_back("oscillating");
      ++bad;
    }

    if (t.grads.size() == n && n > window) {
      double peak = 0.0, recent = 0.0;
      for (double g : t.grads) peak = std::max(peak, std::fabs(g));
      for (std::size_t i = first; i < n; ++i) recent += std::fabs(t.grads[i]);
      recent /= double(n - first);
      if (peak > 0.0 && recent < 1e-2 * peak) v.tags.push_back("vanished-gradient");
    }
    report.scales.push_back(std::move(v));
  }
  report.non_converged_fraction = double(bad) / double(traces.size());
  return report;
}

}  // namespace bwta
