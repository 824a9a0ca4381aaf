#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodymetric/errors.hpp"
#include "bodymetric/numerics.hpp"

namespace bodymetric {

enum class PairOutcome { first, second, tie };

inline std::string to_string(PairOutcome o) {
  switch (o) {
    case PairOutcome::first: return "FIRST";
    case PairOutcome::second: return "SECOND";
    case PairOutcome::tie: return "TIE";
  }
  return "TIE";
}

// Ground-truth outcome encoded by a preference distribution.
inline PairOutcome outcome_of(const Prob2& p) {
  if (p[0] > p[1]) return PairOutcome::first;
  if (p[1] > p[0]) return PairOutcome::second;
  return PairOutcome::tie;
}

// TIE when the probability gap is below t. For finite logits the gap is strictly
// below 1, so t >= 1 ties everything even where the softmax rounded to {1, 0}.
inline PairOutcome predict_outcome(const Prob2& p_hat, double t) {
  const double gap = p_hat[0] - p_hat[1];
  if (gap == 0.0 || t >= 1.0 || std::abs(gap) < t) return PairOutcome::tie;
  return gap > 0.0 ? PairOutcome::first : PairOutcome::second;
}

inline double accuracy(std::span<const PairOutcome> predictions, std::span<const PairOutcome> labels) {
  if (predictions.size() != labels.size()) {
    throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("accuracy of an empty pair set is undefined");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double accuracy_at(std::span<const Prob2> p_hats, std::span<const PairOutcome> labels, double t) {
  std::vector<PairOutcome> preds;
  preds.reserve(p_hats.size());
  for (const auto& p : p_hats) preds.push_back(predict_outcome(p, t));
  return accuracy(preds, labels);
}

inline std::vector<double> threshold_grid(double step = 0.01) {
  if (!(step > 0.0 && step <= 1.0)) throw DomainError("threshold grid step must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(std::ceil(1.0 / step - 1e-9));
  std::vector<double> grid;
  for (std::size_t k = 0; k <= n; ++k) grid.push_back(std::min(1.0, static_cast<double>(k) * step));
  return grid;
}

struct ThresholdCurve {
  std::vector<double> thresholds;
  std::vector<double> accuracies;
  double best_threshold = 0.0;
  double best_accuracy = 0.0;
};

// Sweeps t over the grid; the best threshold is the smallest one reaching the maximum.
inline ThresholdCurve select_tie_threshold(std::span<const Prob2> p_hats, std::span<const PairOutcome> labels,
                                           double grid_step = 0.01) {
  if (labels.empty()) throw ContractError("threshold selection needs a non-empty validation set");
  ThresholdCurve curve;
  curve.thresholds = threshold_grid(grid_step);
  curve.best_accuracy = -1.0;
  for (double t : curve.thresholds) {
    const double acc = accuracy_at(p_hats, labels, t);
    curve.accuracies.push_back(acc);
    if (acc > curve.best_accuracy) {
      curve.best_accuracy = acc;
      curve.best_threshold = t;
    }
  }
  return curve;
}

struct OutcomeCounts {
  std::size_t first = 0;
  std::size_t second = 0;
  std::size_t tie = 0;

  void add(PairOutcome o) {
    switch (o) {
      case PairOutcome::first: ++first; break;
      case PairOutcome::second: ++second; break;
      case PairOutcome::tie: ++tie; break;
    }
  }
  std::size_t total() const { return first + second + tie; }
};

struct EvalReport {
  double accuracy = 0.0;
  double threshold = 0.0;
  std::size_t pair_count = 0;
  OutcomeCounts predicted;
  OutcomeCounts labels;
  ThresholdCurve curve;  // empty when the threshold was fixed by the caller
};

inline EvalReport evaluate_pairs(std::span<const Prob2> p_hats, std::span<const PairOutcome> labels, double t) {
  EvalReport r;
  std::vector<PairOutcome> preds;
  for (const auto& p : p_hats) {
    preds.push_back(predict_outcome(p, t));
    r.predicted.add(preds.back());
  }
  for (auto l : labels) r.labels.add(l);
  r.accuracy = accuracy(preds, labels);
  r.threshold = t;
  r.pair_count = labels.size();
  return r;
}

namespace detail {
inline nlohmann::json counts_json(const OutcomeCounts& c) {
  return {{"FIRST", c.first}, {"SECOND", c.second}, {"TIE", c.tie}};
}

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["t"] = r.threshold;
  j["pairs"] = r.pair_count;
  j["predicted"] = detail::counts_json(r.predicted);
  j["labels"] = detail::counts_json(r.labels);
  if (!r.curve.thresholds.empty()) {
    nlohmann::json curve = nlohmann::json::array();
    for (std::size_t i = 0; i < r.curve.thresholds.size(); ++i) {
      curve.push_back({r.curve.thresholds[i], r.curve.accuracies[i]});
    }
    j["validation_curve"] = curve;
    j["validation_accuracy"] = r.curve.best_accuracy;
  }
  return j;
}

inline std::string report_to_text(const EvalReport& r) {
  std::ostringstream out;
  out << "accuracy   " << detail::fixed(r.accuracy) << '\n';
  out << "threshold  " << detail::fixed(r.threshold, 2) << '\n';
  out << "pairs      " << r.pair_count << '\n';
  out << "           " << "FIRST   SECOND  TIE\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "predicted  %-7zu %-7zu %zu\n", r.predicted.first, r.predicted.second,
                r.predicted.tie);
  out << buf;
  std::snprintf(buf, sizeof buf, "labels     %-7zu %-7zu %zu\n", r.labels.first, r.labels.second, r.labels.tie);
  out << buf;
  return out.str();
}

inline std::string curve_to_csv(const ThresholdCurve& c) {
  std::string out = "t,accuracy\n";
  for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
    out += detail::fixed(c.thresholds[i], 2) + "," + detail::fixed(c.accuracies[i], 6) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator benchmarking

struct BenchmarkEntry {
  std::string generator;
  double mean = 0.0;
  std::size_t count = 0;
  double stddev = 0.0;  // population
};

struct BenchmarkReport {
  std::vector<BenchmarkEntry> entries;  // ascending mean: least to most realistic
  std::vector<std::string> warnings;
};

inline BenchmarkReport benchmark(const std::map<std::string, std::vector<double>>& scores_by_generator) {
  BenchmarkReport report;
  for (const auto& [generator, scores] : scores_by_generator) {
    if (scores.empty()) {
      report.warnings.push_back("generator '" + generator + "' has no samples; excluded");
      continue;
    }
    BenchmarkEntry e;
    e.generator = generator;
    e.count = scores.size();
    double sum = 0.0;
    for (double s : scores) sum += s;
    e.mean = sum / static_cast<double>(e.count);
    double ss = 0.0;
    for (double s : scores) ss += (s - e.mean) * (s - e.mean);
    e.stddev = std::sqrt(ss / static_cast<double>(e.count));
    report.entries.push_back(std::move(e));
  }
  std::stable_sort(report.entries.begin(), report.entries.end(),
                   [](const BenchmarkEntry& a, const BenchmarkEntry& b) { return a.mean < b.mean; });
  return report;
}

inline nlohmann::json benchmark_to_json(const BenchmarkReport& r) {
  nlohmann::json gens = nlohmann::json::array();
  for (const auto& e : r.entries) {
    gens.push_back({{"generator", e.generator}, {"mean", e.mean}, {"count", e.count}, {"stddev", e.stddev}});
  }
  return {{"generators", gens}, {"warnings", r.warnings}};
}

inline std::string benchmark_to_text(const BenchmarkReport& r) {
  std::size_t width = 9;
  for (const auto& e : r.entries) width = std::max(width, e.generator.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %9s  %7s  %9s\n", static_cast<int>(width), "generator", "mean", "count",
                "stddev");
  out << buf;
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%-*s  %9.4f  %7zu  %9.4f\n", static_cast<int>(width), e.generator.c_str(), e.mean,
                  e.count, e.stddev);
    out << buf;
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Ranking

// Highest score first; equal scores ordered by id.
inline std::vector<std::string> rank_images(std::span<const std::pair<std::string, double>> scores) {
  std::vector<std::pair<std::string, double>> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> ids;
  ids.reserve(sorted.size());
  for (auto& [id, _] : sorted) ids.push_back(id);
  return ids;
}

inline std::vector<std::string> rank_images(const std::map<std::string, double>& scores) {
  std::vector<std::pair<std::string, double>> v(scores.begin(), scores.end());
  return rank_images(std::span<const std::pair<std::string, double>>(v));
}

}  // namespace bodymetric
