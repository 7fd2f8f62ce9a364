#pragma once

// Binary classification metrics (AF = positive = 1) and threshold sweeps.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bayesbeat/inference.hpp"

namespace bayesbeat {

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::uint64_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Throws std::invalid_argument on a length mismatch or a label outside {0, 1}.
ConfusionCounts compute_counts(std::span<const int> predictions, std::span<const int> labels);

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form). nullopt if either class is absent.
std::optional<double> rank_auc(std::span<const double> scores, std::span<const int> labels);

struct MetricsReport {
  double sensitivity = 0, specificity = 0, precision = 0, f1 = 0, auc = 0, mcc = 0;
  ConfusionCounts counts;
  std::optional<double> threshold;  // none: no uncertainty filtering
  double abstention_rate = 0;
  bool empty = false;               // no segment survived the threshold
  /// Metrics whose denominator was zero; they are reported as 0.
  std::vector<std::string> undefined;

  bool is_undefined(const std::string& metric) const;
  std::string to_json() const;
};

/// Throws std::invalid_argument on empty input or mismatched lengths.
MetricsReport compute_metrics(const ConfusionCounts& counts, std::span<const double> scores,
                              std::span<const int> labels);

/// One report per threshold over the accepted predictions (u_scalar <=
/// threshold), AUC over the same population. Thresholds must be sorted
/// descending with none (no filtering) first.
std::vector<MetricsReport> threshold_sweep(std::span<const Prediction> preds, std::span<const int> labels,
                                           std::span<const std::optional<double>> thresholds);

/// Header `threshold,abstention_rate,accepted,sensitivity,specificity,precision,f1,auc,mcc`.
std::string sweep_csv(const std::vector<MetricsReport>& reports);

}  // namespace bayesbeat
