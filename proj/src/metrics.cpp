#include "bayesbeat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace bayesbeat {

ConfusionCounts compute_counts(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("compute_counts: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int p = predictions[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1)) throw std::invalid_argument("compute_counts: values must be 0 or 1");
    if (p == 1) (y == 1 ? c.tp : c.fp)++;
    else (y == 1 ? c.fn : c.tn)++;
  }
  return c;
}

std::optional<double> rank_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("rank_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::uint64_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += avg_rank;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

bool MetricsReport::is_undefined(const std::string& metric) const {
  return std::find(undefined.begin(), undefined.end(), metric) != undefined.end();
}

MetricsReport compute_metrics(const ConfusionCounts& counts, std::span<const double> scores,
                              std::span<const int> labels) {
  if (counts.total() == 0) throw std::invalid_argument("compute_metrics: no evaluated segments");
  if (scores.size() != labels.size()) throw std::invalid_argument("compute_metrics: scores/labels length mismatch");
  MetricsReport r;
  r.counts = counts;
  auto ratio = [&r](double num, double den, const char* name) {
    if (den == 0.0) {
      r.undefined.emplace_back(name);
      return 0.0;
    }
    return num / den;
  };
  const double tp = static_cast<double>(counts.tp), tn = static_cast<double>(counts.tn);
  const double fp = static_cast<double>(counts.fp), fn = static_cast<double>(counts.fn);
  r.sensitivity = ratio(tp, tp + fn, "sensitivity");
  r.specificity = ratio(tn, tn + fp, "specificity");
  r.precision = ratio(tp, tp + fp, "precision");
  r.f1 = ratio(2.0 * r.precision * r.sensitivity, r.precision + r.sensitivity, "f1");
  r.mcc = ratio(tp * tn - fp * fn, std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)), "mcc");
  if (const auto auc = rank_auc(scores, labels)) r.auc = *auc;
  else r.undefined.emplace_back("auc");
  return r;
}

std::vector<MetricsReport> threshold_sweep(std::span<const Prediction> preds, std::span<const int> labels,
                                           std::span<const std::optional<double>> thresholds) {
  if (preds.size() != labels.size()) throw std::invalid_argument("threshold_sweep: predictions/labels length mismatch");
  if (preds.empty()) throw std::invalid_argument("threshold_sweep: no predictions");
  auto key = [](const std::optional<double>& t) { return t ? *t : INFINITY; };
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    ThresholdPolicy{thresholds[i]}.validate();
    if (i > 0 && key(thresholds[i]) > key(thresholds[i - 1]))
      throw std::invalid_argument("threshold_sweep: thresholds must be sorted descending");
  }
  std::vector<MetricsReport> out;
  for (const auto& t : thresholds) {
    const ThresholdPolicy policy{t};
    const auto split = apply_threshold(preds, policy);
    std::vector<int> pred_labels, true_labels;
    std::vector<double> scores;
    for (auto i : split.accepted) {
      pred_labels.push_back(preds[i].label);
      true_labels.push_back(labels[i]);
      scores.push_back(preds[i].p_mean[1]);
    }
    MetricsReport r;
    if (split.accepted.empty()) {
      r.empty = true;
      r.undefined = {"sensitivity", "specificity", "precision", "f1", "auc", "mcc"};
    } else {
      r = compute_metrics(compute_counts(pred_labels, true_labels), scores, true_labels);
    }
    r.threshold = t;
    r.abstention_rate = static_cast<double>(split.abstained.size()) / static_cast<double>(preds.size());
    out.push_back(std::move(r));
  }
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["threshold"] = threshold ? nlohmann::ordered_json(*threshold) : nlohmann::ordered_json(nullptr);
  j["abstention_rate"] = abstention_rate;
  j["empty"] = empty;
  j["counts"] = {{"tp", counts.tp}, {"tn", counts.tn}, {"fp", counts.fp}, {"fn", counts.fn}};
  j["sensitivity"] = sensitivity;
  j["specificity"] = specificity;
  j["precision"] = precision;
  j["f1"] = f1;
  j["auc"] = auc;
  j["mcc"] = mcc;
  j["undefined"] = undefined;
  return j.dump();
}

std::string sweep_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "threshold,abstention_rate,accepted,sensitivity,specificity,precision,f1,auc,mcc\n";
  char buf[256];
  for (const auto& r : reports) {
    char t[32] = "none";
    if (r.threshold) std::snprintf(t, sizeof t, "%g", *r.threshold);
    std::snprintf(buf, sizeof buf, "%s,%.6f,%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", t, r.abstention_rate,
                  static_cast<unsigned long long>(r.counts.total()), r.sensitivity, r.specificity, r.precision, r.f1,
                  r.auc, r.mcc);
    out += buf;
  }
  return out;
}

}  // namespace bayesbeat
