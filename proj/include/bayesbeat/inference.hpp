#pragma once

// Monte-Carlo predictive inference with aleatoric uncertainty scoring.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bayesbeat/dataio.hpp"
#include "bayesbeat/network.hpp"

namespace bayesbeat {

using ProbPair = std::array<double, 2>;

struct Prediction {
  ProbPair p_mean{0.5, 0.5};                    // mean of the per-draw softmax outputs
  std::array<ProbPair, 2> u_matrix{};           // mean of diag(p) - p p^T over draws
  double u_scalar = 0.0;                        // mean of the u_matrix diagonal
  int label = 0;                                // argmax of p_mean; exact tie -> 0
  bool accepted = true;
  std::size_t n_draws = 0;
  std::vector<ProbPair> draws;                  // per-draw probabilities, if retained
};

struct ThresholdPolicy {
  std::optional<double> threshold;  // none: accept everything

  void validate() const;
  bool accepts(double u_scalar) const { return !threshold || u_scalar <= *threshold; }
};

/// Parses "none" or a non-negative number.
ThresholdPolicy parse_threshold(std::string_view text);

/// Builds a Prediction from per-draw class probabilities (each pair summing
/// to 1). Throws std::invalid_argument on an empty draw set.
Prediction summarize_draws(std::span<const ProbPair> draws, bool keep_draws = false);

struct InferenceOptions {
  std::size_t draws = 64;
  std::uint64_t seed = 0;
  SamplingMode mode = SamplingMode::weight_sample;
  ThresholdPolicy policy;
  bool keep_draws = false;
  std::size_t chunk = 128;  // segments per forward pass
};

/// One segment, shape [800] or [1, 800] or [1, 1, 800]. Draw k uses the
/// noise stream (seed, k). Batchnorm runs on its running statistics.
Prediction predict(Network& net, const Tensor& segment, const InferenceOptions& options);

/// All segments; each draw's weight sample is shared across the batch, so in
/// weight-sample mode the result for a segment equals predict() on it alone.
std::vector<Prediction> predict_batch(Network& net, const std::vector<Segment>& segments,
                                      const InferenceOptions& options);

struct ThresholdSplit {
  std::vector<std::size_t> accepted;   // indices into the input
  std::vector<std::size_t> abstained;
};

ThresholdSplit apply_threshold(std::span<const Prediction> preds, const ThresholdPolicy& policy);

/// {"segment_id":..,"p_af":..,"u_scalar":..,"label":..,"accepted":..}
std::string prediction_json(const std::string& segment_id, const Prediction& p);

/// Row-wise softmax of [B, 2] logits, in double.
std::vector<ProbPair> softmax_rows(const Tensor& logits);

}  // namespace bayesbeat
