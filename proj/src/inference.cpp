#include "bayesbeat/inference.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "bayesbeat/kvconfig.hpp"

namespace bayesbeat {

void ThresholdPolicy::validate() const {
  if (threshold && !(*threshold >= 0.0)) throw std::invalid_argument("uncertainty threshold must be >= 0");
}

ThresholdPolicy parse_threshold(std::string_view text) {
  const std::string t = trim(text);
  ThresholdPolicy p;
  if (t != "none") p.threshold = parse_double(t, "threshold");
  p.validate();
  return p;
}

Prediction summarize_draws(std::span<const ProbPair> draws, bool keep_draws) {
  if (draws.empty()) throw std::invalid_argument("prediction needs at least one draw");
  Prediction out;
  out.p_mean = {0.0, 0.0};
  for (const auto& p : draws) {
    for (int i = 0; i < 2; ++i) {
      out.p_mean[i] += p[i];
      for (int j = 0; j < 2; ++j) out.u_matrix[i][j] += (i == j ? p[i] : 0.0) - p[i] * p[j];
    }
  }
  const double n = static_cast<double>(draws.size());
  for (int i = 0; i < 2; ++i) {
    out.p_mean[i] /= n;
    for (int j = 0; j < 2; ++j) out.u_matrix[i][j] /= n;
  }
  out.u_scalar = 0.5 * (out.u_matrix[0][0] + out.u_matrix[1][1]);
  out.label = out.p_mean[1] > out.p_mean[0] ? 1 : 0;
  out.n_draws = draws.size();
  if (keep_draws) out.draws.assign(draws.begin(), draws.end());
  return out;
}

std::vector<ProbPair> softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw ShapeError("expected [B, 2] logits, got " + shape_str(logits.shape()));
  std::vector<ProbPair> out(logits.dim(0));
  for (std::size_t b = 0; b < out.size(); ++b) {
    const double l0 = logits[2 * b], l1 = logits[2 * b + 1];
    const double m = std::max(l0, l1);
    const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    out[b] = {e0 / (e0 + e1), e1 / (e0 + e1)};
  }
  return out;
}

namespace {

void check_options(const InferenceOptions& o) {
  if (o.draws == 0) throw std::invalid_argument("inference needs at least one draw");
  if (o.chunk == 0) throw std::invalid_argument("inference chunk size must be positive");
  o.policy.validate();
}

NoiseSource draw_noise(const InferenceOptions& o, std::size_t k) {
  return o.mode == SamplingMode::mean_only ? NoiseSource::zeros() : NoiseSource(o.seed, k);
}

}  // namespace

Prediction predict(Network& net, const Tensor& segment, const InferenceOptions& options) {
  check_options(options);
  const std::size_t len = net.config().input_length;
  if (segment.size() != len || segment.rank() > 3 || segment.dim(segment.rank() - 1) != len)
    throw ShapeError("predict: expected one segment of length " + std::to_string(len) + ", got " +
                     shape_str(segment.shape()));
  const Tensor x = segment.reshaped(Shape{1, 1, len});
  std::vector<ProbPair> draws;
  draws.reserve(options.draws);
  for (std::size_t k = 0; k < options.draws; ++k)
    draws.push_back(softmax_rows(net.logits(x, options.mode, draw_noise(options, k)))[0]);
  auto p = summarize_draws(draws, options.keep_draws);
  p.accepted = options.policy.accepts(p.u_scalar);
  return p;
}

std::vector<Prediction> predict_batch(Network& net, const std::vector<Segment>& segments,
                                      const InferenceOptions& options) {
  check_options(options);
  const std::size_t n = segments.size();
  std::vector<std::vector<ProbPair>> draws(n);
  for (auto& d : draws) d.reserve(options.draws);
  for (std::size_t start = 0; start < n; start += options.chunk) {
    const std::size_t stop = std::min(n, start + options.chunk);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const Tensor x = make_batch(segments, idx);
    for (std::size_t k = 0; k < options.draws; ++k) {
      const auto probs = softmax_rows(net.logits(x, options.mode, draw_noise(options, k)));
      for (std::size_t i = 0; i < idx.size(); ++i) draws[start + i].push_back(probs[i]);
    }
  }
  std::vector<Prediction> out;
  out.reserve(n);
  for (auto& d : draws) {
    out.push_back(summarize_draws(d, options.keep_draws));
    out.back().accepted = options.policy.accepts(out.back().u_scalar);
  }
  return out;
}

ThresholdSplit apply_threshold(std::span<const Prediction> preds, const ThresholdPolicy& policy) {
  policy.validate();
  ThresholdSplit split;
  for (std::size_t i = 0; i < preds.size(); ++i)
    (policy.accepts(preds[i].u_scalar) ? split.accepted : split.abstained).push_back(i);
  return split;
}

std::string prediction_json(const std::string& segment_id, const Prediction& p) {
  nlohmann::ordered_json j;
  j["segment_id"] = segment_id;
  j["p_af"] = p.p_mean[1];
  j["u_scalar"] = p.u_scalar;
  j["label"] = p.label;
  j["accepted"] = p.accepted;
  return j.dump();
}

}  // namespace bayesbeat
