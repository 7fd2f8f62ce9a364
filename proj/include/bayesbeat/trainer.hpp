#pragma once

// Minibatch Bayes-by-backprop training with Adam and validation-based model
// selection.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bayesbeat/dataio.hpp"
#include "bayesbeat/metrics.hpp"
#include "bayesbeat/network.hpp"

namespace bayesbeat {

/// Raised when the training loss stops being finite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update of every tensor in `params` (in place), with
/// moments kept in double. The state is sized on the first step; a later
/// shape change throws ShapeError.
template <class T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, AdamState& state,
               const AdamConfig& config);

/// KL weight of minibatch i (1-based) out of M: 2^(M-i) / (2^M - 1) * scale.
double lambda_schedule(std::size_t i, std::size_t m, double scale);

template <class T>
struct MinibatchCost {
  BasicVar<T> cost;          // sum over draws of lambda * prior term + likelihood term
  double likelihood = 0;     // sum over draws of the mean batch NLL
  double prior = 0;          // sum over draws of lambda * prior term
};

/// One draw per entry of `draws`; train-mode batchnorm.
template <class T>
MinibatchCost<T> minibatch_cost(BasicNetwork<T>& net, const std::vector<BasicVar<T>>& bound, BasicVar<T> batch,
                                std::span<const int> labels, double lambda, std::span<const NoiseSource> draws,
                                SamplingMode mode);

struct TrainConfig {
  std::size_t batch_size = 512;
  std::size_t epochs = 50;
  std::size_t mc_draws = 1;
  double kl_scale = 1e-5;
  SamplingMode mode = SamplingMode::local_reparam;
  std::uint64_t seed = 1;
  AdamConfig adam;
  std::size_t eval_chunk = 256;
  /// Training segments used to re-estimate batchnorm running statistics after
  /// each epoch (0 keeps the momentum averages from the minibatch passes).
  std::size_t bn_recalibration = 1024;

  void validate() const;
  /// Keys: batch_size, epochs, mc_draws, kl_scale, mode, seed, learning_rate,
  /// beta1, beta2, adam_eps, eval_chunk, bn_recalibration. Unknown keys throw.
  void apply(const std::map<std::string, std::string>& kv);
  std::string to_text() const;
};

struct EpochReport {
  std::size_t epoch = 0;        // 1-based
  std::size_t minibatches = 0;
  double likelihood = 0;        // mean per minibatch of the likelihood term
  double prior = 0;             // mean per minibatch of the weighted prior term
  MetricsReport validation;     // mean-weight predictions, no threshold
  bool best = false;
  double seconds = 0;

  std::string to_json() const;
};

struct TrainResult {
  Network best;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0;
  std::vector<EpochReport> reports;
};

/// Replaces every batchnorm layer's running statistics with the average of
/// its batch statistics over mean-weight passes on `segments` (batches of
/// `batch_size`, a trailing single segment dropped).
void recalibrate_batchnorm(Network& net, const std::vector<Segment>& segments, std::size_t batch_size);

/// Validation F1 uses mean-weight, eval-mode predictions (argmax, tie -> 0).
MetricsReport evaluate_mean(Network& net, const std::vector<Segment>& segments, std::size_t chunk = 256);

/// Trains `net` in place; returns a copy of the best epoch's network (highest
/// validation F1, ties to the earlier epoch). Throws DataError on empty or
/// subject-overlapping sets, NumericError on a non-finite loss.
TrainResult train(Network& net, const std::vector<Segment>& train_set, const std::vector<Segment>& val_set,
                  const TrainConfig& config, const std::function<void(const EpochReport&)>& on_epoch = {});

}  // namespace bayesbeat
