#include "bayesbeat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "bayesbeat/kvconfig.hpp"

namespace bayesbeat {

template <class T>
void adam_step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads, AdamState& state,
               const AdamConfig& config) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters vs " + std::to_string(grads.size()) +
                     " gradients");
  if (state.step == 0) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->size(), 0.0);
      state.v[i].assign(params[i]->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(grads[i].shape(), params[i]->shape(), "adam_step gradient " + std::to_string(i));
    if (state.m[i].size() != params[i]->size())
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " changed size");
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->ptr();
    const T* g = grads[i].ptr();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const std::size_t n = params[i]->size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] = static_cast<T>(p[j] - config.learning_rate * mhat / (std::sqrt(vhat) + config.eps));
    }
  }
}

template void adam_step<float>(std::span<BasicTensor<float>* const>, std::span<const BasicTensor<float>>, AdamState&,
                               const AdamConfig&);
template void adam_step<double>(std::span<BasicTensor<double>* const>, std::span<const BasicTensor<double>>,
                                AdamState&, const AdamConfig&);

double lambda_schedule(std::size_t i, std::size_t m, double scale) {
  if (m == 0 || i < 1 || i > m)
    throw std::out_of_range("lambda_schedule: minibatch index " + std::to_string(i) + " outside [1, " +
                            std::to_string(m) + "]");
  if (m <= 40)
    return std::ldexp(1.0, static_cast<int>(m - i)) / (std::ldexp(1.0, static_cast<int>(m)) - 1.0) * scale;
  // 2^(M-i) / (2^M - 1) = 2^-i / (1 - 2^-M), evaluated in log space.
  const double log_ratio = -static_cast<double>(i) * std::numbers::ln2 -
                           std::log1p(-std::ldexp(1.0, -static_cast<int>(std::min<std::size_t>(m, 1100))));
  return std::exp(log_ratio) * scale;
}

template <class T>
MinibatchCost<T> minibatch_cost(BasicNetwork<T>& net, const std::vector<BasicVar<T>>& bound, BasicVar<T> batch,
                                std::span<const int> labels, double lambda, std::span<const NoiseSource> draws,
                                SamplingMode mode) {
  if (draws.empty()) throw std::invalid_argument("minibatch_cost needs at least one draw");
  MinibatchCost<T> out{};
  std::optional<BasicVar<T>> total;
  for (const auto& noise : draws) {
    auto fwd = net.forward(bound, batch, mode, noise, NormMode::train);
    auto nll = ops::softmax_nll(fwd.logits, labels);
    auto term = ops::add(ops::scale(fwd.kl, lambda), nll.loss);
    total = total ? ops::add(*total, term) : term;
    out.likelihood += nll.loss.value().item();
    out.prior += lambda * static_cast<double>(fwd.kl.value().item());
  }
  out.cost = *total;
  return out;
}

template MinibatchCost<float> minibatch_cost(BasicNetwork<float>&, const std::vector<BasicVar<float>>&,
                                             BasicVar<float>, std::span<const int>, double,
                                             std::span<const NoiseSource>, SamplingMode);
template MinibatchCost<double> minibatch_cost(BasicNetwork<double>&, const std::vector<BasicVar<double>>&,
                                              BasicVar<double>, std::span<const int>, double,
                                              std::span<const NoiseSource>, SamplingMode);

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (batch_size < 2) fail("batch_size must be >= 2 (batchnorm needs batch statistics)");
  if (epochs == 0) fail("epochs must be positive");
  if (mc_draws == 0) fail("mc_draws must be >= 1");
  if (!(kl_scale >= 0.0) || !std::isfinite(kl_scale)) fail("kl_scale must be finite and >= 0");
  if (mode == SamplingMode::mean_only) fail("training needs a stochastic mode (weight-sample or local-reparam)");
  if (!(adam.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    fail("Adam betas must be in [0, 1)");
  if (!(adam.eps > 0.0)) fail("adam_eps must be positive");
  if (eval_chunk == 0) fail("eval_chunk must be positive");
}

void TrainConfig::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "batch_size") batch_size = parse_size(v, k);
    else if (k == "epochs") epochs = parse_size(v, k);
    else if (k == "mc_draws") mc_draws = parse_size(v, k);
    else if (k == "kl_scale") kl_scale = parse_double(v, k);
    else if (k == "mode") mode = parse_sampling_mode(trim(v));
    else if (k == "seed") seed = parse_u64(v, k);
    else if (k == "learning_rate") adam.learning_rate = parse_double(v, k);
    else if (k == "beta1") adam.beta1 = parse_double(v, k);
    else if (k == "beta2") adam.beta2 = parse_double(v, k);
    else if (k == "adam_eps") adam.eps = parse_double(v, k);
    else if (k == "eval_chunk") eval_chunk = parse_size(v, k);
    else if (k == "bn_recalibration") bn_recalibration = parse_size(v, k);
    else throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "batch_size=" << batch_size << "\nepochs=" << epochs << "\nmc_draws=" << mc_draws
     << "\nkl_scale=" << format_double(kl_scale) << "\nmode=" << to_string(mode) << "\nseed=" << seed
     << "\nlearning_rate=" << format_double(adam.learning_rate) << "\nbeta1=" << format_double(adam.beta1)
     << "\nbeta2=" << format_double(adam.beta2) << "\nadam_eps=" << format_double(adam.eps)
     << "\neval_chunk=" << eval_chunk << "\nbn_recalibration=" << bn_recalibration << '\n';
  return os.str();
}

std::string EpochReport::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["minibatches"] = minibatches;
  j["likelihood"] = likelihood;
  j["prior"] = prior;
  j["val_f1"] = validation.f1;
  j["validation"] = nlohmann::ordered_json::parse(validation.to_json());
  j["best"] = best;
  j["seconds"] = seconds;
  return j.dump();
}

void recalibrate_batchnorm(Network& net, const std::vector<Segment>& segments, std::size_t batch_size) {
  auto& states = net.norm_states();
  if (states.empty()) return;
  if (batch_size < 2) throw std::invalid_argument("recalibrate_batchnorm: batch_size must be >= 2");
  std::size_t n = segments.size();
  if (n % batch_size == 1) --n;
  if (n < 2) throw DataError("recalibrate_batchnorm: need at least 2 segments");

  std::vector<std::vector<double>> mean_sum(states.size()), var_sum(states.size());
  for (std::size_t l = 0; l < states.size(); ++l) {
    mean_sum[l].assign(states[l].running_mean.size(), 0.0);
    var_sum[l].assign(states[l].running_var.size(), 0.0);
    // Momentum 1 leaves exactly the last batch's statistics in the state.
    states[l].momentum = 1.0;
  }
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += batch_size, ++batches) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape tape(false);
    net.forward(net.bind(tape, false), tape.constant(make_batch(segments, idx)), SamplingMode::mean_only,
                NoiseSource::zeros(), NormMode::train);
    for (std::size_t l = 0; l < states.size(); ++l)
      for (std::size_t c = 0; c < mean_sum[l].size(); ++c) {
        mean_sum[l][c] += states[l].running_mean[c];
        var_sum[l][c] += states[l].running_var[c];
      }
  }
  for (std::size_t l = 0; l < states.size(); ++l) {
    states[l].momentum = net.config().bn_momentum;
    for (std::size_t c = 0; c < mean_sum[l].size(); ++c) {
      states[l].running_mean[c] = static_cast<float>(mean_sum[l][c] / static_cast<double>(batches));
      states[l].running_var[c] = static_cast<float>(var_sum[l][c] / static_cast<double>(batches));
    }
  }
}

MetricsReport evaluate_mean(Network& net, const std::vector<Segment>& segments, std::size_t chunk) {
  if (segments.empty()) throw DataError("evaluation set is empty");
  std::vector<int> predicted, labels;
  std::vector<double> scores;
  for (std::size_t start = 0; start < segments.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, segments.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto probs = softmax_rows(net.logits(make_batch(segments, idx), SamplingMode::mean_only, NoiseSource::zeros()));
    const auto y = batch_labels(segments, idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      predicted.push_back(probs[i][1] > probs[i][0] ? 1 : 0);
      scores.push_back(probs[i][1]);
      labels.push_back(y[i]);
    }
  }
  return compute_metrics(compute_counts(predicted, labels), scores, labels);
}

namespace {

// Minibatch boundaries; a trailing batch of one sample is merged into its
// predecessor because batch statistics need two samples.
std::vector<std::size_t> batch_bounds(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> bounds{0};
  while (bounds.back() < n) bounds.push_back(std::min(n, bounds.back() + batch));
  if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1)
    bounds.erase(bounds.end() - 2);
  return bounds;
}

}  // namespace

TrainResult train(Network& net, const std::vector<Segment>& train_set, const std::vector<Segment>& val_set,
                  const TrainConfig& config, const std::function<void(const EpochReport&)>& on_epoch) {
  config.validate();
  if (train_set.size() < 2) throw DataError("training set needs at least 2 segments");
  if (val_set.empty()) throw DataError("validation set is empty");
  require_disjoint_subjects(train_set, val_set, "train/validation split");
  std::vector<std::size_t> all(train_set.size());
  std::iota(all.begin(), all.end(), 0);
  batch_labels(train_set, all);

  const auto bounds = batch_bounds(train_set.size(), config.batch_size);
  const std::size_t m = bounds.size() - 1;

  AdamState adam;
  TrainResult result{net, 0, -1.0, {}};
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = all;
    Engine shuffle_rng(stream_seed(config.seed, 0x7A11, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochReport report;
    report.epoch = epoch;
    report.minibatches = m;
    for (std::size_t i = 1; i <= m; ++i) {
      const std::span<const std::size_t> idx(order.data() + bounds[i - 1], bounds[i] - bounds[i - 1]);
      const auto labels = batch_labels(train_set, idx);
      std::vector<NoiseSource> draws;
      const std::uint64_t step_seed = stream_seed(config.seed, 0x7A12, epoch, i);
      for (std::size_t k = 0; k < config.mc_draws; ++k) draws.emplace_back(step_seed, k);

      Tape tape;
      const auto bound = net.bind(tape, true);
      const auto x = tape.constant(make_batch(train_set, idx));
      const double lambda = lambda_schedule(i, m, config.kl_scale);
      const auto cost = minibatch_cost(net, bound, x, labels, lambda, draws, config.mode);
      if (!std::isfinite(cost.cost.value().item()))
        throw NumericError("non-finite training cost at epoch " + std::to_string(epoch) + ", minibatch " +
                           std::to_string(i));
      tape.backward(cost.cost);

      std::vector<Tensor*> params;
      std::vector<Tensor> grads;
      for (std::size_t p = 0; p < bound.size(); ++p) {
        params.push_back(&net.params()[p].value);
        grads.push_back(tape.grad(bound[p]));
      }
      adam_step<float>(params, grads, adam, config.adam);
      report.likelihood += cost.likelihood;
      report.prior += cost.prior;
    }
    report.likelihood /= static_cast<double>(m);
    report.prior /= static_cast<double>(m);
    if (config.bn_recalibration > 0) {
      std::vector<std::size_t> pick = all;
      Engine pick_rng(stream_seed(config.seed, 0x7A13, epoch));
      std::shuffle(pick.begin(), pick.end(), pick_rng);
      pick.resize(std::min(pick.size(), config.bn_recalibration));
      std::vector<Segment> subset;
      subset.reserve(pick.size());
      for (std::size_t k : pick) subset.push_back(train_set[k]);
      recalibrate_batchnorm(net, subset, config.batch_size);
    }
    report.validation = evaluate_mean(net, val_set, config.eval_chunk);
    if (report.validation.f1 > result.best_val_f1) {
      report.best = true;
      result.best = net;
      result.best_epoch = epoch;
      result.best_val_f1 = report.validation.f1;
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.reports.push_back(report);
    if (on_epoch) on_epoch(report);
  }
  return result;
}

}  // namespace bayesbeat
