#pragma once

// Variational layer primitives: factorised Gaussian posteriors over weights,
// weight-space sampling, local reparameterisation, and the KL cost terms.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "bayesbeat/ops.hpp"
#include "bayesbeat/rng.hpp"

namespace bayesbeat {

enum class SamplingMode { weight_sample, local_reparam, mean_only };

std::string to_string(SamplingMode mode);
/// Accepts "weight-sample", "local-reparam", "mean-only".
SamplingMode parse_sampling_mode(std::string_view text);

/// Posterior means `mu` and pre-softplus scales `rho`; sigma = softplus(rho)
/// is always derived, never stored.
template <class T>
struct BasicVariationalTensor {
  BasicTensor<T> mu;
  BasicTensor<T> rho;

  BasicVariationalTensor() = default;
  BasicVariationalTensor(BasicTensor<T> mean, BasicTensor<T> scale);

  const Shape& shape() const { return mu.shape(); }
  BasicTensor<T> sigma() const;
};

using VariationalTensor = BasicVariationalTensor<float>;

/// The weight prior. Only the standard normal N(0, I) is supported.
struct PriorSpec {
  double mean = 0.0;
  double stddev = 1.0;

  static PriorSpec standard_normal() { return {}; }
  void validate() const;
};

/// Source of the standard-normal draws used by one stochastic forward pass.
/// Samples are a pure function of (seed, draw, stream, row), so the same
/// draw can be replayed exactly and rows can be generated in parallel.
class NoiseSource {
 public:
  NoiseSource(std::uint64_t seed, std::uint64_t draw) : seed_(seed), draw_(draw) {}
  /// A source that yields exact zeros (stochastic passes collapse to the mean).
  static NoiseSource zeros();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draw() const { return draw_; }
  bool is_zero() const { return zero_; }

  template <class T>
  BasicTensor<T> normal(const Shape& shape, std::uint64_t stream) const;

 private:
  NoiseSource() = default;
  std::uint64_t seed_ = 0;
  std::uint64_t draw_ = 0;
  bool zero_ = false;
};

/// eps with its provenance.
template <class T>
struct BasicNoiseDraw {
  BasicTensor<T> eps;
  std::uint64_t seed = 0;
  std::uint64_t draw = 0;
  std::uint64_t stream = 0;

  static BasicNoiseDraw make(const NoiseSource& source, const Shape& shape, std::uint64_t stream) {
    return {source.normal<T>(shape, stream), source.seed(), source.draw(), stream};
  }
};

using NoiseDraw = BasicNoiseDraw<float>;

/// w = mu + softplus(rho) * eps.
template <class T>
BasicTensor<T> sample_weights(const BasicVariationalTensor<T>& vt, const BasicNoiseDraw<T>& noise);

/// Sum over elements of log q(w | mu, sigma) - log P(w) for one draw.
template <class T>
double kl_mc_terms(const BasicVariationalTensor<T>& vt, const BasicTensor<T>& w, const PriorSpec& prior = {});

/// Sum over elements of 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2).
template <class T>
double kl_closed_form(const BasicVariationalTensor<T>& vt, const PriorSpec& prior = {});

/// Tape handles for the parameters of one variational layer.
template <class T>
struct VariationalVars {
  BasicVar<T> w_mu;
  BasicVar<T> w_rho;
  BasicVar<T> b_mu;
  std::optional<BasicVar<T>> b_rho;  // absent: the bias is a point estimate
};

template <class T>
struct LayerOutput {
  BasicVar<T> out;
  std::optional<BasicVar<T>> kl;  // this draw's prior term; absent in mean-only mode
};

struct VariationalLayerOptions {
  SamplingMode mode = SamplingMode::mean_only;
  double variance_floor = 1e-10;
  std::uint64_t stream = 0;  // distinguishes the layers of one network
};

/// Variational 1-D convolution, stride 1, zero padding `padding`.
///   weight-sample: conv1d(x, mu + sigma*eps)
///   local-reparam: conv1d(x, mu) + sqrt(conv1d(x^2, sigma^2) + floor) * eps, eps per output element
///   mean-only:     conv1d(x, mu)
template <class T>
LayerOutput<T> bayes_conv1d_forward(const VariationalVars<T>& p, BasicVar<T> x, std::size_t padding,
                                    const NoiseSource& noise, const VariationalLayerOptions& options);

/// Variational affine layer, same three modes.
template <class T>
LayerOutput<T> bayes_dense_forward(const VariationalVars<T>& p, BasicVar<T> x, const NoiseSource& noise,
                                   const VariationalLayerOptions& options);

/// A standalone variational layer (conv kernel [C_out, C_in, K] or dense
/// weight [F_out, F_in]) with its bias posterior.
template <class T>
struct BasicBayesLayer {
  BasicVariationalTensor<T> weight;
  BasicVariationalTensor<T> bias;
  bool variational_bias = true;

  /// mu ~ N(0, 1/fan_in), bias mu = 0, rho = rho_init everywhere.
  static BasicBayesLayer init(const Shape& weight_shape, bool variational_bias, double rho_init, std::uint64_t seed);

  VariationalVars<T> bind(BasicTape<T>& tape, bool trainable = true) const;
};

using BayesLayer = BasicBayesLayer<float>;

}  // namespace bayesbeat
