#include "bayesbeat/bayes.hpp"

#include <cmath>
#include <stdexcept>

namespace bayesbeat {

std::string to_string(SamplingMode mode) {
  switch (mode) {
    case SamplingMode::weight_sample: return "weight-sample";
    case SamplingMode::local_reparam: return "local-reparam";
    case SamplingMode::mean_only: return "mean-only";
  }
  return "unknown";
}

SamplingMode parse_sampling_mode(std::string_view text) {
  if (text == "weight-sample") return SamplingMode::weight_sample;
  if (text == "local-reparam") return SamplingMode::local_reparam;
  if (text == "mean-only") return SamplingMode::mean_only;
  throw std::invalid_argument("unknown sampling mode '" + std::string(text) +
                              "' (expected weight-sample, local-reparam or mean-only)");
}

template <class T>
BasicVariationalTensor<T>::BasicVariationalTensor(BasicTensor<T> mean, BasicTensor<T> scale)
    : mu(std::move(mean)), rho(std::move(scale)) {
  require_shape(rho.shape(), mu.shape(), "variational tensor rho");
}

template <class T>
BasicTensor<T> BasicVariationalTensor<T>::sigma() const {
  BasicTensor<T> s(rho.shape());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<T>(ops::softplus(rho[i]));
  return s;
}

void PriorSpec::validate() const {
  if (mean != 0.0 || stddev != 1.0) throw std::invalid_argument("only the standard-normal prior N(0, I) is supported");
}

NoiseSource NoiseSource::zeros() {
  NoiseSource s;
  s.zero_ = true;
  return s;
}

template <class T>
BasicTensor<T> NoiseSource::normal(const Shape& shape, std::uint64_t stream) const {
  BasicTensor<T> out(shape, T{0});
  if (zero_) return out;
  const std::size_t rows = shape.empty() ? 1 : shape[0];
  const std::size_t width = out.size() / rows;
  T* base = out.ptr();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r)
    fill_normal<T>(std::span<T>(base + r * width, width), stream_seed(seed_, draw_, stream, r));
  return out;
}

template BasicTensor<float> NoiseSource::normal<float>(const Shape&, std::uint64_t) const;
template BasicTensor<double> NoiseSource::normal<double>(const Shape&, std::uint64_t) const;

template <class T>
BasicTensor<T> sample_weights(const BasicVariationalTensor<T>& vt, const BasicNoiseDraw<T>& noise) {
  require_shape(noise.eps.shape(), vt.shape(), "sample_weights eps");
  BasicTensor<T> w(vt.shape());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<T>(vt.mu[i] + ops::softplus(vt.rho[i]) * noise.eps[i]);
  return w;
}

template <class T>
double kl_mc_terms(const BasicVariationalTensor<T>& vt, const BasicTensor<T>& w, const PriorSpec& prior) {
  prior.validate();
  require_shape(w.shape(), vt.shape(), "kl_mc_terms w");
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double sigma = ops::softplus(vt.rho[i]);
    const double z = (static_cast<double>(w[i]) - vt.mu[i]) / sigma;
    total += -std::log(sigma) - 0.5 * z * z + 0.5 * static_cast<double>(w[i]) * w[i];
  }
  return total;
}

template <class T>
double kl_closed_form(const BasicVariationalTensor<T>& vt, const PriorSpec& prior) {
  prior.validate();
  double total = 0.0;
  for (std::size_t i = 0; i < vt.mu.size(); ++i) {
    const double sigma = ops::softplus(vt.rho[i]);
    total += 0.5 * (static_cast<double>(vt.mu[i]) * vt.mu[i] + sigma * sigma - 1.0 - 2.0 * std::log(sigma));
  }
  return total;
}

namespace {

template <class T>
std::optional<BasicVar<T>> add_opt(std::optional<BasicVar<T>> acc, BasicVar<T> term) {
  if (!acc) return term;
  return ops::add(*acc, term);
}

// Noise streams per layer: weights, bias, activations.
constexpr std::uint64_t kStreamsPerLayer = 4;

template <class T, class Affine>
LayerOutput<T> variational_forward(const VariationalVars<T>& p, BasicVar<T> x, const NoiseSource& noise,
                                   const VariationalLayerOptions& opt, Affine affine) {
  const std::uint64_t base = opt.stream * kStreamsPerLayer;
  switch (opt.mode) {
    case SamplingMode::mean_only:
      return {affine(x, p.w_mu, p.b_mu), std::nullopt};

    case SamplingMode::weight_sample: {
      const auto eps_w = noise.normal<T>(p.w_mu.shape(), base + 0);
      const auto w = ops::sample_weights(p.w_mu, p.w_rho, eps_w);
      std::optional<BasicVar<T>> kl = ops::kl_mc(p.w_mu, p.w_rho, w);
      BasicVar<T> b = p.b_mu;
      if (p.b_rho) {
        const auto eps_b = noise.normal<T>(p.b_mu.shape(), base + 1);
        b = ops::sample_weights(p.b_mu, *p.b_rho, eps_b);
        kl = add_opt(kl, ops::kl_mc(p.b_mu, *p.b_rho, b));
      }
      return {affine(x, w, b), kl};
    }

    case SamplingMode::local_reparam: {
      const auto mean = affine(x, p.w_mu, p.b_mu);
      const auto var_w = ops::softplus_squared(p.w_rho);
      std::optional<BasicVar<T>> var_b;
      if (p.b_rho) var_b = ops::softplus_squared(*p.b_rho);
      const auto var = affine(ops::square(x), var_w, var_b);
      const auto eps = noise.normal<T>(mean.shape(), base + 2);
      std::optional<BasicVar<T>> kl = ops::kl_closed(p.w_mu, p.w_rho);
      if (p.b_rho) kl = add_opt(kl, ops::kl_closed(p.b_mu, *p.b_rho));
      return {ops::reparam_activation(mean, var, eps, opt.variance_floor), kl};
    }
  }
  throw std::logic_error("unhandled sampling mode");
}

}  // namespace

template <class T>
LayerOutput<T> bayes_conv1d_forward(const VariationalVars<T>& p, BasicVar<T> x, std::size_t padding,
                                    const NoiseSource& noise, const VariationalLayerOptions& options) {
  return variational_forward<T>(p, x, noise, options,
                                [padding](BasicVar<T> in, BasicVar<T> w, std::optional<BasicVar<T>> b) {
                                  return ops::conv1d(in, w, b, 1, padding);
                                });
}

template <class T>
LayerOutput<T> bayes_dense_forward(const VariationalVars<T>& p, BasicVar<T> x, const NoiseSource& noise,
                                   const VariationalLayerOptions& options) {
  return variational_forward<T>(p, x, noise, options,
                                [](BasicVar<T> in, BasicVar<T> w, std::optional<BasicVar<T>> b) {
                                  return ops::dense(in, w, b);
                                });
}

template <class T>
BasicBayesLayer<T> BasicBayesLayer<T>::init(const Shape& weight_shape, bool variational_bias, double rho_init,
                                            std::uint64_t seed) {
  if (weight_shape.size() < 2) throw ShapeError("variational layer weight needs rank >= 2, got " + shape_str(weight_shape));
  const std::size_t fan_in = shape_numel(weight_shape) / weight_shape[0];
  BasicBayesLayer layer;
  BasicTensor<T> mu(weight_shape);
  Engine engine(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  for (auto& v : mu.data()) v = static_cast<T>(normal(engine));
  layer.weight = BasicVariationalTensor<T>(std::move(mu), BasicTensor<T>(weight_shape, static_cast<T>(rho_init)));
  layer.bias = BasicVariationalTensor<T>(BasicTensor<T>(Shape{weight_shape[0]}, T{0}),
                                         BasicTensor<T>(Shape{weight_shape[0]}, static_cast<T>(rho_init)));
  layer.variational_bias = variational_bias;
  return layer;
}

template <class T>
VariationalVars<T> BasicBayesLayer<T>::bind(BasicTape<T>& tape, bool trainable) const {
  auto make = [&](const BasicTensor<T>& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  VariationalVars<T> v{make(weight.mu), make(weight.rho), make(bias.mu), std::nullopt};
  if (variational_bias) v.b_rho = make(bias.rho);
  return v;
}

#define BAYESBEAT_BAYES_INSTANTIATE(T)                                                                          \
  template struct BasicVariationalTensor<T>;                                                                    \
  template struct BasicBayesLayer<T>;                                                                           \
  template BasicTensor<T> sample_weights(const BasicVariationalTensor<T>&, const BasicNoiseDraw<T>&);           \
  template double kl_mc_terms(const BasicVariationalTensor<T>&, const BasicTensor<T>&, const PriorSpec&);       \
  template double kl_closed_form(const BasicVariationalTensor<T>&, const PriorSpec&);                           \
  template LayerOutput<T> bayes_conv1d_forward(const VariationalVars<T>&, BasicVar<T>, std::size_t,             \
                                               const NoiseSource&, const VariationalLayerOptions&);             \
  template LayerOutput<T> bayes_dense_forward(const VariationalVars<T>&, BasicVar<T>, const NoiseSource&,       \
                                              const VariationalLayerOptions&);

BAYESBEAT_BAYES_INSTANTIATE(float)
BAYESBEAT_BAYES_INSTANTIATE(double)

}  // namespace bayesbeat
