#pragma once

// Differentiable primitives recorded on a BasicTape. Every op validates its
// operand shapes and throws ShapeError naming the offending dimension.

#include <optional>
#include <span>

#include "bayesbeat/tape.hpp"

namespace bayesbeat {

enum class NormMode { train, eval };

/// Running statistics of one batch-norm layer (deterministic buffers, not
/// trained by gradient descent).
template <class T>
struct BatchNormState {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

template <class T>
struct NllResult {
  BasicVar<T> loss;           // mean over the batch
  BasicTensor<T> probabilities;  // softmax(logits), [B, classes]
};

namespace ops {

/// Overflow-safe log(1 + exp(x)) and its derivative.
double softplus(double x);
double logistic(double x);

template <class T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b);
template <class T> BasicVar<T> scale(BasicVar<T> a, double factor);
template <class T> BasicVar<T> square(BasicVar<T> a);
template <class T> BasicVar<T> softplus(BasicVar<T> a);
/// softplus(a)^2, the variance of a weight with pre-softplus scale `a`.
template <class T> BasicVar<T> softplus_squared(BasicVar<T> a);
template <class T> BasicVar<T> sum(BasicVar<T> a);
template <class T> BasicVar<T> reshape(BasicVar<T> a, Shape shape);

/// x [B, C_in, L], w [C_out, C_in, K], bias [C_out] -> [B, C_out, L_out].
/// Cross-correlation (no kernel flip).
template <class T>
BasicVar<T> conv1d(BasicVar<T> x, BasicVar<T> w, std::optional<BasicVar<T>> bias, std::size_t stride,
                   std::size_t padding);

/// x [B, C, L] -> [B, C, L_out]; gradient routes to the first maximum.
template <class T>
BasicVar<T> maxpool1d(BasicVar<T> x, std::size_t window, std::size_t stride);

/// x [B, C, L]. Train mode normalises with batch statistics over (B, L) and
/// updates `state`; eval mode uses the running statistics.
template <class T>
BasicVar<T> batchnorm1d(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, BatchNormState<T>& state, NormMode mode);

/// Mean over the time axis: [B, C, L] -> [B, C].
template <class T> BasicVar<T> global_avg_pool(BasicVar<T> x);

/// x [B, F_in], w [F_out, F_in], bias [F_out] -> [B, F_out].
template <class T>
BasicVar<T> dense(BasicVar<T> x, BasicVar<T> w, std::optional<BasicVar<T>> bias);

/// Mean negative log-softmax of the labelled class. Labels in [0, classes).
template <class T>
NllResult<T> softmax_nll(BasicVar<T> logits, std::span<const int> labels);

/// w = mu + softplus(rho) * eps, eps held fixed.
template <class T>
BasicVar<T> sample_weights(BasicVar<T> mu, BasicVar<T> rho, const BasicTensor<T>& eps);

/// mean + sqrt(var + floor) * eps, eps held fixed (local reparameterisation).
template <class T>
BasicVar<T> reparam_activation(BasicVar<T> mean, BasicVar<T> var, const BasicTensor<T>& eps, double floor);

/// Sum over elements of log N(w; mu, sigma^2) - log N(w; 0, 1), sigma = softplus(rho).
template <class T>
BasicVar<T> kl_mc(BasicVar<T> mu, BasicVar<T> rho, BasicVar<T> w);

/// Sum over elements of KL(N(mu, sigma^2) || N(0, 1)).
template <class T>
BasicVar<T> kl_closed(BasicVar<T> mu, BasicVar<T> rho);

}  // namespace ops
}  // namespace bayesbeat
