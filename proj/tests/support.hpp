#pragma once

// Independent reference computations and helpers shared by the tests. The
// oracles here are written directly from the defining formulas and do not
// call into the library's kernels.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "bayesbeat/ops.hpp"

namespace testing {

using bayesbeat::Shape;
using TensorD = bayesbeat::BasicTensor<double>;
using TensorF = bayesbeat::BasicTensor<float>;
using TapeD = bayesbeat::BasicTape<double>;
using VarD = bayesbeat::BasicVar<double>;

template <class T = double>
bayesbeat::BasicTensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> d(0.0, scale);
  bayesbeat::BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(d(eng));
  return t;
}

template <class T = double>
bayesbeat::BasicTensor<T> uniform_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  bayesbeat::BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(d(eng));
  return t;
}

/// Values spaced at least `gap` apart in random order (no near-ties, so
/// max-pooling stays differentiable under small perturbations).
inline TensorD separated_tensor(const Shape& shape, std::uint64_t seed, double gap = 0.05) {
  TensorD t(shape);
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<double>(i) - v.size() / 2.0) * gap;
  std::mt19937_64 eng(seed);
  std::shuffle(v.begin(), v.end(), eng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

// ---- forward oracles -----------------------------------------------------

/// x [B, Ci, L], w [Co, Ci, K] -> [B, Co, Lout], zero padding.
inline std::vector<double> conv1d_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                         const std::vector<double>& bias, std::size_t B, std::size_t Ci,
                                         std::size_t L, std::size_t Co, std::size_t K, std::size_t stride,
                                         std::size_t pad) {
  const std::size_t Lout = (L + 2 * pad - K) / stride + 1;
  std::vector<double> y(B * Co * Lout, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < Lout; ++t) {
        double s = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < Ci; ++c)
          for (std::size_t k = 0; k < K; ++k) {
            const long pos = static_cast<long>(t * stride + k) - static_cast<long>(pad);
            if (pos < 0 || pos >= static_cast<long>(L)) continue;
            s += w[(o * Ci + c) * K + k] * x[(b * Ci + c) * L + static_cast<std::size_t>(pos)];
          }
        y[(b * Co + o) * Lout + t] = s;
      }
  return y;
}

inline std::vector<double> maxpool_oracle(const std::vector<double>& x, std::size_t rows, std::size_t L,
                                          std::size_t window, std::size_t stride) {
  const std::size_t Lout = (L - window) / stride + 1;
  std::vector<double> y;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < Lout; ++t) {
      double m = -INFINITY;
      for (std::size_t j = 0; j < window; ++j) m = std::max(m, x[r * L + t * stride + j]);
      y.push_back(m);
    }
  return y;
}

/// Two-pass batch statistics per channel over (B, L).
inline std::vector<double> batchnorm_oracle(const std::vector<double>& x, const std::vector<double>& gamma,
                                            const std::vector<double>& beta, std::size_t B, std::size_t C,
                                            std::size_t L, double eps) {
  std::vector<double> y(x.size());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) mean += x[(b * C + c) * L + t];
    mean /= static_cast<double>(B * L);
    double var = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const double d = x[(b * C + c) * L + t] - mean;
        var += d * d;
      }
    var /= static_cast<double>(B * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (b * C + c) * L + t;
        y[i] = gamma[c] * (x[i] - mean) / std::sqrt(var + eps) + beta[c];
      }
  }
  return y;
}

inline std::vector<double> dense_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                        const std::vector<double>& bias, std::size_t B, std::size_t in,
                                        std::size_t out) {
  std::vector<double> y(B * out);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double s = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < in; ++i) s += w[o * in + i] * x[b * in + i];
      y[b * out + o] = s;
    }
  return y;
}

/// Mean over rows of -log softmax(logits)[label], via long double.
inline double nll_oracle(const std::vector<double>& logits, const std::vector<int>& labels, std::size_t classes) {
  long double total = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    long double z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<long double>(logits[b * classes + c]));
    total += std::log(z) - logits[b * classes + static_cast<std::size_t>(labels[b])];
  }
  return static_cast<double>(total / labels.size());
}

/// Log density of N(mu, sigma^2) at w.
inline double log_normal(double w, double mu, double sigma) {
  const double z = (w - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

/// Magnitude of the DFT of x at the bin nearest frequency f.
inline double dft_magnitude(const std::vector<double>& x, double f, double fs) {
  const double n = static_cast<double>(x.size());
  const double bin = std::round(f * n / fs);
  std::complex<double> acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    acc += x[i] * std::polar(1.0, -2.0 * std::numbers::pi * bin * static_cast<double>(i) / n);
  return std::abs(acc);
}

/// Probability a random positive outscores a random negative (ties 1/2), by
/// exhaustive pair counting.
inline double wilcoxon_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (labels[i] == 1 && labels[j] == 0) {
        pairs += 1;
        wins += scores[i] > scores[j] ? 1.0 : (scores[i] == scores[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

// ---- finite differences ----------------------------------------------------

struct GradCheckResult {
  std::size_t coords = 0;
  double max_rel_err = 0;
};

/// Scalar function of the leaves, recorded on the given tape.
using LossFn = std::function<VarD(TapeD&, const std::vector<VarD>&)>;

/// Compares reverse-mode gradients with central differences (step h, in
/// double) on `coords` randomly chosen coordinates spread over the inputs.
/// Relative error |a - n| / (|a| + 1e-8).
inline GradCheckResult check_gradients(const LossFn& loss, const std::vector<TensorD>& inputs, std::size_t coords,
                                       std::uint64_t seed, double h = 1e-3) {
  TapeD tape;
  std::vector<VarD> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t));
  tape.backward(loss(tape, leaves));
  std::vector<TensorD> grads;
  for (const auto& l : leaves) grads.push_back(tape.grad(l));

  auto eval = [&](const std::vector<TensorD>& xs) {
    TapeD t(false);
    std::vector<VarD> ls;
    for (const auto& x : xs) ls.push_back(t.constant(x));
    return loss(t, ls).value().item();
  };

  std::size_t total = 0;
  for (const auto& t : inputs) total += t.size();
  std::mt19937_64 eng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheckResult r;
  std::vector<TensorD> work = inputs;
  for (std::size_t n = 0; n < coords; ++n) {
    std::size_t flat = pick(eng), which = 0;
    while (flat >= inputs[which].size()) flat -= inputs[which++].size();
    const double orig = work[which][flat];
    work[which][flat] = orig + h;
    const double up = eval(work);
    work[which][flat] = orig - h;
    const double down = eval(work);
    work[which][flat] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grads[which][flat];
    r.max_rel_err = std::max(r.max_rel_err, std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8));
    ++r.coords;
  }
  return r;
}

/// sum(out * R) for a fixed random R, turning any tensor into a scalar loss
/// whose gradient reaches every element.
inline VarD weighted_sum(TapeD& tape, VarD out, std::uint64_t seed) {
  return bayesbeat::ops::sum(bayesbeat::ops::mul(out, tape.constant(random_tensor(out.shape(), seed))));
}

}  // namespace testing
