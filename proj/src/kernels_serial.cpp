#include <cmath>
#include <string>
#include <vector>

#include "bayesbeat/kernels.hpp"
#include "bayesbeat/tensor.hpp"

namespace bayesbeat::kernels {

void Conv1dGeometry::validate() const {
  if (batch == 0 || in_channels == 0 || length == 0 || out_channels == 0 || kernel == 0)
    throw ShapeError("conv1d: all dimensions must be positive");
  if (stride == 0) throw ShapeError("conv1d: stride must be >= 1");
  if (kernel > length + 2 * padding)
    throw ShapeError("conv1d: kernel size " + std::to_string(kernel) + " exceeds padded length " +
                     std::to_string(length + 2 * padding));
}

void PoolGeometry::validate() const {
  if (rows == 0 || length == 0 || window == 0 || stride == 0)
    throw ShapeError("maxpool1d: all dimensions must be positive");
  if (window > length)
    throw ShapeError("maxpool1d: window " + std::to_string(window) + " exceeds length " + std::to_string(length));
}

namespace serial {

template <class T>
void conv1d_forward(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y) {
  const std::size_t lout = g.out_length();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t t = 0; t < lout; ++t) {
        double acc = bias.empty() ? 0.0 : static_cast<double>(bias[co]);
        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
          for (std::size_t k = 0; k < g.kernel; ++k) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(g.length)) continue;
            acc += static_cast<double>(w[(co * g.in_channels + ci) * g.kernel + k]) *
                   static_cast<double>(x[(b * g.in_channels + ci) * g.length + pos]);
          }
        y[(b * g.out_channels + co) * lout + t] = static_cast<T>(acc);
      }
}

template <class T>
void conv1d_backward_input(const Conv1dGeometry& g, std::span<const T> w, std::span<const T> gy, std::span<T> gx) {
  const std::size_t lout = g.out_length();
  std::vector<double> acc(g.input_size(), 0.0);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      for (std::size_t t = 0; t < lout; ++t) {
        const double grad = gy[(b * g.out_channels + co) * lout + t];
        for (std::size_t ci = 0; ci < g.in_channels; ++ci)
          for (std::size_t k = 0; k < g.kernel; ++k) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(g.length)) continue;
            acc[(b * g.in_channels + ci) * g.length + pos] +=
                grad * static_cast<double>(w[(co * g.in_channels + ci) * g.kernel + k]);
          }
      }
  for (std::size_t i = 0; i < acc.size(); ++i) gx[i] = static_cast<T>(acc[i]);
}

template <class T>
void conv1d_backward_params(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> gy, std::span<T> gw,
                            std::span<T> gbias) {
  const std::size_t lout = g.out_length();
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
      for (std::size_t k = 0; k < g.kernel; ++k) {
        double acc = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t t = 0; t < lout; ++t) {
            const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * g.stride + k) -
                                       static_cast<std::ptrdiff_t>(g.padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(g.length)) continue;
            acc += static_cast<double>(gy[(b * g.out_channels + co) * lout + t]) *
                   static_cast<double>(x[(b * g.in_channels + ci) * g.length + pos]);
          }
        gw[(co * g.in_channels + ci) * g.kernel + k] = static_cast<T>(acc);
      }
    if (!gbias.empty()) {
      double acc = 0.0;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t t = 0; t < lout; ++t) acc += gy[(b * g.out_channels + co) * lout + t];
      gbias[co] = static_cast<T>(acc);
    }
  }
}

template <class T>
void maxpool1d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y, std::span<std::uint32_t> argmax) {
  const std::size_t lout = g.out_length();
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t t = 0; t < lout; ++t) {
      std::size_t best = t * g.stride;
      for (std::size_t j = best + 1; j < t * g.stride + g.window; ++j)
        if (x[r * g.length + j] > x[r * g.length + best]) best = j;
      y[r * lout + t] = x[r * g.length + best];
      argmax[r * lout + t] = static_cast<std::uint32_t>(best);
    }
}

template <class T>
void maxpool1d_backward(const PoolGeometry& g, std::span<const std::uint32_t> argmax, std::span<const T> gy,
                        std::span<T> gx) {
  const std::size_t lout = g.out_length();
  for (auto& v : gx) v = T{0};
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t t = 0; t < lout; ++t) gx[r * g.length + argmax[r * lout + t]] += gy[r * lout + t];
}

template <class T>
void batchnorm_forward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, double eps, std::span<T> y, std::span<double> mean,
                             std::span<double> var) {
  const double n = static_cast<double>(g.batch * g.length);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.length; ++t) sum += x[(b * g.channels + c) * g.length + t];
    const double m = sum / n;
    double sq = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.length; ++t) {
        const double d = x[(b * g.channels + c) * g.length + t] - m;
        sq += d * d;
      }
    const double v = sq / n;
    mean[c] = m;
    var[c] = v;
    const double inv = 1.0 / std::sqrt(v + eps);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.length; ++t) {
        const std::size_t i = (b * g.channels + c) * g.length + t;
        y[i] = static_cast<T>(gamma[c] * ((x[i] - m) * inv) + beta[c]);
      }
  }
}

template <class T>
void batchnorm_forward_eval(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                            std::span<const T> beta, std::span<const T> running_mean, std::span<const T> running_var,
                            double eps, std::span<T> y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
      for (std::size_t t = 0; t < g.length; ++t) {
        const std::size_t i = (b * g.channels + c) * g.length + t;
        y[i] = static_cast<T>(gamma[c] * ((x[i] - static_cast<double>(running_mean[c])) * inv) + beta[c]);
      }
    }
}

template <class T>
void batchnorm_backward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                              std::span<const double> mean, std::span<const double> var, double eps,
                              std::span<const T> gy, std::span<T> gx, std::span<T> ggamma, std::span<T> gbeta) {
  const double n = static_cast<double>(g.batch * g.length);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.length; ++t) {
        const std::size_t i = (b * g.channels + c) * g.length + t;
        const double xhat = (x[i] - mean[c]) * inv;
        sum_g += gy[i];
        sum_gx += gy[i] * xhat;
      }
    ggamma[c] = static_cast<T>(sum_gx);
    gbeta[c] = static_cast<T>(sum_g);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < g.length; ++t) {
        const std::size_t i = (b * g.channels + c) * g.length + t;
        const double xhat = (x[i] - mean[c]) * inv;
        gx[i] = static_cast<T>(gamma[c] * inv * (gy[i] - sum_g / n - xhat * sum_gx / n));
      }
  }
}

template <class T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x, std::span<const T> w,
                   std::span<const T> bias, std::span<T> y) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias.empty() ? 0.0 : static_cast<double>(bias[o]);
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(w[o * in + i]) * x[b * in + i];
      y[b * out + o] = static_cast<T>(acc);
    }
}

template <class T>
void dense_backward_input(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> w,
                          std::span<const T> gy, std::span<T> gx) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) acc += static_cast<double>(w[o * in + i]) * gy[b * out + o];
      gx[b * in + i] = static_cast<T>(acc);
    }
}

template <class T>
void dense_backward_params(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x,
                           std::span<const T> gy, std::span<T> gw, std::span<T> gbias) {
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) acc += static_cast<double>(gy[b * out + o]) * x[b * in + i];
      gw[o * in + i] = static_cast<T>(acc);
    }
    if (!gbias.empty()) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) acc += gy[b * out + o];
      gbias[o] = static_cast<T>(acc);
    }
  }
}

#include "kernel_instances.inc"

}  // namespace serial
}  // namespace bayesbeat::kernels
