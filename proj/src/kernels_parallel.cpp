#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "bayesbeat/kernels.hpp"

namespace bayesbeat::kernels {

void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }
int num_threads() { return omp_get_max_threads(); }

namespace parallel {

namespace {

// y[t] += sum_k w[k] * x[t + k] for t < n. K fixed at compile time so the tap
// loop unrolls inside the vectorised t loop.
template <class T, std::size_t K>
inline void correlate_row(T* __restrict y, const T* __restrict x, const T* __restrict w, std::size_t n) {
  T taps[K];
  for (std::size_t k = 0; k < K; ++k) taps[k] = w[k];
#pragma omp simd
  for (std::size_t t = 0; t < n; ++t) {
    T acc = y[t];
    for (std::size_t k = 0; k < K; ++k) acc += taps[k] * x[t + k];
    y[t] = acc;
  }
}

template <class T>
inline void correlate_row_any(T* __restrict y, const T* __restrict x, const T* __restrict w, std::size_t kernel,
                              std::size_t n) {
  switch (kernel) {
    case 1: return correlate_row<T, 1>(y, x, w, n);
    case 2: return correlate_row<T, 2>(y, x, w, n);
    case 3: return correlate_row<T, 3>(y, x, w, n);
    case 5: return correlate_row<T, 5>(y, x, w, n);
    case 7: return correlate_row<T, 7>(y, x, w, n);
    case 9: return correlate_row<T, 9>(y, x, w, n);
    default:
      for (std::size_t k = 0; k < kernel; ++k) {
        const T wk = w[k];
        const T* xs = x + k;
#pragma omp simd
        for (std::size_t t = 0; t < n; ++t) y[t] += wk * xs[t];
      }
  }
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T s = T{0};
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Copies x[B, C, L] into a zero-padded [B, C, L + 2p] buffer.
template <class T>
std::vector<T> pad_rows(std::span<const T> x, std::size_t rows, std::size_t length, std::size_t pad) {
  const std::size_t lp = length + 2 * pad;
  std::vector<T> out(rows * lp, T{0});
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * length, length, out.data() + r * lp + pad);
  return out;
}

template <class T>
void conv1d_forward_strided(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> w,
                            std::span<const T> bias, std::span<T> y) {
  const std::size_t lout = g.out_length();
  const std::size_t lp = g.length + 2 * g.padding;
  const std::vector<T> xp = pad_rows(x, g.batch * g.in_channels, g.length, g.padding);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      T* yr = y.data() + (b * g.out_channels + co) * lout;
      for (std::size_t t = 0; t < lout; ++t) {
        T acc = bias.empty() ? T{0} : bias[co];
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          const T* xr = xp.data() + (b * g.in_channels + ci) * lp + t * g.stride;
          const T* wr = w.data() + (co * g.in_channels + ci) * g.kernel;
          for (std::size_t k = 0; k < g.kernel; ++k) acc += wr[k] * xr[k];
        }
        yr[t] = acc;
      }
    }
}

}  // namespace

template <class T>
void conv1d_forward(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias,
                    std::span<T> y) {
  if (g.stride != 1) return conv1d_forward_strided(g, x, w, bias, y);
  const std::size_t lout = g.out_length();
  const std::size_t lp = g.length + 2 * g.padding;
  std::vector<T> padded;
  const T* xp = x.data();
  if (g.padding > 0) {
    padded = pad_rows(x, g.batch * g.in_channels, g.length, g.padding);
    xp = padded.data();
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      T* yr = y.data() + (b * g.out_channels + co) * lout;
      std::fill_n(yr, lout, bias.empty() ? T{0} : bias[co]);
      for (std::size_t ci = 0; ci < g.in_channels; ++ci)
        correlate_row_any(yr, xp + (b * g.in_channels + ci) * lp, w.data() + (co * g.in_channels + ci) * g.kernel,
                          g.kernel, lout);
    }
}

template <class T>
void conv1d_backward_input(const Conv1dGeometry& g, std::span<const T> w, std::span<const T> gy, std::span<T> gx) {
  const std::size_t lout = g.out_length();
  const std::size_t lp = g.length + 2 * g.padding;
  if (g.stride != 1) {
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
        std::vector<T> acc(lp, T{0});
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          const T* gr = gy.data() + (b * g.out_channels + co) * lout;
          const T* wr = w.data() + (co * g.in_channels + ci) * g.kernel;
          for (std::size_t t = 0; t < lout; ++t)
            for (std::size_t k = 0; k < g.kernel; ++k) acc[t * g.stride + k] += wr[k] * gr[t];
        }
        std::copy_n(acc.data() + g.padding, g.length, gx.data() + (b * g.in_channels + ci) * g.length);
      }
    return;
  }
  // Stride 1: the input gradient is a full correlation of gy with the
  // flipped, channel-transposed kernel.
  const std::size_t kk = g.kernel;
  std::vector<T> flipped(g.in_channels * g.out_channels * kk);
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
      for (std::size_t k = 0; k < kk; ++k)
        flipped[(ci * g.out_channels + co) * kk + (kk - 1 - k)] = w[(co * g.in_channels + ci) * kk + k];
  const std::vector<T> gyp = pad_rows(gy, g.batch * g.out_channels, lout, kk - 1);
  const std::size_t lg = lout + 2 * (kk - 1);
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      std::vector<T> acc(lp, T{0});
      for (std::size_t co = 0; co < g.out_channels; ++co)
        correlate_row_any(acc.data(), gyp.data() + (b * g.out_channels + co) * lg,
                          flipped.data() + (ci * g.out_channels + co) * kk, kk, lp);
      std::copy_n(acc.data() + g.padding, g.length, gx.data() + (b * g.in_channels + ci) * g.length);
    }
}

template <class T>
void conv1d_backward_params(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> gy, std::span<T> gw,
                            std::span<T> gbias) {
  const std::size_t lout = g.out_length();
  const std::size_t lp = g.length + 2 * g.padding;
  std::vector<T> padded;
  const T* xp = x.data();
  if (g.padding > 0) {
    padded = pad_rows(x, g.batch * g.in_channels, g.length, g.padding);
    xp = padded.data();
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      std::vector<double> acc(g.kernel, 0.0);
      if (g.stride == 1) {
        // Elementwise partial products summed over the batch first, reduced
        // over time once per tap.
        std::vector<T> lanes(g.kernel * lout, T{0});
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* gr = gy.data() + (b * g.out_channels + co) * lout;
          const T* xr = xp + (b * g.in_channels + ci) * lp;
          for (std::size_t k = 0; k < g.kernel; ++k) {
            T* lane = lanes.data() + k * lout;
            const T* xs = xr + k;
#pragma omp simd
            for (std::size_t t = 0; t < lout; ++t) lane[t] += gr[t] * xs[t];
          }
        }
        for (std::size_t k = 0; k < g.kernel; ++k) {
          const T* lane = lanes.data() + k * lout;
          double s = 0.0;
          for (std::size_t t = 0; t < lout; ++t) s += lane[t];
          acc[k] = s;
        }
      } else {
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* gr = gy.data() + (b * g.out_channels + co) * lout;
          const T* xr = xp + (b * g.in_channels + ci) * lp;
          for (std::size_t k = 0; k < g.kernel; ++k) {
            T s = T{0};
            for (std::size_t t = 0; t < lout; ++t) s += gr[t] * xr[t * g.stride + k];
            acc[k] += s;
          }
        }
      }
      for (std::size_t k = 0; k < g.kernel; ++k)
        gw[(co * g.in_channels + ci) * g.kernel + k] = static_cast<T>(acc[k]);
    }
  if (!gbias.empty()) {
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      double acc = 0.0;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* gr = gy.data() + (b * g.out_channels + co) * lout;
        T s = T{0};
#pragma omp simd reduction(+ : s)
        for (std::size_t t = 0; t < lout; ++t) s += gr[t];
        acc += s;
      }
      gbias[co] = static_cast<T>(acc);
    }
  }
}

template <class T>
void maxpool1d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y, std::span<std::uint32_t> argmax) {
  const std::size_t lout = g.out_length();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < g.rows; ++r) {
    const T* xr = x.data() + r * g.length;
    for (std::size_t t = 0; t < lout; ++t) {
      std::size_t best = t * g.stride;
      T bv = xr[best];
      for (std::size_t j = best + 1; j < t * g.stride + g.window; ++j)
        if (xr[j] > bv) {
          bv = xr[j];
          best = j;
        }
      y[r * lout + t] = bv;
      argmax[r * lout + t] = static_cast<std::uint32_t>(best);
    }
  }
}

template <class T>
void maxpool1d_backward(const PoolGeometry& g, std::span<const std::uint32_t> argmax, std::span<const T> gy,
                        std::span<T> gx) {
  const std::size_t lout = g.out_length();
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < g.rows; ++r) {
    T* gr = gx.data() + r * g.length;
    std::fill_n(gr, g.length, T{0});
    for (std::size_t t = 0; t < lout; ++t) gr[argmax[r * lout + t]] += gy[r * lout + t];
  }
}

template <class T>
void batchnorm_forward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                             std::span<const T> beta, double eps, std::span<T> y, std::span<double> mean,
                             std::span<double> var) {
  const double n = static_cast<double>(g.batch * g.length);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < g.channels; ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t t = 0; t < g.length; ++t) s += xr[t];
      sum += s;
    }
    const double m = sum / n;
    double sq = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t t = 0; t < g.length; ++t) {
        const double d = xr[t] - m;
        s += d * d;
      }
      sq += s;
    }
    const double v = sq / n;
    mean[c] = m;
    var[c] = v;
    const T scale = static_cast<T>(gamma[c] / std::sqrt(v + eps));
    const T shift = static_cast<T>(beta[c] - m * (gamma[c] / std::sqrt(v + eps)));
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      T* yr = y.data() + (b * g.channels + c) * g.length;
#pragma omp simd
      for (std::size_t t = 0; t < g.length; ++t) yr[t] = xr[t] * scale + shift;
    }
  }
}

template <class T>
void batchnorm_forward_eval(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                            std::span<const T> beta, std::span<const T> running_mean, std::span<const T> running_var,
                            double eps, std::span<T> y) {
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps);
      const T scale = static_cast<T>(gamma[c] * inv);
      const T shift = static_cast<T>(beta[c] - running_mean[c] * gamma[c] * inv);
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      T* yr = y.data() + (b * g.channels + c) * g.length;
#pragma omp simd
      for (std::size_t t = 0; t < g.length; ++t) yr[t] = xr[t] * scale + shift;
    }
}

template <class T>
void batchnorm_backward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,
                              std::span<const double> mean, std::span<const double> var, double eps,
                              std::span<const T> gy, std::span<T> gx, std::span<T> ggamma, std::span<T> gbeta) {
  const double n = static_cast<double>(g.batch * g.length);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    const double m = mean[c];
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      const T* gr = gy.data() + (b * g.channels + c) * g.length;
      double s1 = 0.0, s2 = 0.0;
#pragma omp simd reduction(+ : s1, s2)
      for (std::size_t t = 0; t < g.length; ++t) {
        s1 += gr[t];
        s2 += gr[t] * (xr[t] - m);
      }
      sum_g += s1;
      sum_gx += s2 * inv;
    }
    ggamma[c] = static_cast<T>(sum_gx);
    gbeta[c] = static_cast<T>(sum_g);
    const double k = gamma[c] * inv;
    const double mg = sum_g / n;
    const double mgx = sum_gx / n;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* xr = x.data() + (b * g.channels + c) * g.length;
      const T* gr = gy.data() + (b * g.channels + c) * g.length;
      T* out = gx.data() + (b * g.channels + c) * g.length;
#pragma omp simd
      for (std::size_t t = 0; t < g.length; ++t) {
        const double xhat = (xr[t] - m) * inv;
        out[t] = static_cast<T>(k * (gr[t] - mg - xhat * mgx));
      }
    }
  }
}

template <class T>
void dense_forward(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x, std::span<const T> w,
                   std::span<const T> bias, std::span<T> y) {
#pragma omp parallel for collapse(2) schedule(static)
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) {
      const T s = dot(w.data() + o * in, x.data() + b * in, in);
      y[b * out + o] = static_cast<T>((bias.empty() ? T{0} : bias[o]) + s);
    }
}

template <class T>
void dense_backward_input(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> w,
                          std::span<const T> gy, std::span<T> gx) {
#pragma omp parallel for schedule(static)
  for (std::size_t b = 0; b < batch; ++b) {
    T* gr = gx.data() + b * in;
    std::fill_n(gr, in, T{0});
    for (std::size_t o = 0; o < out; ++o) {
      const T g = gy[b * out + o];
      const T* wr = w.data() + o * in;
#pragma omp simd
      for (std::size_t i = 0; i < in; ++i) gr[i] += g * wr[i];
    }
  }
}

template <class T>
void dense_backward_params(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x,
                           std::span<const T> gy, std::span<T> gw, std::span<T> gbias) {
#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < out; ++o) {
    std::vector<double> acc(in, 0.0);
    double bacc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double g = gy[b * out + o];
      const T* xr = x.data() + b * in;
      for (std::size_t i = 0; i < in; ++i) acc[i] += g * xr[i];
      bacc += g;
    }
    for (std::size_t i = 0; i < in; ++i) gw[o * in + i] = static_cast<T>(acc[i]);
    if (!gbias.empty()) gbias[o] = static_cast<T>(bacc);
  }
}

#include "kernel_instances.inc"

}  // namespace parallel
}  // namespace bayesbeat::kernels
