#pragma once

// Numeric kernels behind the differentiable ops.
//
// Two implementations share one interface:
//   serial::   straightforward loops with 64-bit accumulation. Reference
//              implementation used by the test-suite and the benchmark.
//   parallel:: OpenMP-parallel, vectorisation-friendly loops. Used by the
//              ops layer. Every parallel loop partitions independent outputs,
//              so results do not depend on the thread count.
//
// All "backward" kernels overwrite their outputs.

#include <cstddef>
#include <cstdint>
#include <span>

namespace bayesbeat::kernels {

struct Conv1dGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t length = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_length() const { return (length + 2 * padding - kernel) / stride + 1; }
  std::size_t input_size() const { return batch * in_channels * length; }
  std::size_t weight_size() const { return out_channels * in_channels * kernel; }
  std::size_t output_size() const { return batch * out_channels * out_length(); }
  /// Throws ShapeError on a degenerate geometry.
  void validate() const;
};

struct PoolGeometry {
  std::size_t rows = 1;  // batch * channels
  std::size_t length = 1;
  std::size_t window = 1;
  std::size_t stride = 1;

  std::size_t out_length() const { return (length - window) / stride + 1; }
  void validate() const;
};

struct NormGeometry {
  std::size_t batch = 1;
  std::size_t channels = 1;
  std::size_t length = 1;
};

#define BAYESBEAT_KERNEL_DECLS                                                                                     \
  template <class T>                                                                                               \
  void conv1d_forward(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> w, std::span<const T> bias, \
                      std::span<T> y);                                                                             \
  template <class T>                                                                                               \
  void conv1d_backward_input(const Conv1dGeometry& g, std::span<const T> w, std::span<const T> gy, std::span<T> gx); \
  template <class T>                                                                                               \
  void conv1d_backward_params(const Conv1dGeometry& g, std::span<const T> x, std::span<const T> gy,                 \
                              std::span<T> gw, std::span<T> gbias);                                                \
  template <class T>                                                                                               \
  void maxpool1d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y,                              \
                         std::span<std::uint32_t> argmax);                                                         \
  template <class T>                                                                                               \
  void maxpool1d_backward(const PoolGeometry& g, std::span<const std::uint32_t> argmax, std::span<const T> gy,     \
                          std::span<T> gx);                                                                        \
  template <class T>                                                                                               \
  void batchnorm_forward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,               \
                               std::span<const T> beta, double eps, std::span<T> y, std::span<double> mean,        \
                               std::span<double> var);                                                             \
  template <class T>                                                                                               \
  void batchnorm_forward_eval(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,                \
                              std::span<const T> beta, std::span<const T> running_mean,                            \
                              std::span<const T> running_var, double eps, std::span<T> y);                         \
  template <class T>                                                                                               \
  void batchnorm_backward_train(const NormGeometry& g, std::span<const T> x, std::span<const T> gamma,             \
                                std::span<const double> mean, std::span<const double> var, double eps,             \
                                std::span<const T> gy, std::span<T> gx, std::span<T> ggamma, std::span<T> gbeta);  \
  template <class T>                                                                                               \
  void dense_forward(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x, std::span<const T> w, \
                     std::span<const T> bias, std::span<T> y);                                                     \
  template <class T>                                                                                               \
  void dense_backward_input(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> w,              \
                            std::span<const T> gy, std::span<T> gx);                                               \
  template <class T>                                                                                               \
  void dense_backward_params(std::size_t batch, std::size_t in, std::size_t out, std::span<const T> x,             \
                             std::span<const T> gy, std::span<T> gw, std::span<T> gbias);

namespace serial {
BAYESBEAT_KERNEL_DECLS
}  // namespace serial

namespace parallel {
BAYESBEAT_KERNEL_DECLS
}  // namespace parallel

#undef BAYESBEAT_KERNEL_DECLS

/// Number of OpenMP worker threads the parallel kernels may use.
void set_num_threads(int n);
int num_threads();

}  // namespace bayesbeat::kernels
