#include "bayesbeat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "bayesbeat/kernels.hpp"

namespace bayesbeat::ops {

namespace kp = kernels::parallel;

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

template <class T>
BasicTape<T>& tape_of(BasicVar<T> a, BasicVar<T> b) {
  if (a.tape == nullptr || a.tape != b.tape) throw TapeError("operands recorded on different tapes");
  return *a.tape;
}

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
}

template <class T>
std::span<const T> cspan(const BasicTensor<T>& t) {
  return t.data();
}

}  // namespace

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = tape_of(a, b);
  const auto& av = a.value();
  require_shape(b.shape(), av.shape(), "add: right operand");
  BasicTensor<T> out = av;
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BasicTape<T>& tp, std::size_t self) {
    for (auto id : {ia, ib}) {
      if (!tp.requires_grad(id)) continue;
      const auto& g = tp.grad_buffer(self);
      auto& gi = tp.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  auto& tape = tape_of(a, b);
  const auto& av = a.value();
  require_shape(b.shape(), av.shape(), "mul: right operand");
  BasicTensor<T> out = av;
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return tape.record(std::move(out), {ia, ib}, [ia, ib](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      const auto& bv = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      const auto& av = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, double factor) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = static_cast<T>(v * factor);
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia, factor](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<T>(g[i] * factor);
  });
}

template <class T>
BasicVar<T> square(BasicVar<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = v * v;
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    const auto& x = tp.value(ia);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T{2} * x[i] * g[i];
  });
}

template <class T>
BasicVar<T> softplus(BasicVar<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = static_cast<T>(softplus(static_cast<double>(v)));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    const auto& x = tp.value(ia);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<T>(g[i] * logistic(x[i]));
  });
}

template <class T>
BasicVar<T> softplus_squared(BasicVar<T> a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) {
    const double s = softplus(static_cast<double>(v));
    v = static_cast<T>(s * s);
  }
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    const auto& x = tp.value(ia);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += static_cast<T>(g[i] * 2.0 * softplus(x[i]) * logistic(x[i]));
  });
}

template <class T>
BasicVar<T> sum(BasicVar<T> a) {
  double s = 0.0;
  for (auto v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return a.tape->record(BasicTensor<T>::scalar(static_cast<T>(s)), {ia}, [ia](BasicTape<T>& tp, std::size_t self) {
    const T g = tp.grad_buffer(self)[0];
    for (auto& v : tp.grad_buffer(ia).data()) v += g;
  });
}

template <class T>
BasicVar<T> reshape(BasicVar<T> a, Shape shape) {
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id;
  return a.tape->record(std::move(out), {ia}, [ia](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
BasicVar<T> conv1d(BasicVar<T> x, BasicVar<T> w, std::optional<BasicVar<T>> bias, std::size_t stride,
                   std::size_t padding) {
  auto& tape = tape_of(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 3, "conv1d input");
  require_rank(wv, 3, "conv1d kernel");
  kernels::Conv1dGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(2), stride, padding};
  if (wv.dim(1) != g.in_channels)
    throw ShapeError("conv1d: kernel in_channels (dim 1) is " + std::to_string(wv.dim(1)) +
                     " but input channels (dim 1) is " + std::to_string(g.in_channels));
  g.validate();
  std::span<const T> bspan;
  std::size_t ib = 0;
  const bool has_bias = bias.has_value();
  if (has_bias) {
    tape_of(x, *bias);
    require_shape(bias->shape(), Shape{g.out_channels}, "conv1d bias");
    bspan = cspan(bias->value());
    ib = bias->id;
  }
  BasicTensor<T> out(Shape{g.batch, g.out_channels, g.out_length()});
  kp::conv1d_forward<T>(g, cspan(xv), cspan(wv), bspan, out.data());
  const std::size_t ix = x.id, iw = w.id;
  auto fn = [g, ix, iw, ib, has_bias](BasicTape<T>& tp, std::size_t self) {
    const auto& gy = tp.grad_buffer(self);
    if (tp.requires_grad(ix)) {
      BasicTensor<T> gx(tp.value(ix).shape());
      kp::conv1d_backward_input<T>(g, cspan(tp.value(iw)), cspan(gy), gx.data());
      auto& acc = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
    }
    const bool want_w = tp.requires_grad(iw);
    const bool want_b = has_bias && tp.requires_grad(ib);
    if (want_w || want_b) {
      BasicTensor<T> gw(tp.value(iw).shape());
      BasicTensor<T> gb(Shape{g.out_channels});
      kp::conv1d_backward_params<T>(g, cspan(tp.value(ix)), cspan(gy), gw.data(),
                                    want_b ? gb.data() : std::span<T>{});
      if (want_w) {
        auto& acc = tp.grad_buffer(iw);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gw[i];
      }
      if (want_b) {
        auto& acc = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gb[i];
      }
    }
  };
  if (has_bias) return tape.record(std::move(out), {ix, iw, ib}, std::move(fn));
  return tape.record(std::move(out), {ix, iw}, std::move(fn));
}

template <class T>
BasicVar<T> maxpool1d(BasicVar<T> x, std::size_t window, std::size_t stride) {
  const auto& xv = x.value();
  require_rank(xv, 3, "maxpool1d input");
  kernels::PoolGeometry g{xv.dim(0) * xv.dim(1), xv.dim(2), window, stride};
  g.validate();
  BasicTensor<T> out(Shape{xv.dim(0), xv.dim(1), g.out_length()});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  kp::maxpool1d_forward<T>(g, cspan(xv), out.data(), *argmax);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [g, ix, argmax](BasicTape<T>& tp, std::size_t self) {
    BasicTensor<T> gx(tp.value(ix).shape());
    kp::maxpool1d_backward<T>(g, *argmax, cspan(tp.grad_buffer(self)), gx.data());
    auto& acc = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
  });
}

template <class T>
BasicVar<T> batchnorm1d(BasicVar<T> x, BasicVar<T> gamma, BasicVar<T> beta, BatchNormState<T>& state, NormMode mode) {
  auto& tape = tape_of(x, gamma);
  tape_of(x, beta);
  const auto& xv = x.value();
  require_rank(xv, 3, "batchnorm1d input");
  const kernels::NormGeometry g{xv.dim(0), xv.dim(1), xv.dim(2)};
  require_shape(gamma.shape(), Shape{g.channels}, "batchnorm1d gamma");
  require_shape(beta.shape(), Shape{g.channels}, "batchnorm1d beta");
  require_shape(state.running_mean.shape(), Shape{g.channels}, "batchnorm1d running mean");
  BasicTensor<T> out(xv.shape());
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  const double eps = state.eps;

  if (mode == NormMode::eval) {
    kp::batchnorm_forward_eval<T>(g, cspan(xv), cspan(gamma.value()), cspan(beta.value()),
                                  cspan(state.running_mean), cspan(state.running_var), eps, out.data());
    const BasicTensor<T> rm = state.running_mean, rv = state.running_var;
    return tape.record(std::move(out), {ix, ig, ib}, [g, ix, ig, ib, rm, rv, eps](BasicTape<T>& tp, std::size_t self) {
      const auto& gy = tp.grad_buffer(self);
      const auto& xv = tp.value(ix);
      const auto& gam = tp.value(ig);
      for (std::size_t c = 0; c < g.channels; ++c) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
        double sg = 0.0, sgx = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t t = 0; t < g.length; ++t) {
            const std::size_t i = (b * g.channels + c) * g.length + t;
            sg += gy[i];
            sgx += gy[i] * (xv[i] - rm[c]) * inv;
          }
        if (tp.requires_grad(ix)) {
          auto& gx = tp.grad_buffer(ix);
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t t = 0; t < g.length; ++t) {
              const std::size_t i = (b * g.channels + c) * g.length + t;
              gx[i] += static_cast<T>(gy[i] * gam[c] * inv);
            }
        }
        if (tp.requires_grad(ig)) tp.grad_buffer(ig)[c] += static_cast<T>(sgx);
        if (tp.requires_grad(ib)) tp.grad_buffer(ib)[c] += static_cast<T>(sg);
      }
    });
  }

  if (g.batch < 2) throw ShapeError("batchnorm1d: train mode needs batch >= 2 (dim 0), got " + std::to_string(g.batch));
  auto stats = std::make_shared<std::vector<double>>(2 * g.channels);
  std::span<double> mean(stats->data(), g.channels), var(stats->data() + g.channels, g.channels);
  kp::batchnorm_forward_train<T>(g, cspan(xv), cspan(gamma.value()), cspan(beta.value()), eps, out.data(), mean, var);
  const double n = static_cast<double>(g.batch * g.length);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double unbiased = n > 1 ? var[c] * n / (n - 1) : var[c];
    state.running_mean[c] = static_cast<T>((1 - state.momentum) * state.running_mean[c] + state.momentum * mean[c]);
    state.running_var[c] = static_cast<T>((1 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
  }
  return tape.record(std::move(out), {ix, ig, ib}, [g, ix, ig, ib, stats, eps](BasicTape<T>& tp, std::size_t self) {
    std::span<const double> mean(stats->data(), g.channels), var(stats->data() + g.channels, g.channels);
    BasicTensor<T> gx(tp.value(ix).shape());
    BasicTensor<T> ggam(Shape{g.channels}), gbet(Shape{g.channels});
    kp::batchnorm_backward_train<T>(g, cspan(tp.value(ix)), cspan(tp.value(ig)), mean, var, eps,
                                    cspan(tp.grad_buffer(self)), gx.data(), ggam.data(), gbet.data());
    if (tp.requires_grad(ix)) {
      auto& acc = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
    }
    if (tp.requires_grad(ig)) {
      auto& acc = tp.grad_buffer(ig);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += ggam[i];
    }
    if (tp.requires_grad(ib)) {
      auto& acc = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gbet[i];
    }
  });
}

template <class T>
BasicVar<T> global_avg_pool(BasicVar<T> x) {
  const auto& xv = x.value();
  require_rank(xv, 3, "global_avg_pool input");
  const std::size_t rows = xv.dim(0) * xv.dim(1), len = xv.dim(2);
  BasicTensor<T> out(Shape{xv.dim(0), xv.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t t = 0; t < len; ++t) s += xv[r * len + t];
    out[r] = static_cast<T>(s / static_cast<double>(len));
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, rows, len](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T v = static_cast<T>(g[r] / static_cast<double>(len));
      for (std::size_t t = 0; t < len; ++t) gx[r * len + t] += v;
    }
  });
}

template <class T>
BasicVar<T> dense(BasicVar<T> x, BasicVar<T> w, std::optional<BasicVar<T>> bias) {
  auto& tape = tape_of(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  require_rank(xv, 2, "dense input");
  require_rank(wv, 2, "dense weight");
  const std::size_t batch = xv.dim(0), in = xv.dim(1), outf = wv.dim(0);
  if (wv.dim(1) != in)
    throw ShapeError("dense: weight in_features (dim 1) is " + std::to_string(wv.dim(1)) +
                     " but input features (dim 1) is " + std::to_string(in));
  std::span<const T> bspan;
  std::size_t ib = 0;
  const bool has_bias = bias.has_value();
  if (has_bias) {
    tape_of(x, *bias);
    require_shape(bias->shape(), Shape{outf}, "dense bias");
    bspan = cspan(bias->value());
    ib = bias->id;
  }
  BasicTensor<T> out(Shape{batch, outf});
  kp::dense_forward<T>(batch, in, outf, cspan(xv), cspan(wv), bspan, out.data());
  const std::size_t ix = x.id, iw = w.id;
  auto fn = [batch, in, outf, ix, iw, ib, has_bias](BasicTape<T>& tp, std::size_t self) {
    const auto& gy = tp.grad_buffer(self);
    if (tp.requires_grad(ix)) {
      BasicTensor<T> gx(Shape{batch, in});
      kp::dense_backward_input<T>(batch, in, outf, cspan(tp.value(iw)), cspan(gy), gx.data());
      auto& acc = tp.grad_buffer(ix);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gx[i];
    }
    const bool want_w = tp.requires_grad(iw);
    const bool want_b = has_bias && tp.requires_grad(ib);
    if (want_w || want_b) {
      BasicTensor<T> gw(Shape{outf, in}), gb(Shape{outf});
      kp::dense_backward_params<T>(batch, in, outf, cspan(tp.value(ix)), cspan(gy), gw.data(),
                                   want_b ? gb.data() : std::span<T>{});
      if (want_w) {
        auto& acc = tp.grad_buffer(iw);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gw[i];
      }
      if (want_b) {
        auto& acc = tp.grad_buffer(ib);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gb[i];
      }
    }
  };
  if (has_bias) return tape.record(std::move(out), {ix, iw, ib}, std::move(fn));
  return tape.record(std::move(out), {ix, iw}, std::move(fn));
}

template <class T>
NllResult<T> softmax_nll(BasicVar<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  require_rank(lv, 2, "softmax_nll logits");
  const std::size_t batch = lv.dim(0), classes = lv.dim(1);
  if (labels.size() != batch)
    throw ShapeError("softmax_nll: " + std::to_string(labels.size()) + " labels for batch (dim 0) of " +
                     std::to_string(batch));
  BasicTensor<T> probs(lv.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw std::invalid_argument("softmax_nll: label " + std::to_string(y) + " out of range at index " +
                                  std::to_string(b));
    double mx = lv[b * classes];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(lv[b * classes + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(lv[b * classes + c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = static_cast<T>(std::exp(lv[b * classes + c] - lse));
    total += lse - lv[b * classes + static_cast<std::size_t>(y)];
  }
  const double loss = total / static_cast<double>(batch);
  std::vector<int> lab(labels.begin(), labels.end());
  BasicTensor<T> p = probs;
  const std::size_t il = logits.id;
  auto var = logits.tape->record(BasicTensor<T>::scalar(static_cast<T>(loss)), {il},
                                 [il, lab = std::move(lab), p = std::move(p), batch, classes](BasicTape<T>& tp,
                                                                                              std::size_t self) {
                                   const double g = tp.grad_buffer(self)[0] / static_cast<double>(batch);
                                   auto& gl = tp.grad_buffer(il);
                                   for (std::size_t b = 0; b < batch; ++b)
                                     for (std::size_t c = 0; c < classes; ++c) {
                                       const double onehot = static_cast<int>(c) == lab[b] ? 1.0 : 0.0;
                                       gl[b * classes + c] += static_cast<T>(g * (p[b * classes + c] - onehot));
                                     }
                                 });
  return {var, std::move(probs)};
}

template <class T>
BasicVar<T> sample_weights(BasicVar<T> mu, BasicVar<T> rho, const BasicTensor<T>& eps) {
  auto& tape = tape_of(mu, rho);
  require_shape(rho.shape(), mu.shape(), "sample_weights rho");
  require_shape(eps.shape(), mu.shape(), "sample_weights eps");
  const auto& m = mu.value();
  const auto& r = rho.value();
  BasicTensor<T> out(m.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(m[i] + softplus(r[i]) * eps[i]);
  const std::size_t im = mu.id, ir = rho.id;
  return tape.record(std::move(out), {im, ir}, [im, ir, eps](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.requires_grad(im)) {
      auto& gm = tp.grad_buffer(im);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (tp.requires_grad(ir)) {
      const auto& r = tp.value(ir);
      auto& gr = tp.grad_buffer(ir);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i] += static_cast<T>(g[i] * eps[i] * logistic(r[i]));
    }
  });
}

template <class T>
BasicVar<T> reparam_activation(BasicVar<T> mean, BasicVar<T> var, const BasicTensor<T>& eps, double floor) {
  auto& tape = tape_of(mean, var);
  require_shape(var.shape(), mean.shape(), "reparam_activation variance");
  require_shape(eps.shape(), mean.shape(), "reparam_activation eps");
  const auto& m = mean.value();
  const auto& v = var.value();
  BasicTensor<T> out(m.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(m[i] + std::sqrt(static_cast<double>(v[i]) + floor) * eps[i]);
  const std::size_t im = mean.id, iv = var.id;
  return tape.record(std::move(out), {im, iv}, [im, iv, eps, floor](BasicTape<T>& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    if (tp.requires_grad(im)) {
      auto& gm = tp.grad_buffer(im);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (tp.requires_grad(iv)) {
      const auto& v = tp.value(iv);
      auto& gv = tp.grad_buffer(iv);
      for (std::size_t i = 0; i < g.size(); ++i)
        gv[i] += static_cast<T>(g[i] * eps[i] * 0.5 / std::sqrt(static_cast<double>(v[i]) + floor));
    }
  });
}

template <class T>
BasicVar<T> kl_mc(BasicVar<T> mu, BasicVar<T> rho, BasicVar<T> w) {
  auto& tape = tape_of(mu, rho);
  tape_of(mu, w);
  require_shape(rho.shape(), mu.shape(), "kl_mc rho");
  require_shape(w.shape(), mu.shape(), "kl_mc w");
  const auto& m = mu.value();
  const auto& r = rho.value();
  const auto& wv = w.value();
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double sigma = softplus(r[i]);
    const double z = (wv[i] - m[i]) / sigma;
    // log N(w; mu, sigma^2) - log N(w; 0, 1); the 2*pi terms cancel.
    total += -std::log(sigma) - 0.5 * z * z + 0.5 * static_cast<double>(wv[i]) * wv[i];
  }
  const std::size_t im = mu.id, ir = rho.id, iw = w.id;
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(total)), {im, ir, iw},
                     [im, ir, iw](BasicTape<T>& tp, std::size_t self) {
                       const double g = tp.grad_buffer(self)[0];
                       const auto& m = tp.value(im);
                       const auto& r = tp.value(ir);
                       const auto& wv = tp.value(iw);
                       T* gm = tp.requires_grad(im) ? tp.grad_buffer(im).ptr() : nullptr;
                       T* gr = tp.requires_grad(ir) ? tp.grad_buffer(ir).ptr() : nullptr;
                       T* gw = tp.requires_grad(iw) ? tp.grad_buffer(iw).ptr() : nullptr;
                       for (std::size_t i = 0; i < m.size(); ++i) {
                         const double sigma = softplus(r[i]);
                         const double diff = wv[i] - m[i];
                         const double s2 = sigma * sigma;
                         if (gm) gm[i] += static_cast<T>(g * diff / s2);
                         if (gr) gr[i] += static_cast<T>(g * (-1.0 / sigma + diff * diff / (s2 * sigma)) * logistic(r[i]));
                         if (gw) gw[i] += static_cast<T>(g * (-diff / s2 + wv[i]));
                       }
                     });
}

template <class T>
BasicVar<T> kl_closed(BasicVar<T> mu, BasicVar<T> rho) {
  auto& tape = tape_of(mu, rho);
  require_shape(rho.shape(), mu.shape(), "kl_closed rho");
  const auto& m = mu.value();
  const auto& r = rho.value();
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double sigma = softplus(r[i]);
    total += 0.5 * (static_cast<double>(m[i]) * m[i] + sigma * sigma - 1.0 - 2.0 * std::log(sigma));
  }
  const std::size_t im = mu.id, ir = rho.id;
  return tape.record(BasicTensor<T>::scalar(static_cast<T>(total)), {im, ir},
                     [im, ir](BasicTape<T>& tp, std::size_t self) {
                       const double g = tp.grad_buffer(self)[0];
                       const auto& m = tp.value(im);
                       const auto& r = tp.value(ir);
                       T* gm = tp.requires_grad(im) ? tp.grad_buffer(im).ptr() : nullptr;
                       T* gr = tp.requires_grad(ir) ? tp.grad_buffer(ir).ptr() : nullptr;
                       for (std::size_t i = 0; i < m.size(); ++i) {
                         if (gm) gm[i] += static_cast<T>(g * m[i]);
                         if (gr) {
                           const double sigma = softplus(r[i]);
                           gr[i] += static_cast<T>(g * (sigma - 1.0 / sigma) * logistic(r[i]));
                         }
                       }
                     });
}

#define BAYESBEAT_OPS_INSTANTIATE(T)                                                                                \
  template BasicVar<T> add(BasicVar<T>, BasicVar<T>);                                                               \
  template BasicVar<T> mul(BasicVar<T>, BasicVar<T>);                                                               \
  template BasicVar<T> scale(BasicVar<T>, double);                                                                  \
  template BasicVar<T> square(BasicVar<T>);                                                                         \
  template BasicVar<T> softplus(BasicVar<T>);                                                                       \
  template BasicVar<T> softplus_squared(BasicVar<T>);                                                               \
  template BasicVar<T> sum(BasicVar<T>);                                                                            \
  template BasicVar<T> reshape(BasicVar<T>, Shape);                                                                 \
  template BasicVar<T> conv1d(BasicVar<T>, BasicVar<T>, std::optional<BasicVar<T>>, std::size_t, std::size_t);      \
  template BasicVar<T> maxpool1d(BasicVar<T>, std::size_t, std::size_t);                                            \
  template BasicVar<T> batchnorm1d(BasicVar<T>, BasicVar<T>, BasicVar<T>, BatchNormState<T>&, NormMode);            \
  template BasicVar<T> global_avg_pool(BasicVar<T>);                                                                \
  template BasicVar<T> dense(BasicVar<T>, BasicVar<T>, std::optional<BasicVar<T>>);                                 \
  template NllResult<T> softmax_nll(BasicVar<T>, std::span<const int>);                                             \
  template BasicVar<T> sample_weights(BasicVar<T>, BasicVar<T>, const BasicTensor<T>&);                             \
  template BasicVar<T> reparam_activation(BasicVar<T>, BasicVar<T>, const BasicTensor<T>&, double);                 \
  template BasicVar<T> kl_mc(BasicVar<T>, BasicVar<T>, BasicVar<T>);                                                \
  template BasicVar<T> kl_closed(BasicVar<T>, BasicVar<T>);

BAYESBEAT_OPS_INSTANTIATE(float)
BAYESBEAT_OPS_INSTANTIATE(double)

}  // namespace bayesbeat::ops
