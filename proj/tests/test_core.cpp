#include <doctest.h>

#include <cmath>
#include <limits>

#include "bayesbeat/kernels.hpp"
#include "bayesbeat/ops.hpp"
#include "support.hpp"

using namespace bayesbeat;
using namespace testing;

namespace {

std::vector<double> as_vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TensorD run_conv(const TensorD& x, const TensorD& w, const TensorD& b, std::size_t stride, std::size_t pad) {
  TapeD tape(false);
  return ops::conv1d(tape.constant(x), tape.constant(w), std::optional<VarD>(tape.constant(b)), stride, pad).value();
}

}  // namespace

TEST_CASE("tensor basics") {
  TensorD t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.dim(1) == 3);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK_THROWS_AS(TensorD({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS((void)t.reshaped({4, 2}), ShapeError);
  t[4] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("backward: simple sums") {
  TapeD tape;
  auto x = tape.leaf(TensorD({2}, std::vector<double>{1, 2}));
  auto loss = ops::sum(ops::square(x));
  tape.backward(loss);
  CHECK(tape.grad(x)[0] == doctest::Approx(2.0));
  CHECK(tape.grad(x)[1] == doctest::Approx(4.0));

  TapeD t2;
  auto y = t2.leaf(random_tensor({3, 4}, 5));
  t2.backward(ops::sum(y));
  const auto gy = t2.grad(y);
  for (double g : gy.data()) CHECK(g == 1.0);
}

TEST_CASE("backward: misuse is rejected") {
  TapeD tape;
  auto x = tape.leaf(TensorD({3}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), TapeError);  // not a scalar
  auto loss = ops::sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), TapeError);
  CHECK(tape.consumed());

  TapeD nograd(false);
  auto c = nograd.constant(TensorD({1}, 1.0));
  CHECK_THROWS_AS(nograd.backward(c), TapeError);
}

TEST_CASE("backward: unused leaves get zero gradient, reuse accumulates") {
  TapeD tape;
  auto a = tape.leaf(TensorD({2}, 3.0));
  auto b = tape.leaf(TensorD({2}, 1.0));
  tape.backward(ops::sum(ops::add(a, a)));
  CHECK(tape.grad(a)[0] == 2.0);
  CHECK(tape.grad(b)[1] == 0.0);
}

TEST_CASE("conv1d: hand examples") {
  auto y = run_conv(TensorD({1, 1, 3}, std::vector<double>{1, 2, 3}), TensorD({1, 1, 1}, 1.0), TensorD({1}, 0.0), 1, 0);
  CHECK(as_vec(y) == std::vector<double>{1, 2, 3});
  y = run_conv(TensorD({1, 1, 4}, std::vector<double>{1, 2, 3, 4}), TensorD({1, 1, 2}, 1.0), TensorD({1}, 0.0), 1, 0);
  CHECK(as_vec(y) == std::vector<double>{3, 5, 7});
  // No kernel flip.
  y = run_conv(TensorD({1, 1, 3}, std::vector<double>{1, 2, 3}), TensorD({1, 1, 2}, std::vector<double>{1, 0}),
               TensorD({1}, 0.0), 1, 0);
  CHECK(as_vec(y) == std::vector<double>{1, 2});
}

TEST_CASE("conv1d: output length and shape errors") {
  for (std::size_t L : {5, 8, 13})
    for (std::size_t K : {1, 3, 5})
      for (std::size_t s : {1, 2, 3})
        for (std::size_t p : {0, 1, 2}) {
          if (K > L + 2 * p) continue;
          auto y = run_conv(random_tensor({2, 3, L}, L), random_tensor({4, 3, K}, K), TensorD({4}, 0.0), s, p);
          CHECK(y.shape() == Shape{2, 4, (L + 2 * p - K) / s + 1});
        }
  TapeD tape(false);
  auto x = tape.constant(random_tensor({1, 3, 10}, 1));
  auto w = tape.constant(random_tensor({2, 4, 3}, 2));
  try {
    ops::conv1d(x, w, std::optional<VarD>{}, 1, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  auto wide = tape.constant(random_tensor({2, 3, 13}, 2));
  CHECK_THROWS_AS(ops::conv1d(x, wide, std::optional<VarD>{}, 1, 1), ShapeError);
  CHECK_THROWS_AS(ops::conv1d(x, tape.constant(random_tensor({2, 3, 3}, 2)), std::optional<VarD>{}, 0, 1), ShapeError);
}

TEST_CASE("conv1d: matches the triple-loop oracle") {
  struct Case { std::size_t B, Ci, L, Co, K, s, p; };
  for (const Case c : {Case{1, 1, 20, 1, 3, 1, 1}, Case{3, 4, 37, 5, 7, 1, 3}, Case{2, 3, 50, 6, 5, 2, 2},
                       Case{4, 2, 9, 3, 9, 1, 0}}) {
    const auto x = random_tensor({c.B, c.Ci, c.L}, 11);
    const auto w = random_tensor({c.Co, c.Ci, c.K}, 12);
    const auto b = random_tensor({c.Co}, 13);
    const auto y = run_conv(x, w, b, c.s, c.p);
    const auto ref = conv1d_oracle(as_vec(x), as_vec(w), as_vec(b), c.B, c.Ci, c.L, c.Co, c.K, c.s, c.p);
    CHECK(max_abs_diff(y.data(), ref) < 1e-10);
  }
}

TEST_CASE("conv1d: linearity in the input") {
  const auto x = random_tensor<float>({2, 3, 40}, 1);
  const auto y = random_tensor<float>({2, 3, 40}, 2);
  const auto k = random_tensor<float>({4, 3, 5}, 3);
  const float a = 0.7f, b = -1.3f;
  Tape tape(false);
  TensorF mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto conv = [&](const TensorF& in) {
    return ops::conv1d(tape.constant(in), tape.constant(k), std::optional<Var>{}, 1, 2).value();
  };
  const auto lhs = conv(mix), cx = conv(x), cy = conv(y);
  double worst = 0;
  for (std::size_t i = 0; i < lhs.size(); ++i) worst = std::max(worst, std::abs(double(lhs[i]) - (a * cx[i] + b * cy[i])));
  CHECK(worst < 1e-5);
}

TEST_CASE("kernels: serial and parallel agree") {
  kernels::Conv1dGeometry g{3, 5, 64, 7, 5, 1, 2};
  const auto x = random_tensor<float>({g.batch, g.in_channels, g.length}, 1);
  const auto w = random_tensor<float>({g.out_channels, g.in_channels, g.kernel}, 2);
  const auto bias = random_tensor<float>({g.out_channels}, 3);
  const auto gy = random_tensor<float>({g.batch, g.out_channels, g.out_length()}, 4);
  auto close = [](const std::vector<float>& a, const std::vector<float>& b, double tol) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, double(std::abs(a[i] - b[i])) / (1.0 + std::abs(b[i])));
    return m < tol;
  };
  std::vector<float> ys(g.output_size()), yp(g.output_size());
  kernels::serial::conv1d_forward<float>(g, x.data(), w.data(), bias.data(), ys);
  kernels::parallel::conv1d_forward<float>(g, x.data(), w.data(), bias.data(), yp);
  CHECK(close(yp, ys, 1e-5));

  std::vector<float> gxs(g.input_size()), gxp(g.input_size());
  kernels::serial::conv1d_backward_input<float>(g, w.data(), gy.data(), gxs);
  kernels::parallel::conv1d_backward_input<float>(g, w.data(), gy.data(), gxp);
  CHECK(close(gxp, gxs, 1e-5));

  std::vector<float> gws(g.weight_size()), gwp(g.weight_size()), gbs(g.out_channels), gbp(g.out_channels);
  kernels::serial::conv1d_backward_params<float>(g, x.data(), gy.data(), gws, gbs);
  kernels::parallel::conv1d_backward_params<float>(g, x.data(), gy.data(), gwp, gbp);
  CHECK(close(gwp, gws, 1e-5));
  CHECK(close(gbp, gbs, 1e-5));

  kernels::NormGeometry ng{4, 3, 30};
  const auto nx = random_tensor<float>({4, 3, 30}, 7, 3.0);
  const auto gamma = random_tensor<float>({3}, 8), beta = random_tensor<float>({3}, 9);
  std::vector<float> ns(nx.size()), np(nx.size());
  std::vector<double> ms(3), vs(3), mp(3), vp(3);
  kernels::serial::batchnorm_forward_train<float>(ng, nx.data(), gamma.data(), beta.data(), 1e-5, ns, ms, vs);
  kernels::parallel::batchnorm_forward_train<float>(ng, nx.data(), gamma.data(), beta.data(), 1e-5, np, mp, vp);
  CHECK(close(np, ns, 1e-5));

  const auto dx = random_tensor<float>({6, 17}, 10), dw = random_tensor<float>({5, 17}, 11), db = random_tensor<float>({5}, 12);
  std::vector<float> ds(30), dp(30);
  kernels::serial::dense_forward<float>(6, 17, 5, dx.data(), dw.data(), db.data(), ds);
  kernels::parallel::dense_forward<float>(6, 17, 5, dx.data(), dw.data(), db.data(), dp);
  CHECK(close(dp, ds, 1e-5));
}

TEST_CASE("parallel kernels give identical results for any thread count") {
  kernels::Conv1dGeometry g{4, 6, 100, 8, 5, 1, 2};
  const auto x = random_tensor<float>({g.batch, g.in_channels, g.length}, 1);
  const auto w = random_tensor<float>({g.out_channels, g.in_channels, g.kernel}, 2);
  const auto gy = random_tensor<float>({g.batch, g.out_channels, g.out_length()}, 4);
  auto run = [&](int threads) {
    kernels::set_num_threads(threads);
    std::vector<float> y(g.output_size()), gw(g.weight_size()), gb(g.out_channels);
    kernels::parallel::conv1d_forward<float>(g, x.data(), w.data(), {}, y);
    kernels::parallel::conv1d_backward_params<float>(g, x.data(), gy.data(), gw, gb);
    y.insert(y.end(), gw.begin(), gw.end());
    return y;
  };
  const int before = kernels::num_threads();
  const auto one = run(1), four = run(4);
  kernels::set_num_threads(before);
  CHECK(one == four);
}

TEST_CASE("maxpool1d: examples and oracle") {
  TapeD tape(false);
  auto y = ops::maxpool1d(tape.constant(TensorD({1, 1, 4}, std::vector<double>{1, 3, 2, 5})), 2, 2);
  CHECK(as_vec(y.value()) == std::vector<double>{3, 5});
  y = ops::maxpool1d(tape.constant(TensorD({1, 1, 1}, 7.0)), 1, 1);
  CHECK(as_vec(y.value()) == std::vector<double>{7});
  CHECK_THROWS_AS(ops::maxpool1d(tape.constant(TensorD({1, 1, 3}, 1.0)), 4, 1), ShapeError);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_tensor({2, 3, 20}, seed);
    const std::size_t window = 1 + seed % 4, stride = 1 + seed % 3;
    const auto out = ops::maxpool1d(tape.constant(x), window, stride).value();
    CHECK(as_vec(out) == maxpool_oracle(as_vec(x), 6, 20, window, stride));
  }
}

TEST_CASE("maxpool1d: gradient routes to the first maximum") {
  TapeD tape;
  auto x = tape.leaf(TensorD({1, 1, 4}, std::vector<double>{2, 2, 1, 1}));
  tape.backward(ops::sum(ops::maxpool1d(x, 2, 2)));
  CHECK(as_vec(tape.grad(x)) == std::vector<double>{1, 0, 1, 0});
}

TEST_CASE("softplus: values and bounds") {
  CHECK(ops::softplus(0.0) == doctest::Approx(0.693147).epsilon(1e-4));
  CHECK(std::abs(ops::softplus(100.0) - 100.0) < 1e-6);
  const double tiny = ops::softplus(-100.0);
  CHECK(std::isfinite(tiny));
  CHECK(tiny > 0.0);
  CHECK(tiny == doctest::Approx(3.720076e-44).epsilon(1e-4));
  std::mt19937_64 eng(3);
  std::uniform_real_distribution<double> d(-700, 700);
  for (int i = 0; i < 10000; ++i) {
    const double x = i < 5000 ? d(eng) : d(eng) / 100.0;
    const double s = ops::softplus(x);
    CHECK(s >= 0.0);
    if (x < 700 && x > -700) CHECK(s > 0.0);
    const double gap = s - std::max(x, 0.0);
    CHECK(gap >= 0.0);
    CHECK(gap <= std::log(2.0) + 1e-15);
  }
  TapeD tape(false);
  const auto big = ops::softplus(tape.constant(TensorD({3}, std::vector<double>{-1000, 0, 1000}))).value();
  CHECK(big.all_finite());
  CHECK(big[2] == 1000.0);
}

TEST_CASE("batchnorm1d: oracle, constant channel and errors") {
  const std::size_t B = 5, C = 4, L = 11;
  const auto x = random_tensor({B, C, L}, 21, 2.0);
  const auto gamma = random_tensor({C}, 22), beta = random_tensor({C}, 23);
  BatchNormState<double> st(C);
  TapeD tape(false);
  const auto y = ops::batchnorm1d(tape.constant(x), tape.constant(gamma), tape.constant(beta), st, NormMode::train).value();
  CHECK(max_abs_diff(y.data(), batchnorm_oracle(as_vec(x), as_vec(gamma), as_vec(beta), B, C, L, 1e-5)) < 1e-5);
  // Running stats moved towards the batch statistics.
  CHECK(st.running_mean[0] != 0.0);

  BatchNormState<double> st2(1);
  const auto flat = ops::batchnorm1d(tape.constant(TensorD({3, 1, 6}, 4.2)), tape.constant(TensorD({1}, 1.0)),
                                     tape.constant(TensorD({1}, 0.0)), st2, NormMode::train)
                        .value();
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));

  BatchNormState<double> st3(C);
  CHECK_THROWS(ops::batchnorm1d(tape.constant(random_tensor({1, C, L}, 1)), tape.constant(gamma), tape.constant(beta), st3,
                                NormMode::train));
  // Eval mode with a single sample is fine.
  CHECK_NOTHROW(ops::batchnorm1d(tape.constant(random_tensor({1, C, L}, 1)), tape.constant(gamma), tape.constant(beta),
                                 st3, NormMode::eval));
}

TEST_CASE("dense: examples and oracle") {
  TapeD tape(false);
  const auto x = random_tensor({3, 4}, 31);
  TensorD eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  auto y = ops::dense(tape.constant(x), tape.constant(eye), std::optional<VarD>(tape.constant(TensorD({4}, 0.0)))).value();
  CHECK(y == x);
  y = ops::dense(tape.constant(x), tape.constant(TensorD({1, 4}, 1.0)), std::optional<VarD>{}).value();
  for (std::size_t r = 0; r < 3; ++r) CHECK(y[r] == doctest::Approx(x[r * 4] + x[r * 4 + 1] + x[r * 4 + 2] + x[r * 4 + 3]));

  const auto X = random_tensor<float>({7, 13}, 32), W = random_tensor<float>({5, 13}, 33), b = random_tensor<float>({5}, 34);
  Tape ft(false);
  const auto out = ops::dense(ft.constant(X), ft.constant(W), std::optional<Var>(ft.constant(b))).value();
  const auto ref = dense_oracle(as_vec(X.cast<double>()), as_vec(W.cast<double>()), as_vec(b.cast<double>()), 7, 13, 5);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out[i] - ref[i]) < 1e-5);

  CHECK_THROWS_AS(ops::dense(tape.constant(x), tape.constant(TensorD({2, 5}, 1.0)), std::optional<VarD>{}), ShapeError);
}

TEST_CASE("softmax_nll: examples and 64-bit oracle") {
  Tape tape(false);
  const int zero = 0;
  auto r = ops::softmax_nll(tape.constant(TensorF({1, 2}, 0.0f)), std::span<const int>(&zero, 1));
  CHECK(r.loss.value().item() == doctest::Approx(0.693147).epsilon(1e-4));
  r = ops::softmax_nll(tape.constant(TensorF({1, 2}, std::vector<float>{1000, 0})), std::span<const int>(&zero, 1));
  CHECK(std::isfinite(r.loss.value().item()));
  CHECK(r.loss.value().item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(r.probabilities.all_finite());

  const auto logits = random_tensor<float>({50, 2}, 41, 4.0);
  std::vector<int> labels(50);
  for (std::size_t i = 0; i < 50; ++i) labels[i] = static_cast<int>(i % 3 == 0);
  r = ops::softmax_nll(tape.constant(logits), labels);
  CHECK(std::abs(r.loss.value().item() - nll_oracle(as_vec(logits.cast<double>()), labels, 2)) < 1e-5);

  const int bad = 2;
  CHECK_THROWS(ops::softmax_nll(tape.constant(TensorF({1, 2}, 0.0f)), std::span<const int>(&bad, 1)));
}

TEST_CASE("gradients: every primitive against central differences") {
  const std::size_t coords = 120;
  auto check = [&](const char* name, const LossFn& f, const std::vector<TensorD>& inputs) {
    const auto r = check_gradients(f, inputs, coords, 99);
    INFO(name << " max relative error " << r.max_rel_err);
    CHECK(r.coords >= 100);
    CHECK(r.max_rel_err < 1e-4);
  };
  check("add", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::add(v[0], v[1]), 1); },
        {random_tensor({4, 6}, 1), random_tensor({4, 6}, 2)});
  check("mul", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::mul(v[0], v[1]), 1); },
        {random_tensor({4, 6}, 1), random_tensor({4, 6}, 2)});
  check("scale", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::scale(v[0], -2.5), 1); },
        {random_tensor({30}, 3)});
  check("square", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::square(v[0]), 1); },
        {random_tensor({30}, 3)});
  check("softplus", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::softplus(v[0]), 1); },
        {random_tensor({40}, 4, 3.0)});
  check("softplus_squared",
        [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::softplus_squared(v[0]), 1); },
        {random_tensor({40}, 4, 3.0)});
  check("reshape", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::reshape(v[0], {5, 6}), 1); },
        {random_tensor({30}, 5)});
  check("conv1d",
        [](TapeD& t, const std::vector<VarD>& v) {
          return weighted_sum(t, ops::conv1d(v[0], v[1], std::optional<VarD>(v[2]), 2, 2), 1);
        },
        {random_tensor({2, 3, 17}, 6), random_tensor({4, 3, 5}, 7), random_tensor({4}, 8)});
  check("maxpool1d", [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::maxpool1d(v[0], 3, 2), 1); },
        {separated_tensor({2, 3, 21}, 9)});
  check("batchnorm1d",
        [](TapeD& t, const std::vector<VarD>& v) {
          BatchNormState<double> st(3);
          return weighted_sum(t, ops::batchnorm1d(v[0], v[1], v[2], st, NormMode::train), 1);
        },
        {random_tensor({4, 3, 9}, 10, 2.0), random_tensor({3}, 11), random_tensor({3}, 12)});
  check("global_avg_pool",
        [](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::global_avg_pool(v[0]), 1); },
        {random_tensor({3, 4, 10}, 13)});
  check("dense",
        [](TapeD& t, const std::vector<VarD>& v) {
          return weighted_sum(t, ops::dense(v[0], v[1], std::optional<VarD>(v[2])), 1);
        },
        {random_tensor({5, 8}, 14), random_tensor({6, 8}, 15), random_tensor({6}, 16)});
  check("softmax_nll",
        [](TapeD&, const std::vector<VarD>& v) {
          static const std::vector<int> labels{0, 1, 1, 0, 1, 0, 0, 1, 1, 1};
          return ops::softmax_nll(v[0], labels).loss;
        },
        {random_tensor({10, 2}, 17, 2.0)});
  const auto eps = random_tensor({5, 7}, 18);
  check("sample_weights",
        [&eps](TapeD& t, const std::vector<VarD>& v) { return weighted_sum(t, ops::sample_weights(v[0], v[1], eps), 1); },
        {random_tensor({5, 7}, 19), random_tensor({5, 7}, 20)});
  check("reparam_activation",
        [&eps](TapeD& t, const std::vector<VarD>& v) {
          return weighted_sum(t, ops::reparam_activation(v[0], ops::softplus(v[1]), eps, 1e-10), 1);
        },
        {random_tensor({5, 7}, 21), random_tensor({5, 7}, 22)});
  check("kl_mc",
        [](TapeD&, const std::vector<VarD>& v) { return ops::kl_mc(v[0], v[1], v[2]); },
        {random_tensor({20}, 23), random_tensor({20}, 24), random_tensor({20}, 25)});
  check("kl_closed", [](TapeD&, const std::vector<VarD>& v) { return ops::kl_closed(v[0], v[1]); },
        {random_tensor({40}, 26), random_tensor({40}, 27, 2.0)});
}
