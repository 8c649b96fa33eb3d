#include <doctest.h>

#include <numeric>

#include "oracles.hpp"
#include "tg/ops.hpp"

using namespace tg;

namespace {

struct ConvCase {
  Shape x, w;
  Triple stride, pad;
  bool bias;
};

// Random conv geometry with every extent in [1, 6] and a valid output.
ConvCase random_conv_case(Rng& rng, bool flat_time) {
  for (;;) {
    ConvCase c;
    const Index n = rng.between(1, 3), ci = rng.between(1, 6), co = rng.between(1, 6);
    const Index t = flat_time ? 1 : rng.between(1, 6), h = rng.between(1, 6), w = rng.between(1, 6);
    const Index kt = flat_time ? 1 : rng.between(1, 3), kh = rng.between(1, 3), kw = rng.between(1, 3);
    c.x = {n, ci, t, h, w};
    c.w = {co, ci, kt, kh, kw};
    c.stride = {rng.between(1, 2), rng.between(1, 2), rng.between(1, 2)};
    c.pad = {rng.between(0, kt / 2), rng.between(0, kh / 2), rng.between(0, kw / 2)};
    c.bias = rng.bernoulli(0.5);
    if (t + 2 * c.pad[0] >= kt && h + 2 * c.pad[1] >= kh && w + 2 * c.pad[2] >= kw) return c;
  }
}

}  // namespace

TEST_CASE("conv3d matches the nested-loop oracle on random geometries") {
  Rng rng(7);
  double worst = 0.0;
  for (int i = 0; i < 150; ++i) {
    const ConvCase c = random_conv_case(rng, false);
    const Tensor x = oracle::random(c.x, 100 + i);
    const Tensor w = oracle::random(c.w, 300 + i);
    const Tensor b = c.bias ? oracle::random({c.w[0]}, 500 + i) : Tensor();
    Shape want_shape;
    const auto want = oracle::conv3d(x, w, b, c.stride, c.pad, want_shape);
    const Tensor y = conv3d(x, w, b, c.stride, c.pad);
    REQUIRE(y.shape() == want_shape);
    worst = std::max(worst, oracle::max_abs_diff(y.data(), want));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("conv2d matches the oracle with a unit time axis") {
  Rng rng(8);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const ConvCase c = random_conv_case(rng, true);
    const Tensor x = oracle::random(c.x, 700 + i);
    const Tensor w = oracle::random(c.w, 900 + i);
    const Tensor b = c.bias ? oracle::random({c.w[0]}, 1100 + i) : Tensor();
    Shape want_shape;
    const Triple st{1, c.stride[1], c.stride[2]}, pd{0, c.pad[1], c.pad[2]};
    const auto want = oracle::conv3d(x, w, b, st, pd, want_shape);
    const Tensor y = conv2d(x.reshape({c.x[0], c.x[1], c.x[3], c.x[4]}),
                            w.reshape({c.w[0], c.w[1], c.w[3], c.w[4]}), b, {st[1], st[2]}, {pd[1], pd[2]});
    REQUIRE(y.shape() == Shape{want_shape[0], want_shape[1], want_shape[3], want_shape[4]});
    worst = std::max(worst, oracle::max_abs_diff(y.data(), want));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("conv3d backward is the adjoint of the oracle") {
  // <dy, conv(x)> is linear in x and w, so its gradient is exact to rounding.
  Rng rng(9);
  for (int i = 0; i < 25; ++i) {
    const ConvCase c = random_conv_case(rng, false);
    Tensor x = oracle::leaf(c.x, 1300 + i);
    Tensor w = oracle::leaf(c.w, 1500 + i);
    Tensor b = oracle::leaf({c.w[0]}, 1700 + i);
    const Tensor y = conv3d(x, w, b, c.stride, c.pad);
    const Tensor dy = oracle::random(y.shape(), 1900 + i);
    y.backward(dy.data());
    auto f = [&] {
      Shape s;
      const auto out = oracle::conv3d(x, w, b, c.stride, c.pad, s);
      return std::inner_product(out.begin(), out.end(), dy.data().begin(), 0.0);
    };
    CHECK(oracle::max_abs_diff(x.grad(), oracle::numeric_grad(f, x, 1e-3)) < 1e-8);
    CHECK(oracle::max_abs_diff(w.grad(), oracle::numeric_grad(f, w, 1e-3)) < 1e-8);
    CHECK(oracle::max_abs_diff(b.grad(), oracle::numeric_grad(f, b, 1e-3)) < 1e-8);
  }
}

TEST_CASE("conv3d rejects mismatched channels") {
  const Tensor x = Tensor::zeros({1, 3, 2, 2, 2});
  const Tensor w = Tensor::zeros({2, 4, 1, 1, 1});
  CHECK_THROWS_AS(conv3d(x, w), ShapeError);
  CHECK_THROWS_AS(conv3d(x, Tensor::zeros({2, 3, 3, 3, 3})), ShapeError);
}

TEST_CASE("maxpool3d matches the oracle and routes gradient to the argmax") {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 120; ++i) {
    const Shape s{rng.between(1, 2), rng.between(1, 4), rng.between(1, 6), rng.between(1, 6), rng.between(1, 6)};
    Triple k{rng.between(1, 3), rng.between(1, 3), rng.between(1, 3)};
    for (int a = 0; a < 3; ++a) k[a] = std::min(k[a], s[a + 2]);
    const Triple st{rng.between(1, 3), rng.between(1, 3), rng.between(1, 3)};
    Tensor x = oracle::leaf(s, 2100 + i);
    // Coarse quantisation forces plenty of ties.
    for (double& v : x.mutable_data()) v = std::round(v * 2.0) / 2.0;
    Shape want_shape;
    std::vector<Index> argmax;
    const auto want = oracle::maxpool3d(x, k, st, argmax, want_shape);
    const Tensor y = maxpool3d(x, k, st);
    REQUIRE(y.shape() == want_shape);
    worst = std::max(worst, oracle::max_abs_diff(y.data(), want));

    const Tensor dy = oracle::random(y.shape(), 2300 + i);
    y.backward(dy.data());
    std::vector<double> dx(x.data().size(), 0.0);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy.data()[o];
    CHECK(oracle::max_abs_diff(x.grad(), dx) == 0.0);
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("maxpool3d tie goes to the first window position") {
  Tensor x(Shape{1, 1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5}, true);
  const Tensor y = maxpool3d(x, {1, 2, 2}, {1, 2, 2});
  y.backward();
  CHECK(y.item() == 5.0);
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("elu and relu pointwise values and derivatives") {
  Tensor x(Shape{6}, std::vector<double>{-3.0, -0.5, -1e-9, 0.0, 1e-9, 2.0}, true);
  const Tensor e = elu(x, 1.5);
  for (Index i = 0; i < 6; ++i) {
    const double v = x.data()[i];
    CHECK(e.data()[i] == doctest::Approx(v > 0 ? v : 1.5 * (std::exp(v) - 1.0)).epsilon(1e-14));
  }
  e.backward(std::vector<double>(6, 1.0));
  for (Index i = 0; i < 6; ++i) {
    const double v = x.data()[i];
    CHECK(x.grad()[i] == doctest::Approx(v > 0 ? 1.0 : 1.5 * std::exp(v)).epsilon(1e-14));
  }

  Tensor z(Shape{4}, std::vector<double>{-1.0, 0.0, 0.5, 3.0}, true);
  const Tensor r = relu(z);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{0, 0, 0.5, 3.0});
  r.backward(std::vector<double>(4, 2.0));
  CHECK(std::vector<double>(z.grad().begin(), z.grad().end()) == std::vector<double>{0, 0, 2, 2});
}

TEST_CASE("activate dispatches") {
  const Tensor x(Shape{2}, std::vector<double>{-1.0, 1.0});
  CHECK(activate(x, Activation::identity).data()[0] == -1.0);
  CHECK(activate(x, Activation::relu).data()[0] == 0.0);
  CHECK(activate(x, Activation::elu).data()[0] == doctest::Approx(std::exp(-1.0) - 1.0));
}

TEST_CASE("batchnorm training output matches per-channel statistics") {
  const Shape s{3, 2, 2, 3, 2};
  const Tensor x = oracle::random(s, 31, -2.0, 3.0);
  const Tensor gamma(Shape{2}, std::vector<double>{1.5, -0.5});
  const Tensor beta(Shape{2}, std::vector<double>{0.25, 2.0});
  auto buf = BatchNormBuffers::create(2);
  const Tensor y = batchnorm(x, gamma, beta, buf, true);

  const Index inner = 12;
  for (Index c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < inner; ++i) mean += x.data()[(n * 2 + c) * inner + i];
    mean /= 36.0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < inner; ++i) var += std::pow(x.data()[(n * 2 + c) * inner + i] - mean, 2);
    var /= 36.0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < inner; ++i) {
        const Index at = (n * 2 + c) * inner + i;
        const double want = gamma.data()[c] * (x.data()[at] - mean) / std::sqrt(var + kBatchNormEpsilon) +
                            beta.data()[c];
        CHECK(y.data()[at] == doctest::Approx(want).epsilon(1e-12));
      }
    CHECK(buf.running_mean.data()[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(buf.running_var.data()[c] == doctest::Approx(0.9 + 0.1 * var * 36.0 / 35.0).epsilon(1e-12));
  }
  CHECK(buf.batches_seen.item() == 1.0);

  const Tensor ye = batchnorm(x, gamma, beta, buf, false);
  const double m0 = buf.running_mean.data()[0], v0 = buf.running_var.data()[0];
  CHECK(ye.data()[0] ==
        doctest::Approx(1.5 * (x.data()[0] - m0) / std::sqrt(v0 + kBatchNormEpsilon) + 0.25).epsilon(1e-12));
  CHECK(buf.batches_seen.item() == 1.0);
}

TEST_CASE("linear matches matmul oracle") {
  const Tensor x = oracle::random({4, 5}, 41);
  const Tensor w = oracle::random({3, 5}, 42);
  const Tensor b = oracle::random({3}, 43);
  std::vector<double> wt(15);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 5; ++j) wt[j * 3 + i] = w.data()[i * 5 + j];
  auto want = oracle::matmul({x.data().begin(), x.data().end()}, wt, 4, 5, 3);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 3; ++j) want[i * 3 + j] += b.data()[j];
  CHECK(oracle::max_abs_diff(linear(x, w, b).data(), want) < 1e-14);
  CHECK_THROWS_AS(linear(x, oracle::random({3, 4}, 1), b), ShapeError);
}

TEST_CASE("softmax cross entropy value and gradient") {
  Tensor z(Shape{2, 3}, std::vector<double>{1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0}, true);
  const std::vector<int> labels{2, 1};
  const auto r = softmax_cross_entropy(z, labels);
  const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  const double l1 = 1000.0;
  CHECK(r.loss.item() == doctest::Approx((l0 + l1) / 2.0).epsilon(1e-14));
  CHECK(std::isfinite(r.loss.item()));
  r.loss.backward();
  const double s = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(z.grad()[0] == doctest::Approx(std::exp(1.0) / s / 2.0));
  CHECK(z.grad()[2] == doctest::Approx((std::exp(3.0) / s - 1.0) / 2.0));
  CHECK(z.grad()[3] == doctest::Approx(0.5));
  CHECK(z.grad()[4] == doctest::Approx(-0.5));
  CHECK(oracle::max_abs_diff(z.grad(), r.grad_logits.data()) == 0.0);
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(softmax_cross_entropy(z, bad), ShapeError);
}

TEST_CASE("concat_channels interleaves per sample and splits gradient") {
  Tensor a(Shape{2, 1, 2}, std::vector<double>{1, 2, 3, 4}, true);
  Tensor b(Shape{2, 2, 2}, std::vector<double>{5, 6, 7, 8, 9, 10, 11, 12}, true);
  const Tensor c = concat_channels({a, b});
  CHECK(c.shape() == Shape{2, 3, 2});
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) ==
        std::vector<double>{1, 2, 5, 6, 7, 8, 3, 4, 9, 10, 11, 12});
  std::vector<double> seed(12);
  std::iota(seed.begin(), seed.end(), 0.0);
  c.backward(seed);
  CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) == std::vector<double>{0, 1, 6, 7});
  CHECK(std::vector<double>(b.grad().begin(), b.grad().end()) == std::vector<double>{2, 3, 4, 5, 8, 9, 10, 11});
  CHECK_THROWS_AS(concat_channels({a, Tensor::zeros({2, 1, 3})}), ShapeError);
}

TEST_CASE("global_avg_pool averages trailing axes") {
  const Tensor x = oracle::random({2, 3, 2, 2, 2}, 51);
  const Tensor y = global_avg_pool(x);
  REQUIRE(y.shape() == Shape{2, 3});
  for (Index i = 0; i < 6; ++i) {
    double s = 0.0;
    for (Index j = 0; j < 8; ++j) s += x.data()[i * 8 + j];
    CHECK(y.data()[i] == doctest::Approx(s / 8.0).epsilon(1e-14));
  }
}

TEST_CASE("mean_axis1 over identical slices is exact") {
  const Tensor slice = oracle::random({1, 1, 7}, 61, -1e3, 1e3);
  std::vector<double> rep;
  for (int k = 0; k < 10; ++k) rep.insert(rep.end(), slice.data().begin(), slice.data().end());
  const Tensor y = mean_axis1(Tensor({1, 10, 7}, rep));
  CHECK(y.shape() == Shape{1, 7});
  for (Index i = 0; i < 7; ++i) CHECK(y.data()[i] == slice.data()[i]);

  const Tensor z = oracle::random({2, 3, 2}, 62);
  const Tensor m = mean_axis1(z);
  for (Index a = 0; a < 2; ++a)
    for (Index j = 0; j < 2; ++j) {
      const double want = (z.at({a, 0, j}) + z.at({a, 1, j}) + z.at({a, 2, j})) / 3.0;
      CHECK(m.at({a, j}) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("select_frames picks a strided subset and scatters gradient back") {
  std::vector<double> v(12);
  std::iota(v.begin(), v.end(), 0.0);
  Tensor x(Shape{1, 2, 6, 1, 1}, v, true);
  const Tensor y = select_frames(x, 1, 2, 3);
  CHECK(y.shape() == Shape{1, 2, 3, 1, 1});
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{1, 3, 5, 7, 9, 11});
  y.backward(std::vector<double>(6, 1.0));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) ==
        std::vector<double>{0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1});
  CHECK_THROWS_AS(select_frames(x, 1, 2, 4), ShapeError);
}

TEST_CASE("clip and frame layouts are inverse") {
  const Tensor x = oracle::random({2, 3, 4, 2, 2}, 71);
  const Tensor f = clip_to_frames(x);
  CHECK(f.shape() == Shape{8, 3, 2, 2});
  // Frame (n, t) of f is x[n, :, t].
  CHECK(f.at({1 * 4 + 2, 1, 0, 1}) == x.at({1, 1, 2, 0, 1}));
  const Tensor back = frames_to_clip(f, 4);
  CHECK(oracle::max_abs_diff(back.data(), x.data()) == 0.0);
  CHECK_THROWS_AS(frames_to_clip(f, 3), ShapeError);
}

TEST_CASE("add, scale, sum and weighted_sum") {
  Tensor a(Shape{3}, std::vector<double>{1, 2, 3}, true);
  Tensor b(Shape{3}, std::vector<double>{4, 5, 6}, true);
  const std::vector<double> w{0.5, -1.0, 2.0};
  const Tensor s = add(scale(a, 2.0), b);
  const Tensor ws = weighted_sum(s, w);
  CHECK(ws.item() == doctest::Approx(0.5 * 6 - 9 + 2 * 12));
  ws.backward();
  CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) == std::vector<double>{1.0, -2.0, 4.0});
  CHECK(std::vector<double>(b.grad().begin(), b.grad().end()) == w);
  CHECK(sum(b).item() == 15.0);
  CHECK_THROWS_AS(add(a, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("results do not depend on buffer addresses") {
  // Same values in buffers at different heap offsets must give identical bits.
  const Tensor x = oracle::random({2, 6, 3, 5, 7}, 81, -3.0, 3.0);
  const Tensor gamma = oracle::random({6}, 82), beta = oracle::random({6}, 83);
  auto run = [&](const Tensor& in) {
    auto buf = BatchNormBuffers::create(6);
    Tensor leaf = in.clone().set_requires_grad(true);
    const Tensor y = elu(batchnorm(leaf, gamma, beta, buf, true), 0.7);
    const Tensor dy = oracle::random(y.shape(), 84);
    y.backward(dy.data());
    std::vector<double> all(y.data().begin(), y.data().end());
    all.insert(all.end(), leaf.grad().begin(), leaf.grad().end());
    return all;
  };
  const auto ref = run(x);
  std::vector<std::vector<double>> pads;
  for (int k = 0; k < 16; ++k) {
    pads.emplace_back(static_cast<std::size_t>(1 + k));
    CHECK(run(x.clone()) == ref);
  }
}
