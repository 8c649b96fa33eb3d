#include <doctest.h>

#include <numeric>

#include "oracles.hpp"
#include "tg/augment.hpp"
#include "tg/gradcheck.hpp"
#include "tg/video_ops.hpp"

using namespace tg;

namespace {

// Index-remapping shift oracle over [N,C,T,H,W].
std::vector<double> shift_oracle(const Tensor& x, Index fwd, Index bwd) {
  const auto& s = x.shape();
  const Index n = s[0], c = s[1], t = s[2], hw = s[3] * s[4];
  std::vector<double> out(x.data().size(), 0.0);
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch)
      for (Index f = 0; f < t; ++f)
        for (Index j = 0; j < hw; ++j) {
          Index src = f;
          if (ch < fwd) src = f - 1;
          else if (ch < fwd + bwd) src = f + 1;
          if (src < 0 || src >= t) continue;
          out[((i * c + ch) * t + f) * hw + j] = x.data()[((i * c + ch) * t + src) * hw + j];
        }
  return out;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("shift of four channels over three frames") {
  std::vector<double> v(12);
  std::iota(v.begin(), v.end(), 1.0);  // channel c, frame t holds 3c + t + 1
  const Tensor x(Shape{1, 4, 3, 1, 1}, v);
  const Tensor y = tsm_shift(x, ShiftSpec{{1, 4}, {1, 4}, true});
  CHECK(vec(y.data()) == std::vector<double>{0, 1, 2, 5, 6, 0, 7, 8, 9, 10, 11, 12});
  CHECK(vec(y.data()) == shift_oracle(x, 1, 1));
}

TEST_CASE("shift matches the remapping oracle") {
  Rng rng(3);
  for (int i = 0; i < 60; ++i) {
    const Shape s{rng.between(1, 2), rng.between(1, 16), rng.between(1, 6), rng.between(1, 3), rng.between(1, 3)};
    const ShiftSpec spec{{rng.between(0, 4), 8}, {rng.between(0, 4), 8}, true};
    const Tensor x = oracle::random(s, 10 + i);
    const Tensor y = tsm_shift(x, spec);
    CHECK(vec(y.data()) == shift_oracle(x, spec.fraction_forward.floor_times(s[1]),
                                        spec.fraction_backward.floor_times(s[1])));
    // Frame-major layout gives the same result after the layout change.
    const Tensor yf = tsm_shift_frames(clip_to_frames(x), s[2], spec);
    CHECK(vec(frames_to_clip(yf, s[2]).data()) == vec(y.data()));
  }
}

TEST_CASE("zero shift is the identity and shift is linear") {
  const Tensor a = oracle::random({2, 8, 4, 2, 2}, 1);
  const Tensor b = oracle::random({2, 8, 4, 2, 2}, 2);
  CHECK(vec(tsm_shift(a, ShiftSpec::none()).data()) == vec(a.data()));

  const ShiftSpec spec;
  const Tensor lhs = tsm_shift(add(a, scale(b, -0.75)), spec);
  const Tensor rhs = add(tsm_shift(a, spec), scale(tsm_shift(b, spec), -0.75));
  CHECK(oracle::max_abs_diff(lhs.data(), rhs.data()) < 1e-15);
}

TEST_CASE("shift backward is the inverse shift") {
  Tensor x = oracle::leaf({1, 8, 5, 2, 1}, 4);
  const ShiftSpec spec{{1, 4}, {1, 8}, true};
  const Tensor y = tsm_shift(x, spec);
  const Tensor g = oracle::random(y.shape(), 5);
  y.backward(g.data());
  // <shift(x), g> == <x, shift^T(g)>; shift^T moves forward-shifted channels back by one.
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < g.data().size(); ++i) {
    lhs += y.data()[i] * g.data()[i];
    rhs += x.data()[i] * x.grad()[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-14));
  // Channel 0 reads t-1, so its gradient at frame t comes from output frame t+1; last frame gets none.
  for (Index t = 0; t < 5; ++t) {
    for (Index j = 0; j < 2; ++j) {
      const double want = t + 1 < 5 ? g.data()[(0 * 5 + t + 1) * 2 + j] : 0.0;
      CHECK(x.grad()[(0 * 5 + t) * 2 + j] == want);
    }
  }
}

TEST_CASE("double forward shift equals shift by two") {
  const Tensor x = oracle::random({1, 4, 5, 1, 1}, 6);
  const ShiftSpec one{{1, 4}, {0, 1}, true};
  const Tensor twice = tsm_shift(tsm_shift(x, one), one);
  for (Index t = 0; t < 5; ++t) {
    CHECK(twice.at({0, 0, t, 0, 0}) == (t >= 2 ? x.at({0, 0, t - 2, 0, 0}) : 0.0));
  }
}

TEST_CASE("shift preserves untouched channel mass and drops one boundary frame") {
  const Tensor x = oracle::random({1, 8, 4, 2, 2}, 7);
  const Tensor y = tsm_shift(x, ShiftSpec{});
  auto chan_sum = [](const Tensor& t, Index c, Index skip_frame) {
    double s = 0.0;
    for (Index f = 0; f < 4; ++f)
      for (Index j = 0; j < 4; ++j)
        if (f != skip_frame) s += t.data()[(c * 4 + f) * 4 + j];
    return s;
  };
  for (Index c = 2; c < 8; ++c) CHECK(chan_sum(y, c, -1) == chan_sum(x, c, -1));
  CHECK(chan_sum(y, 0, -1) == doctest::Approx(chan_sum(x, 0, 3)).epsilon(1e-14));
  CHECK(chan_sum(y, 1, -1) == doctest::Approx(chan_sum(x, 1, 0)).epsilon(1e-14));
}

TEST_CASE("shift argument errors") {
  const Tensor f = Tensor::zeros({6, 4, 2, 2});
  CHECK_THROWS_AS(tsm_shift_frames(f, std::nullopt, ShiftSpec{}), ShapeError);
  CHECK_THROWS_AS(tsm_shift_frames(f, 4, ShiftSpec{}), ShapeError);
  CHECK_THROWS_AS(tsm_shift(Tensor::zeros({1, 4, 2, 2, 2}), ShiftSpec{{3, 4}, {0, 1}, true}), ShapeError);
  CHECK(Rational::parse("1/8") == Rational{1, 8});
  CHECK(Rational::parse("2/16") == Rational{1, 8});
  CHECK(Rational::parse("0").num == 0);
  CHECK_THROWS(Rational::parse("1/0"));
  CHECK_THROWS(Rational::parse("x"));
}

TEST_CASE("matched mid channels for four in, eight out, k three") {
  const Conv2Plus1DSpec spec{4, 8, 3, std::nullopt};
  CHECK(spec.mid() == 14);
  CHECK(spec.factored_weight_count() == 840);
  CHECK(spec.full3d_weight_count() == 864);
}

TEST_CASE("factored weights never exceed full 3D weights") {
  int checked = 0;
  for (Index k : {3, 5})
    for (Index ci = 1; ci <= 32; ++ci)
      for (Index co = 1; co <= 32; ++co) {
        const Conv2Plus1DSpec spec{ci, co, k, std::nullopt};
        // Spell the formula out independently of matched_mid_channels.
        const Index m = std::max<Index>(1, (k * k * k * ci * co) / (k * k * ci + k * co));
        REQUIRE(spec.mid() == m);
        CHECK(k * k * ci * m + k * m * co <= k * k * k * ci * co);
        ++checked;
      }
  CHECK(checked == 2 * 32 * 32);
}

TEST_CASE("conv2plus1d shapes and passthrough") {
  const Tensor x = oracle::random({2, 3, 4, 5, 5}, 8);
  Conv2Plus1DSpec spec{3, 3, 3, 3};
  // Single centre taps make both stages the identity.
  Tensor ws = Tensor::zeros({3, 3, 1, 3, 3});
  Tensor wt = Tensor::zeros({3, 3, 3, 1, 1});
  for (Index c = 0; c < 3; ++c) {
    ws.mutable_data()[(c * 3 + c) * 9 + 4] = 1.0;
    wt.mutable_data()[(c * 3 + c) * 3 + 1] = 1.0;
  }
  const Tensor y = conv2plus1d(x, spec, {ws, wt, {}, {}, nullptr, Activation::identity});
  CHECK(oracle::max_abs_diff(y.data(), x.data()) == 0.0);

  Conv2Plus1DSpec point{3, 6, 1, std::nullopt};
  const Tensor y1 = conv2plus1d(x, point,
                                {oracle::random({point.mid(), 3, 1, 1, 1}, 9),
                                 oracle::random({6, point.mid(), 1, 1, 1}, 10), {}, {}, nullptr, Activation::elu});
  CHECK(y1.shape() == Shape{2, 6, 4, 5, 5});

  Conv2Plus1DSpec even{3, 3, 2, std::nullopt};
  CHECK_THROWS_AS(even.validate(), ShapeError);
}

TEST_CASE("residual frames identities") {
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    const Shape s{rng.between(1, 3), rng.between(2, 8), rng.between(1, 5), rng.between(1, 5)};
    const Tensor x = oracle::random(s, 100 + i);
    const Tensor r = residual_frames(x);
    REQUIRE(r.shape() == Shape{s[0], s[1] - 1, s[2], s[3]});
    const Index hw = s[2] * s[3];
    for (Index c = 0; c < s[0]; ++c)
      for (Index t = 0; t + 1 < s[1]; ++t)
        for (Index j = 0; j < hw; ++j)
          REQUIRE(r.data()[(c * (s[1] - 1) + t) * hw + j] ==
                  x.data()[(c * s[1] + t + 1) * hw + j] - x.data()[(c * s[1] + t) * hw + j]);

    // reverse then difference == negated, reversed difference
    const Tensor lhs = residual_frames(reverse_clip(x));
    const Tensor rhs = reverse_clip(r);
    for (std::size_t k = 0; k < lhs.data().size(); ++k) REQUIRE(lhs.data()[k] == -rhs.data()[k]);

    // static clip
    std::vector<double> st(x.data().size());
    for (Index c = 0; c < s[0]; ++c)
      for (Index t = 0; t < s[1]; ++t)
        std::copy_n(x.data().data() + c * s[1] * hw, hw, st.data() + (c * s[1] + t) * hw);
    const Tensor z = residual_frames(Tensor(s, st));
    for (double v : z.data()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("residual frames of a ramp are ones") {
  std::vector<double> v;
  for (Index t = 0; t < 5; ++t)
    for (int j = 0; j < 6; ++j) v.push_back(static_cast<double>(t));
  const Tensor r = residual_frames(Tensor({1, 5, 2, 3}, v));
  for (double e : r.data()) CHECK(e == 1.0);
  CHECK_THROWS_AS(residual_frames(Tensor::zeros({1, 1, 2, 2})), ShapeError);
  CHECK(residual_frames(Tensor::zeros({2, 3, 4, 2, 2})).shape() == Shape{2, 3, 3, 2, 2});
}

TEST_CASE("lateral fuse shapes and gradient") {
  const Tensor fast = oracle::random({1, 2, 4, 2, 2}, 13);
  const Tensor slow = oracle::random({1, 3, 4, 2, 2}, 14);
  Tensor w = Tensor::zeros({4, 2, 5, 1, 1});
  const Tensor y = lateral_fuse(fast, slow, 1, w);
  CHECK(y.shape() == Shape{1, 7, 4, 2, 2});

  const Tensor f16 = oracle::random({1, 2, 16, 2, 2}, 15);
  const Tensor s4 = oracle::random({1, 3, 4, 2, 2}, 16);
  CHECK(lateral_fuse(f16, s4, 4, w).shape() == Shape{1, 7, 4, 2, 2});
  CHECK_THROWS_AS(lateral_fuse(oracle::random({1, 2, 15, 2, 2}, 1), s4, 4, w), ShapeError);

  const double err = gradcheck(
      [](const std::vector<Tensor>& in) { return lateral_fuse(in[0], in[1], 4, in[2], in[3]); },
      {{2, 2, 8, 2, 2}, {2, 3, 2, 2, 2}, {4, 2, 5, 1, 1}, {4}}, 17);
  CHECK(err < 1e-4);
}
