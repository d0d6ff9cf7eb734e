#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lspst/ops.hpp"
#include "lspst/tensor.hpp"

using namespace lspst;
using gradcheck::twin_from;
using gradcheck::twin_randn;
using DTape = BasicTape<double>;
using DTensor = BasicTensor<double>;

namespace {

Conv2dSpec same_pad(int kh, int kw, int dilation = 1, int groups = 1) {
  Conv2dSpec sp;
  sp.dilation = dilation;
  sp.groups = groups;
  sp.pad_h = dilation * (kh - 1) / 2;
  sp.pad_w = dilation * (kw - 1) / 2;
  return sp;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
  Tape tape;
  Tensor x(Shape{1, 1, 3, 3}, 1.0f);
  Tensor w = Tensor::from_data(Shape{1, 1, 1, 1}, {1.0f});
  Tensor y = conv2d(tape, x, w, Conv2dSpec{});
  REQUIRE(y.shape() == x.shape());
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d hand sums with padding") {
  Tape tape;
  Tensor x = Tensor::from_data(Shape{1, 1, 1, 5}, {1, 2, 3, 4, 5});
  Tensor w = Tensor::from_data(Shape{1, 1, 1, 3}, {1, 1, 1});
  Conv2dSpec sp;
  sp.pad_w = 1;
  Tensor y = conv2d(tape, x, w, sp);
  const std::vector<float> want{3, 6, 9, 12, 9};
  REQUIRE(y.numel() == 5);
  for (int i = 0; i < 5; ++i) CHECK(y.data()[i] == doctest::Approx(want[i]));
}

TEST_CASE("conv2d rejects bad shapes with a report") {
  Tape tape;
  Tensor x(Shape{1, 3, 4, 4});
  Tensor w(Shape{2, 2, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(tape, x, w, same_pad(3, 3)),
                       doctest::Contains("conv2d"), std::invalid_argument);
  Tensor w2(Shape{2, 3, 3, 3});
  Conv2dSpec bad = same_pad(3, 3);
  bad.groups = 2;  // does not divide c_in = 3
  CHECK_THROWS_AS(conv2d(tape, x, w2, bad), std::invalid_argument);
  Tensor wbig(Shape{1, 3, 9, 9});
  CHECK_THROWS_AS(conv2d(tape, x, wbig, Conv2dSpec{}),
                  std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = twin_randn(Shape{2, 3, 8, 8}, rng);
    auto w = twin_randn(Shape{4, 3, 3, 3}, rng, 0.5);
    auto b = twin_randn(Shape{1, 4, 1, 1}, rng, 0.5);
    const Conv2dSpec sp = same_pad(3, 3);
    auto rep = gradcheck::check(
        [&](Tape& t) {
          return reduce(t, conv2d(t, x.f, w.f, &b.f, sp), Reduce::sum);
        },
        [&](DTape& t) {
          return reduce(t, conv2d(t, x.d, w.d, &b.d, sp), Reduce::sum);
        },
        {x, w, b});
    CHECK(rep.max_rel_err < 1e-3);
    CHECK(rep.forward_gap < 1e-5);
  }
}

TEST_CASE("conv2d gradients: strided, dilated, grouped") {
  Rng rng(99);
  auto x = twin_randn(Shape{1, 4, 9, 9}, rng);
  auto w = twin_randn(Shape{4, 1, 3, 3}, rng, 0.5);  // depthwise
  Conv2dSpec sp = same_pad(3, 3, 2, 4);
  sp.stride = 2;
  auto rep = gradcheck::check(
      [&](Tape& t) {
        return reduce(t, conv2d(t, x.f, w.f, sp), Reduce::sum);
      },
      [&](DTape& t) {
        return reduce(t, conv2d(t, x.d, w.d, sp), Reduce::sum);
      },
      {x, w});
  CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("maxpool2d window max and errors") {
  Tape tape;
  Tensor x = Tensor::from_data(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = maxpool2d(tape, x, 2);
  REQUIRE(y.numel() == 1);
  CHECK(y.data()[0] == 4.0f);
  Tensor odd(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(maxpool2d(tape, odd, 2), std::invalid_argument);
}

TEST_CASE("maxpool of nearest upsample is the identity") {
  Rng rng(5);
  for (int s : {2, 4}) {
    for (uint64_t seed = 0; seed < 3; ++seed) {
      Tape tape;
      Tensor x = Tensor::randn(Shape{2, 3, 4, 5}, rng);
      Tensor y = maxpool2d(tape, upsample_nearest(tape, x, s), s);
      REQUIRE(y.shape() == x.shape());
      for (size_t i = 0; i < x.data().size(); ++i)
        CHECK(y.data()[i] == x.data()[i]);
    }
  }
}

TEST_CASE("maxpool2d gradient routes to the argmax") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = gradcheck::twin_separated(Shape{2, 2, 4, 4}, rng);
    auto rep = gradcheck::check(
        [&](Tape& t) { return reduce(t, maxpool2d(t, x.f, 2), Reduce::sum); },
        [&](DTape& t) { return reduce(t, maxpool2d(t, x.d, 2), Reduce::sum); },
        {x});
    CHECK(rep.max_rel_err < 1e-3);
  }
}

TEST_CASE("upsample_nearest block replication") {
  Tape tape;
  Tensor x = Tensor::from_data(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y1 = upsample_nearest(tape, x, 1);
  for (size_t i = 0; i < 4; ++i) CHECK(y1.data()[i] == x.data()[i]);
  Tensor y = upsample_nearest(tape, x, 2);
  const std::vector<float> want{1, 1, 2, 2, 1, 1, 2, 2,
                                3, 3, 4, 4, 3, 3, 4, 4};
  for (size_t i = 0; i < want.size(); ++i) CHECK(y.data()[i] == want[i]);
  CHECK_THROWS_AS(upsample_nearest(tape, x, 0), std::invalid_argument);
}

TEST_CASE("upsample_nearest gradient of sum is factor squared") {
  Tape tape;
  Rng rng(3);
  Tensor x = Tensor::randn(Shape{1, 2, 3, 3}, rng, 1.0, true);
  Tensor loss = reduce(tape, upsample_nearest(tape, x, 3), Reduce::sum);
  tape.backward(loss);
  for (float g : x.grad()) CHECK(g == 9.0f);
}

TEST_CASE("group_norm constant input and affine dominance") {
  Tape tape;
  Tensor x(Shape{2, 4, 3, 3}, 7.5f);
  Tensor gamma(Shape{1, 4, 1, 1}, 1.0f);
  Tensor beta(Shape{1, 4, 1, 1}, 0.0f);
  Tensor y = group_norm(tape, x, 2, gamma, beta);
  for (float v : y.data()) CHECK(std::abs(v) < 1e-6f);

  Tensor g0(Shape{1, 4, 1, 1}, 0.0f);
  Tensor b5(Shape{1, 4, 1, 1}, 5.0f);
  Rng rng(9);
  Tensor y2 = group_norm(tape, Tensor::randn(Shape{2, 4, 3, 3}, rng), 2, g0,
                         b5);
  for (float v : y2.data()) CHECK(v == 5.0f);

  CHECK_THROWS_AS(group_norm(tape, x, 3, gamma, beta), std::invalid_argument);
}

TEST_CASE("group_norm standardizes each group") {
  Rng rng(17);
  Tape tape;
  Tensor x = Tensor::randn(Shape{2, 16, 6, 6}, rng, 3.0);
  Tensor gamma(Shape{1, 16, 1, 1}, 1.0f);
  Tensor beta(Shape{1, 16, 1, 1}, 0.0f);
  const int groups = 2;
  Tensor y = group_norm(tape, x, groups, gamma, beta);
  const int cpg = 16 / groups;
  const size_t plane = 36;
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < groups; ++g) {
      double s = 0, s2 = 0;
      for (int cc = 0; cc < cpg; ++cc)
        for (size_t i = 0; i < plane; ++i) {
          const double v = y.at(n, g * cpg + cc, int(i / 6), int(i % 6));
          s += v;
          s2 += v * v;
        }
      const double m = double(cpg) * plane;
      const double mean = s / m;
      const double var = s2 / m - mean * mean;
      CHECK(std::abs(mean) <= 1e-5);
      CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("group_norm gradients match finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = twin_randn(Shape{2, 8, 4, 4}, rng);
    auto gm = twin_randn(Shape{1, 8, 1, 1}, rng, 0.5);
    auto bt = twin_randn(Shape{1, 8, 1, 1}, rng, 0.5);
    auto rep = gradcheck::check(
        [&](Tape& t) {
          // weight the output so the gradient is not uniform
          auto y = group_norm(t, x.f, 2, gm.f, bt.f);
          return reduce(t, mul(t, y, y), Reduce::sum);
        },
        [&](DTape& t) {
          auto y = group_norm(t, x.d, 2, gm.d, bt.d);
          return reduce(t, mul(t, y, y), Reduce::sum);
        },
        {x, gm, bt});
    CHECK(rep.max_rel_err < 2e-3);
  }
}

TEST_CASE("activation fixed points and saturation") {
  Tape tape;
  Tensor x = Tensor::from_data(Shape{1, 1, 1, 3}, {0.0f, 20.0f, -20.0f});
  Tensor s = activation(tape, x, Act::silu);
  CHECK(s.data()[0] == 0.0f);
  CHECK(std::abs(s.data()[1] - 20.0f) < 1e-6f);
  Tensor g = activation(tape, x, Act::gelu);
  CHECK(g.data()[0] == 0.0f);
  Tensor sg = activation(tape, x, Act::sigmoid);
  CHECK(sg.data()[0] == 0.5f);
}

TEST_CASE("activation gradients match finite differences") {
  for (auto kind : {Act::gelu, Act::silu, Act::sigmoid}) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      auto x = twin_randn(Shape{2, 3, 4, 4}, rng);
      auto rep = gradcheck::check(
          [&](Tape& t) {
            return reduce(t, activation(t, x.f, kind), Reduce::sum);
          },
          [&](DTape& t) {
            return reduce(t, activation(t, x.d, kind), Reduce::sum);
          },
          {x}, 1e-3);  // tight tolerance wants a small truncation term
      CHECK(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("ewise identities and errors") {
  Rng rng(4);
  Tape tape;
  Tensor x = Tensor::randn(Shape{1, 2, 3, 3}, rng);
  Tensor ones(x.shape(), 1.0f);
  Tensor zeros(x.shape(), 0.0f);
  Tensor m = mul(tape, x, ones);
  Tensor a = add(tape, x, zeros);
  for (size_t i = 0; i < x.data().size(); ++i) {
    CHECK(m.data()[i] == x.data()[i]);
    CHECK(a.data()[i] == x.data()[i]);
  }
  Tensor other(Shape{1, 2, 3, 4});
  CHECK_THROWS_AS(add(tape, x, other), std::invalid_argument);
}

TEST_CASE("ewise and channel_scale gradients") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto a = twin_randn(Shape{2, 3, 4, 4}, rng);
    auto b = twin_randn(Shape{2, 3, 4, 4}, rng);
    for (auto kind : {Ewise::add, Ewise::sub, Ewise::mul}) {
      auto rep = gradcheck::check(
          [&](Tape& t) {
            return reduce(t, ewise(t, a.f, b.f, kind), Reduce::sum);
          },
          [&](DTape& t) {
            return reduce(t, ewise(t, a.d, b.d, kind), Reduce::sum);
          },
          {a, b});
      CHECK(rep.max_rel_err < 1e-4);
    }
    // div against an offset denominator to stay away from zero
    auto den = twin_from(Shape{1, 1, 2, 2}, {1.5, 2.0, -1.7, 2.5});
    auto num = twin_randn(Shape{1, 1, 2, 2}, rng);
    auto repd = gradcheck::check(
        [&](Tape& t) { return reduce(t, div(t, num.f, den.f), Reduce::sum); },
        [&](DTape& t) { return reduce(t, div(t, num.d, den.d), Reduce::sum); },
        {num, den}, 1e-3);
    CHECK(repd.max_rel_err < 1e-3);

    auto x = twin_randn(Shape{2, 4, 3, 3}, rng);
    auto lam = twin_randn(Shape{1, 4, 1, 1}, rng);
    auto reps = gradcheck::check(
        [&](Tape& t) {
          return reduce(t, channel_scale(t, x.f, lam.f), Reduce::sum);
        },
        [&](DTape& t) {
          return reduce(t, channel_scale(t, x.d, lam.d), Reduce::sum);
        },
        {x, lam});
    CHECK(reps.max_rel_err < 1e-4);
  }
}

TEST_CASE("channel_scale zero lambda and explicit lambda gradient") {
  Rng rng(8);
  Tape tape;
  Tensor x = Tensor::randn(Shape{2, 3, 4, 4}, rng, 1.0, true);
  Tensor lam(Shape{1, 3, 1, 1}, 0.0f);
  lam.set_requires_grad(true);
  Tensor y = channel_scale(tape, x, lam);
  for (float v : y.data()) CHECK(v == 0.0f);
  Tensor loss = reduce(tape, y, Reduce::sum);
  tape.backward(loss);
  // d loss / d lambda_c = sum over that channel of x
  for (int c = 0; c < 3; ++c) {
    double want = 0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 16; ++i) want += x.at(n, c, i / 4, i % 4);
    CHECK(lam.grad()[c] == doctest::Approx(want).epsilon(1e-4));
  }
}

TEST_CASE("spatial_scale gradients") {
  Rng rng(21);
  auto x = twin_randn(Shape{2, 3, 4, 4}, rng);
  auto g = twin_randn(Shape{2, 1, 4, 4}, rng);
  auto rep = gradcheck::check(
      [&](Tape& t) {
        return reduce(t, spatial_scale(t, x.f, g.f), Reduce::sum);
      },
      [&](DTape& t) {
        return reduce(t, spatial_scale(t, x.d, g.d), Reduce::sum);
      },
      {x, g});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("concat and split are exact inverses") {
  Rng rng(11);
  Tape tape;
  Tensor x = Tensor::randn(Shape{2, 6, 4, 4}, rng);
  auto parts = split_channels(tape, x, {2, 2, 2});
  Tensor back = concat_channels(tape, parts);
  REQUIRE(back.shape() == x.shape());
  for (size_t i = 0; i < x.data().size(); ++i)
    CHECK(back.data()[i] == x.data()[i]);

  Tensor small = Tensor::from_data(Shape{1, 3, 1, 1}, {10, 20, 30});
  auto sp = split_channels(tape, small, {1, 2});
  CHECK(sp[0].data()[0] == 10.0f);
  CHECK(sp[1].data()[0] == 20.0f);
  CHECK(sp[1].data()[1] == 30.0f);

  Tensor mismatch(Shape{2, 2, 3, 3});
  CHECK_THROWS_AS(concat_channels(tape, {x, mismatch}),
                  std::invalid_argument);
  CHECK_THROWS_AS(split_channels(tape, x, {2, 2}), std::invalid_argument);
}

TEST_CASE("split/concat gradients route to the right slices") {
  Rng rng(12);
  auto x = twin_randn(Shape{2, 6, 3, 3}, rng);
  auto rep = gradcheck::check(
      [&](Tape& t) {
        auto parts = split_channels(t, x.f, {2, 4});
        auto y = concat_channels(t, {parts[1], parts[0]});
        return reduce(t, mul(t, y, y), Reduce::sum);
      },
      [&](DTape& t) {
        auto parts = split_channels(t, x.d, {2, 4});
        auto y = concat_channels(t, {parts[1], parts[0]});
        return reduce(t, mul(t, y, y), Reduce::sum);
      },
      {x});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("split_batch mirrors split_channels on the batch axis") {
  Rng rng(13);
  Tape tape;
  Tensor x = Tensor::randn(Shape{4, 2, 3, 3}, rng);
  auto parts = split_batch(tape, x, {1, 3});
  CHECK(parts[0].shape() == Shape{1, 2, 3, 3});
  CHECK(parts[1].shape() == Shape{3, 2, 3, 3});
  CHECK(parts[1].at(0, 0, 0, 0) == x.at(1, 0, 0, 0));

  auto tw = twin_randn(Shape{3, 2, 2, 2}, rng);
  auto rep = gradcheck::check(
      [&](Tape& t) {
        auto p = split_batch(t, tw.f, {2, 1});
        return reduce(t, mul(t, p[0], p[0]), Reduce::sum);
      },
      [&](DTape& t) {
        auto p = split_batch(t, tw.d, {2, 1});
        return reduce(t, mul(t, p[0], p[0]), Reduce::sum);
      },
      {tw});
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("channel_pool reductions") {
  Tape tape;
  Tensor x = Tensor::from_data(Shape{1, 2, 1, 1}, {1, 3});
  Tensor m = channel_pool(tape, x, Pool::mean);
  Tensor M = channel_pool(tape, x, Pool::max);
  CHECK(m.data()[0] == 2.0f);
  CHECK(M.data()[0] == 3.0f);

  Tensor single = Tensor::from_data(Shape{1, 1, 2, 1}, {4, 5});
  for (auto kind : {Pool::mean, Pool::max}) {
    Tensor y = channel_pool(tape, single, kind);
    CHECK(y.data()[0] == 4.0f);
    CHECK(y.data()[1] == 5.0f);
  }
}

TEST_CASE("channel_pool gradients (max routes to argmax channel)") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = gradcheck::twin_separated(Shape{2, 4, 3, 3}, rng);
    for (auto kind : {Pool::mean, Pool::max}) {
      auto rep = gradcheck::check(
          [&](Tape& t) {
            return reduce(t, channel_pool(t, x.f, kind), Reduce::sum);
          },
          [&](DTape& t) {
            return reduce(t, channel_pool(t, x.d, kind), Reduce::sum);
          },
          {x});
      CHECK(rep.max_rel_err < 1e-3);
    }
  }
}

TEST_CASE("backward on linear and quadratic losses") {
  Rng rng(2);
  {
    Tape tape;
    Tensor x = Tensor::randn(Shape{2, 3, 4, 4}, rng, 1.0, true);
    Tensor loss = reduce(tape, x, Reduce::sum);
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == 1.0f);
  }
  {
    Tape tape;
    Tensor x = Tensor::randn(Shape{1, 2, 3, 3}, rng, 1.0, true);
    Tensor loss = reduce(tape, mul(tape, x, x), Reduce::sum);
    tape.backward(loss);
    for (size_t i = 0; i < x.data().size(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]));
  }
}

TEST_CASE("backward rejects non-scalar losses") {
  Tape tape;
  Tensor x(Shape{1, 1, 2, 2}, 1.0f, true);
  Tensor y = add(tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("repeated backward accumulates leaf gradients") {
  Rng rng(6);
  Tape tape;
  Tensor x = Tensor::randn(Shape{1, 1, 3, 3}, rng, 1.0, true);
  Tensor loss = reduce(tape, mul(tape, x, x), Reduce::sum);
  tape.backward(loss);
  std::vector<float> once(x.grad().begin(), x.grad().end());
  tape.backward(loss);
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0f * once[i]));
  CHECK(loss.grad()[0] == 1.0f);  // the loss' own gradient stays 1
}

TEST_CASE("composite conv -> group_norm -> silu -> sum finite differences") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto x = twin_randn(Shape{2, 3, 6, 6}, rng);
    auto w = twin_randn(Shape{8, 3, 3, 3}, rng, 0.4);
    auto gm = twin_randn(Shape{1, 8, 1, 1}, rng, 0.3);
    auto bt = twin_randn(Shape{1, 8, 1, 1}, rng, 0.3);
    const Conv2dSpec sp = same_pad(3, 3);
    auto rep = gradcheck::check(
        [&](Tape& t) {
          auto y = conv2d(t, x.f, w.f, sp);
          y = group_norm(t, y, 2, gm.f, bt.f);
          y = silu(t, y);
          return reduce(t, y, Reduce::sum);
        },
        [&](DTape& t) {
          auto y = conv2d(t, x.d, w.d, sp);
          y = group_norm(t, y, 2, gm.d, bt.d);
          y = silu(t, y);
          return reduce(t, y, Reduce::sum);
        },
        {x, w, gm, bt});
    CHECK(rep.max_rel_err < 2e-3);
  }
}

TEST_CASE("forward passes stay finite on finite inputs") {
  Rng rng(33);
  Tape tape;
  Tensor x = Tensor::randn(Shape{2, 4, 8, 8}, rng, 10.0);
  Tensor w = Tensor::randn(Shape{8, 4, 3, 3}, rng, 2.0);
  Tensor gm(Shape{1, 8, 1, 1}, 1.0f);
  Tensor bt(Shape{1, 8, 1, 1}, 0.0f);
  auto y = conv2d(tape, x, w, same_pad(3, 3));
  y = group_norm(tape, y, 4, gm, bt);
  y = gelu(tape, y);
  y = maxpool2d(tape, y, 2);
  y = upsample_nearest(tape, y, 2);
  CHECK(all_finite(y));
}

TEST_CASE("reduce mean matches sum scaled") {
  Rng rng(14);
  Tape tape;
  Tensor x = Tensor::randn(Shape{2, 2, 3, 3}, rng);
  Tensor s = reduce(tape, x, Reduce::sum);
  Tensor m = reduce(tape, x, Reduce::mean);
  CHECK(m.data()[0] == doctest::Approx(s.data()[0] / float(x.numel())));
}

TEST_CASE("affine op and its gradient") {
  Rng rng(15);
  auto x = twin_randn(Shape{1, 2, 3, 3}, rng);
  auto rep = gradcheck::check(
      [&](Tape& t) {
        return reduce(t, affine(t, x.f, 2.5f, -1.0f), Reduce::sum);
      },
      [&](DTape& t) {
        return reduce(t, affine(t, x.d, 2.5, -1.0), Reduce::sum);
      },
      {x});
  CHECK(rep.max_rel_err < 1e-6);
  Tape tape;
  Tensor y = affine(tape, x.f, 0.0f, 3.0f);
  for (float v : y.data()) CHECK(v == 3.0f);
}
