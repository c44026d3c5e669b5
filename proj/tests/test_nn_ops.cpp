#include <doctest.h>

#include <numeric>

#include "hcf/gradcheck.hpp"
#include "hcf/nn_ops.hpp"
#include "oracles.hpp"

using namespace hcf;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, bool grad = false) {
  return Tensor::from_data(s, oracle::random_values(s.numel(), seed), grad);
}

}  // namespace

TEST_CASE("conv2d matches the direct loop for mixed geometry") {
  struct Case {
    std::size_t n, c, h, w, o, kh, kw;
    ConvGeometry g;
  };
  const Case cases[] = {
      {2, 3, 7, 6, 4, 3, 3, ConvGeometry::uniform(1, 1, 1, 1)},
      {1, 4, 9, 9, 6, 3, 2, {2, 1, 1, 0, 2, 1, 2}},
      {1, 6, 8, 5, 6, 3, 3, ConvGeometry::uniform(1, 2, 2, 6)},
      {3, 2, 5, 5, 3, 1, 1, ConvGeometry::uniform(1, 0, 1, 1)},
      {1, 4, 6, 7, 2, 5, 3, {3, 2, 2, 1, 1, 1, 2}},
  };
  std::uint64_t seed = 10;
  for (const auto& k : cases) {
    const Tensor x = random_tensor(Shape{k.n, k.c, k.h, k.w}, seed++);
    const Tensor w = random_tensor(Shape{k.o, k.c / k.g.groups, k.kh, k.kw}, seed++);
    const Tensor b = random_tensor(Shape{k.o}, seed++);
    const Tensor y = conv2d(x, w, b, k.g);
    std::size_t oh = 0, ow = 0;
    const auto ref = oracle::conv2d(oracle::values(x), k.n, k.c, k.h, k.w, oracle::values(w), k.o, k.kh, k.kw,
                                    oracle::values(b),
                                    {k.g.stride_h, k.g.stride_w, k.g.pad_h, k.g.pad_w, k.g.dilation_h,
                                     k.g.dilation_w, k.g.groups},
                                    oh, ow);
    REQUIRE(y.shape() == Shape{k.n, k.o, oh, ow});
    CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Tensor x = random_tensor(Shape{2, 4, 6, 5}, 1, true);
  Tensor w = random_tensor(Shape{4, 2, 3, 3}, 2, true);
  Tensor b = random_tensor(Shape{4}, 3, true);
  const ConvGeometry g{2, 1, 1, 2, 1, 2, 2};
  Tensor leaves[] = {x, w, b};
  const Tensor r = random_tensor(conv2d(x, w, b, g).shape(), 4);
  const auto rep = finite_difference_check([&] { return sum(mul(conv2d(x, w, b, g), r)); }, leaves, {.eps = 1e-5});
  CHECK(rep.max_relative_error < 1e-7);
}

TEST_CASE("transposed conv matches the scatter loop and is the adjoint of conv") {
  const Tensor x = random_tensor(Shape{2, 4, 3, 4}, 5);
  const Tensor w = random_tensor(Shape{4, 3, 2, 2}, 6);
  const Tensor b = random_tensor(Shape{3}, 7);
  const ConvGeometry g = ConvGeometry::uniform(2, 0, 1, 1);
  const Tensor y = transposed_conv2d(x, w, b, g);
  std::size_t oh = 0, ow = 0;
  const auto ref = oracle::transposed_conv2d(oracle::values(x), 2, 4, 3, 4, oracle::values(w), 3, 2, 2,
                                             oracle::values(b), {2, 2, 0, 0, 1, 1, 1}, oh, ow);
  REQUIRE(y.shape() == Shape{2, 3, oh, ow});
  CHECK(oh == 6);
  CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);

  // <conv(z), x> == <z, tconv(x)> for the same weights, grouped and padded.
  const ConvGeometry g2{2, 1, 1, 1, 2, 1, 2};
  const Tensor wg = random_tensor(Shape{4, 2, 3, 3}, 8);  // conv: 4 out, 4 in (2 groups)
  const Tensor z = random_tensor(Shape{1, 4, 9, 8}, 9);
  const Tensor cz = conv2d(z, wg, Tensor(), g2);
  const Tensor xx = random_tensor(cz.shape(), 10);
  const Tensor tx = transposed_conv2d(xx, wg, Tensor(), g2);
  REQUIRE(tx.shape() == z.shape());
  const double lhs = sum(mul(cz, xx)).item(), rhs = sum(mul(z, tx)).item();
  CHECK(std::abs(lhs - rhs) < 1e-11);
}

TEST_CASE("bilinear 2x upsampling uses quarter weights") {
  const Tensor x = Tensor::from_data(Shape{1, 1, 2, 1}, {1.0, 5.0});
  const Tensor y = bilinear_resize(x, 4, 1);
  // Rows of the 4x2 interpolation matrix: [1,0], [.75,.25], [.25,.75], [0,1].
  CHECK(oracle::values(y) == oracle::Vec{1.0, 2.0, 4.0, 5.0});
  const Tensor r = random_tensor(Shape{2, 3, 5, 7}, 11);
  CHECK(oracle::max_abs_diff(bilinear_resize(r, 8, 3).data(), oracle::bilinear(oracle::values(r), 6, 5, 7, 8, 3)) <
        1e-12);
  CHECK(bitwise_equal(bilinear_resize(r, 5, 7), r));
}

TEST_CASE("bilinear resize gradients match finite differences") {
  Tensor x = random_tensor(Shape{1, 2, 3, 4}, 12, true);
  const Tensor r = random_tensor(Shape{1, 2, 7, 5}, 13);
  Tensor leaves[] = {x};
  CHECK(finite_difference_check([&] { return sum(mul(bilinear_resize(x, 7, 5), r)); }, leaves, {.eps = 1e-5})
            .max_relative_error < 1e-7);
}

TEST_CASE("max pooling matches brute force and routes gradient to the argmax") {
  const Tensor x = random_tensor(Shape{2, 3, 6, 4}, 14, true);
  const Tensor y = max_pool2d(x);
  REQUIRE(y.shape() == Shape{2, 3, 3, 2});
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double m = -INFINITY;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) m = std::max(m, x.data()[p * 24 + (2 * i + u) * 4 + 2 * j + v]);
        CHECK(y.data()[p * 6 + i * 2 + j] == m);
      }
  backward(sum(y));
  const auto g = x.grad();
  CHECK(std::accumulate(g.begin(), g.end(), 0.0) == 36.0);
  CHECK_THROWS_AS(max_pool2d(random_tensor(Shape{1, 1, 5, 4}, 1)), ShapeError);
}

TEST_CASE("softmax rows sum to one") {
  const Tensor x = scale(random_tensor(Shape{2, 3, 5, 7}, 15), 30.0);
  for (std::size_t axis = 0; axis < 4; ++axis) {
    const Tensor s = sum_axis(softmax(x, axis), axis);
    for (double v : s.data()) CHECK(std::abs(v - 1.0) < 1e-12);
  }
  Tensor z = random_tensor(Shape{2, 6}, 16, true);
  const Tensor r = random_tensor(Shape{2, 6}, 17);
  Tensor leaves[] = {z};
  CHECK(finite_difference_check([&] { return sum(mul(softmax(z, 1), r)); }, leaves, {.eps = 1e-5})
            .max_relative_error < 1e-7);
}

TEST_CASE("train-mode batch norm standardizes each channel") {
  const Tensor x = add(scale(random_tensor(Shape{3, 4, 5, 5}, 18), 7.0), Tensor::scalar(2.5));
  BatchNormState bn = BatchNormState::make(4);
  const Tensor y = batch_norm(x, bn, Mode::kTrain);
  const auto ref = oracle::batch_norm_train(oracle::values(x), 3, 4, 25, {1, 1, 1, 1}, {0, 0, 0, 0});
  CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 25; ++k) mean += y.data()[(n * 4 + c) * 25 + k];
    mean /= 75.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 25; ++k) var += std::pow(y.data()[(n * 4 + c) * 25 + k] - mean, 2);
    var /= 75.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batch norm eval mode uses running statistics only") {
  BatchNormState bn = BatchNormState::make(2);
  const Tensor x = random_tensor(Shape{4, 2, 3, 3}, 19);
  const Tensor fresh = batch_norm(x, bn, Mode::kEval);
  // Fresh running stats are mean 0, var 1.
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(fresh.data()[i] == doctest::Approx(x.data()[i] / std::sqrt(1 + 1e-5)));
  batch_norm(x, bn, Mode::kTrain);
  double mean0 = 0.0;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 9; ++k) mean0 += x.data()[(n * 2) * 9 + k];
  mean0 /= 36.0;
  CHECK(bn.running_mean.data()[0] == doctest::Approx(0.1 * mean0).epsilon(1e-12));
  const Tensor a = batch_norm(x, bn, Mode::kEval), b = batch_norm(x, bn, Mode::kEval);
  CHECK(bitwise_equal(a, b));
}

TEST_CASE("calibrate-mode batch norm normalizes like train mode and sums batch moments") {
  const Tensor x = random_tensor(Shape{3, 2, 4, 4}, 23);
  BatchNormState train_bn = BatchNormState::make(2), cal_bn = BatchNormState::make(2);
  for (auto& v : cal_bn.running_var.mutable_data()) v = 0.0;
  CHECK(bitwise_equal(batch_norm(x, cal_bn, Mode::kCalibrate), batch_norm(x, train_bn, Mode::kTrain)));
  batch_norm(x, cal_bn, Mode::kCalibrate);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 16; ++k) mean += x.data()[(n * 2 + c) * 16 + k];
    mean /= 48.0;
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 16; ++k) sq += std::pow(x.data()[(n * 2 + c) * 16 + k] - mean, 2);
    CHECK(cal_bn.running_mean.data()[c] == doctest::Approx(2.0 * mean).epsilon(1e-12));
    CHECK(cal_bn.running_var.data()[c] == doctest::Approx(2.0 * sq / 47.0).epsilon(1e-12));
  }
}

TEST_CASE("batch norm gradients match finite differences") {
  Tensor x = random_tensor(Shape{2, 3, 3, 3}, 20, true);
  BatchNormState bn = BatchNormState::make(3);
  const Tensor r = random_tensor(x.shape(), 21);
  Tensor leaves[] = {x, bn.gamma, bn.beta};
  CHECK(finite_difference_check([&] { return sum(mul(batch_norm(x, bn, Mode::kTrain), r)); }, leaves, {.eps = 1e-5})
            .max_relative_error < 1e-6);
}

TEST_CASE("patch unfold and fold are inverse") {
  const Tensor x = random_tensor(Shape{2, 3, 8, 4}, 22);
  const Tensor u = unfold_patches(x, 4);
  REQUIRE(u.shape() == Shape{2, 3, 16, 2});
  // Patch element (u, v) = (1, 3) of patch (i, j) = (1, 0).
  CHECK(u.at({1, 2, 7, 1}) == x.at({1, 2, 5, 3}));
  CHECK(bitwise_equal(fold_patches(u, 4, 8, 4), x));
}

TEST_CASE("dropout is seeded, inverted, and off in eval mode") {
  const Tensor x = Tensor::create(Shape{1, 4, 16, 16}, init::Ones{});
  CHECK(bitwise_equal(dropout(x, 0.5, 1, Mode::kEval), x));
  CHECK(bitwise_equal(dropout(x, 0.5, 1, Mode::kCalibrate), x));
  CHECK(bitwise_equal(dropout(x, 0.0, 1, Mode::kTrain), x));
  const Tensor a = dropout(x, 0.25, 7, Mode::kTrain), b = dropout(x, 0.25, 7, Mode::kTrain);
  CHECK(bitwise_equal(a, b));
  std::size_t zeros = 0;
  for (double v : a.data()) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
    zeros += v == 0.0;
  }
  CHECK(zeros > 150);
  CHECK(zeros < 370);
  CHECK_FALSE(bitwise_equal(a, dropout(x, 0.25, 8, Mode::kTrain)));
}

TEST_CASE("pad and crop invert each other") {
  const Tensor x = random_tensor(Shape{1, 2, 5, 3}, 23);
  const Tensor p = pad2d(x, 3, 1);
  REQUIRE(p.shape() == Shape{1, 2, 8, 4});
  CHECK(p.at({0, 1, 7, 3}) == 0.0);
  CHECK(bitwise_equal(crop2d(p, 5, 3), x));
}

TEST_CASE("MAC counter records conv work") {
  const Tensor x = random_tensor(Shape{1, 4, 6, 6}, 24);
  const Tensor w = random_tensor(Shape{8, 2, 3, 3}, 25);
  MacCounter counter;
  conv2d(x, w, Tensor(), ConvGeometry::uniform(1, 1, 1, 2));
  CHECK(counter.total() == 8u * 36u * 9u * 2u);
}
