#include <doctest.h>

#include <cmath>

#include "hcf/gradcheck.hpp"
#include "hcf/losses.hpp"
#include "hcf/metrics.hpp"
#include "oracles.hpp"

using namespace hcf;

namespace {

Tensor random_mask(const Shape& s, std::uint64_t seed, double density) {
  auto v = oracle::random_values(s.numel(), seed, 0.0, 1.0);
  for (auto& x : v) x = x < density ? 1.0 : 0.0;
  return Tensor::from_data(s, v);
}

double bce_oracle(const oracle::Vec& z, const oracle::Vec& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = oracle::sigmoid(z[i]);
    acc += -(y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p));
  }
  return acc / static_cast<double>(z.size());
}

double siou_oracle(const oracle::Vec& z, const oracle::Vec& y, std::size_t batch) {
  const std::size_t per = z.size() / batch;
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double i = 0.0, u = 0.0;
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) {
      const double p = oracle::sigmoid(z[k]);
      i += p * y[k];
      u += p + y[k] - p * y[k];
    }
    total += 1.0 - (i + 1e-6) / (u + 1e-6);
  }
  return total / static_cast<double>(batch);
}

double brute_iou(const std::vector<Tensor>& probs, const std::vector<Tensor>& masks) {
  double tp = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto c = oracle::pixel_counts(probs[i].data(), masks[i].data());
    tp += static_cast<double>(c.tp);
    p += static_cast<double>(c.p);
    t += static_cast<double>(c.t);
  }
  return tp / (t + p - tp);
}

double brute_niou(const std::vector<Tensor>& probs, const std::vector<Tensor>& masks) {
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto c = oracle::pixel_counts(probs[i].data(), masks[i].data());
    const double u = static_cast<double>(c.t + c.p - c.tp);
    sum += u == 0.0 ? 1.0 : static_cast<double>(c.tp) / u;
  }
  return sum / static_cast<double>(probs.size());
}

}  // namespace

TEST_CASE("bce and soft IoU match their formulas") {
  const Shape s{3, 1, 6, 5};
  const Tensor z = Tensor::from_data(s, oracle::random_values(s.numel(), 1, -6.0, 6.0));
  const Tensor y = random_mask(s, 2, 0.2);
  CHECK(std::abs(bce_loss(z, y).item() - bce_oracle(oracle::values(z), oracle::values(y))) < 1e-12);
  const double siou = soft_iou_loss(z, y).item();
  CHECK(std::abs(siou - siou_oracle(oracle::values(z), oracle::values(y), 3)) < 1e-12);
  CHECK(siou >= 0.0);
  CHECK(siou <= 1.0);
}

TEST_CASE("soft IoU hand cases") {
  // y = [1,1,0,0], p = [1,0,0,0]: intersection 1, union 2.
  const Tensor z = Tensor::from_data(Shape{1, 1, 2, 2}, {50.0, -50.0, -50.0, -50.0});
  const Tensor y = Tensor::from_data(Shape{1, 1, 2, 2}, {1.0, 1.0, 0.0, 0.0});
  CHECK(std::abs(soft_iou_loss(z, y).item() - 0.5) < 1e-6);

  const Tensor match = Tensor::from_data(Shape{1, 1, 2, 2}, {50.0, 50.0, -50.0, -50.0});
  CHECK(soft_iou_loss(match, y).item() < 1e-5);

  const Tensor empty = Tensor::create(Shape{1, 1, 2, 2}, init::Zeros{});
  const Tensor low = Tensor::create(Shape{1, 1, 2, 2}, init::Constant{-50.0});
  const double l = soft_iou_loss(low, empty).item();
  CHECK(std::isfinite(l));
  CHECK(l < 1e-6);
  CHECK(bce_loss(low, empty).item() < 1e-20);
}

TEST_CASE("loss errors") {
  const Tensor z = Tensor::create(Shape{1, 1, 2, 2});
  CHECK_THROWS_AS(bce_loss(z, Tensor::create(Shape{1, 1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(soft_iou_loss(z, Tensor::create(Shape{1, 1, 2, 2}, init::Constant{0.5})), DomainError);
  const Tensor logits[] = {z, z};
  const double one[] = {1.0};
  CHECK_THROWS_AS(deep_supervision_loss(logits, Tensor::create(Shape{1, 1, 2, 2}), one), ConfigError);
}

TEST_CASE("deep supervision sums weighted per-scale losses") {
  const Shape s{2, 1, 8, 8};
  const Tensor z = Tensor::from_data(s, oracle::random_values(s.numel(), 3, -3.0, 3.0));
  const Tensor y = random_mask(s, 4, 0.1);
  const double single = add(bce_loss(z, y), soft_iou_loss(z, y)).item();
  const std::vector<Tensor> same(5, z);
  const double lambdas[] = {1.0, 0.5, 0.25, 0.125, 0.0625};
  CHECK(std::abs(deep_supervision_loss(same, y, lambdas).item() - 1.9375 * single) < 1e-12);

  std::vector<Tensor> mixed = same;
  for (std::size_t i = 1; i < 5; ++i)
    mixed[i] = Tensor::from_data(s, oracle::random_values(s.numel(), 10 + i, -3.0, 3.0));
  const double only_first[] = {1.0, 0.0, 0.0, 0.0, 0.0};
  CHECK(std::abs(deep_supervision_loss(mixed, y, only_first).item() - single) < 1e-12);
}

TEST_CASE("loss gradients match finite differences") {
  const Shape s{2, 1, 5, 4};
  Tensor a = Tensor::from_data(s, oracle::random_values(s.numel(), 5, -2.0, 2.0), true);
  Tensor b = Tensor::from_data(s, oracle::random_values(s.numel(), 6, -2.0, 2.0), true);
  const Tensor y = random_mask(s, 7, 0.3);
  Tensor leaves[] = {a, b};
  const double lambdas[] = {1.0, 0.5};
  const auto rep = finite_difference_check(
      [&] {
        const Tensor logits[] = {a, b};
        return deep_supervision_loss(logits, y, lambdas);
      },
      leaves, {.eps = 1e-6});
  CHECK(rep.max_relative_error < 1e-6);
}

TEST_CASE("IoU and nIoU equal brute-force pixel counting") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 4;
    std::vector<Tensor> probs, masks;
    for (std::size_t i = 0; i < n; ++i) {
      probs.push_back(Tensor::from_data(Shape{1, 9, 7}, oracle::random_values(63, 100 * trial + i, 0.0, 1.0)));
      masks.push_back(random_mask(Shape{1, 9, 7}, 100 * trial + 50 + i, 0.3));
    }
    CHECK(std::abs(iou_metric(probs, masks) - brute_iou(probs, masks)) < 1e-12);
    CHECK(std::abs(niou_metric(probs, masks) - brute_niou(probs, masks)) < 1e-12);
    if (n == 1) CHECK(iou_metric(probs, masks) == niou_metric(probs, masks));
  }
}

TEST_CASE("metric edge cases") {
  const Tensor m = random_mask(Shape{1, 4, 4}, 8, 0.5);
  const Tensor inv = sub(Tensor::create(Shape{1, 4, 4}, init::Ones{}), m);
  const std::vector<Tensor> same{m}, disjoint{inv};
  CHECK(iou_metric(same, same) == 1.0);
  CHECK(iou_metric(disjoint, same) == 0.0);

  const std::vector<Tensor> probs{m, inv}, masks{m, m};
  CHECK(niou_metric(probs, masks) == 0.5);

  const Tensor zero = Tensor::create(Shape{1, 4, 4}, init::Zeros{});
  const std::vector<Tensor> empties{zero, zero};
  CHECK(iou_metric(empties, empties) == 1.0);
  CHECK(niou_metric(empties, empties) == 1.0);

  const std::vector<Tensor> none;
  CHECK_THROWS_AS(iou_metric(none, none), DomainError);
  CHECK_THROWS_AS(niou_metric(none, none), DomainError);
  CHECK_THROWS_AS(iou_metric(same, empties), ShapeError);

  const MetricsReport r{0.25, 0.5, 3};
  CHECK(r.to_line() == "iou=0.25 niou=0.5 n_images=3");
}
