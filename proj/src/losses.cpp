#include "hcf/losses.hpp"

#include <cmath>
#include <string>

namespace hcf {

namespace {

void check_target(const Tensor& logits, const Tensor& target, const char* op) {
  if (!(logits.shape() == target.shape()))
    throw ShapeError(std::string(op) + ": logits " + logits.shape().str() + " vs target " + target.shape().str());
  for (double y : target.data())
    if (y != 0.0 && y != 1.0) throw DomainError(std::string(op) + ": target values must be 0 or 1");
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Tensor bce_loss(const Tensor& logits, const Tensor& target) {
  check_target(logits, target, "bce_loss");
  const auto z = logits.data(), y = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    acc += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
  const double count = static_cast<double>(z.size());
  return make_result(Shape{1}, {acc / count}, "bce_loss", {logits, target},
                     [count](const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
                       if (!sink.needs(0)) return;
                       const auto& z = node.record->inputs[0]->data;
                       const auto& y = node.record->inputs[1]->data;
                       auto gz = sink.grad(0);
                       for (std::size_t i = 0; i < z.size(); ++i) gz[i] += g[0] * (stable_sigmoid(z[i]) - y[i]) / count;
                     });
}

Tensor soft_iou_loss(const Tensor& logits, const Tensor& target) {
  check_target(logits, target, "soft_iou_loss");
  const std::size_t batch = logits.dim(0);
  const std::size_t per = logits.numel() / batch;
  const auto z = logits.data(), y = target.data();
  std::vector<double> inter(batch, 0.0), uni(batch, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double sp = 0.0, sy = 0.0, spy = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const double p = stable_sigmoid(z[i]);
      sp += p;
      sy += y[i];
      spy += p * y[i];
    }
    inter[b] = spy + kSoftIouEpsilon;
    uni[b] = sp + sy - spy + kSoftIouEpsilon;
    total += 1.0 - inter[b] / uni[b];
  }
  const double nb = static_cast<double>(batch);
  return make_result(Shape{1}, {total / nb}, "soft_iou_loss", {logits, target},
                     [batch, per, nb, inter = std::move(inter), uni = std::move(uni)](
                         const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
                       if (!sink.needs(0)) return;
                       const auto& z = node.record->inputs[0]->data;
                       const auto& y = node.record->inputs[1]->data;
                       auto gz = sink.grad(0);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const double u2 = uni[b] * uni[b];
                         for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
                           const double p = stable_sigmoid(z[i]);
                           const double diou = (y[i] * uni[b] - inter[b] * (1.0 - y[i])) / u2;
                           gz[i] += -g[0] / nb * diou * p * (1.0 - p);
                         }
                       }
                     });
}

Tensor deep_supervision_loss(std::span<const Tensor> logits, const Tensor& target, std::span<const double> lambdas) {
  if (logits.size() != lambdas.size() || logits.empty())
    throw ConfigError("deep_supervision_loss: " + std::to_string(logits.size()) + " logit maps but " +
                      std::to_string(lambdas.size()) + " weights");
  Tensor total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Tensor term = scale(add(bce_loss(logits[i], target), soft_iou_loss(logits[i], target)), lambdas[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace hcf
