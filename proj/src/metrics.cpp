#include "hcf/metrics.hpp"

#include "hcf/config_file.hpp"

namespace hcf {

namespace {

void check_dataset(std::span<const Tensor> probabilities, std::span<const Tensor> masks) {
  if (probabilities.empty()) throw DomainError("metrics require at least one image");
  if (probabilities.size() != masks.size()) throw ShapeError("prediction and mask counts differ");
}

}  // namespace

ConfusionCounts confusion(const Tensor& probabilities, const Tensor& mask, double threshold) {
  if (probabilities.numel() != mask.numel()) throw ShapeError("prediction and mask sizes differ");
  ConfusionCounts c;
  const auto p = probabilities.data(), m = mask.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pred = p[i] > threshold;
    const bool truth = m[i] > 0.5;
    c.predicted += pred;
    c.target += truth;
    c.true_positive += pred && truth;
  }
  return c;
}

double iou_metric(std::span<const Tensor> probabilities, std::span<const Tensor> masks, double threshold) {
  check_dataset(probabilities, masks);
  ConfusionCounts total;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const ConfusionCounts c = confusion(probabilities[i], masks[i], threshold);
    total.true_positive += c.true_positive;
    total.predicted += c.predicted;
    total.target += c.target;
  }
  const std::uint64_t uni = total.target + total.predicted - total.true_positive;
  if (uni == 0) return 1.0;
  return static_cast<double>(total.true_positive) / static_cast<double>(uni);
}

double niou_metric(std::span<const Tensor> probabilities, std::span<const Tensor> masks, double threshold) {
  check_dataset(probabilities, masks);
  double acc = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const ConfusionCounts c = confusion(probabilities[i], masks[i], threshold);
    const std::uint64_t uni = c.target + c.predicted - c.true_positive;
    acc += uni == 0 ? 1.0 : static_cast<double>(c.true_positive) / static_cast<double>(uni);
  }
  return acc / static_cast<double>(probabilities.size());
}

std::string MetricsReport::to_line() const {
  return "iou=" + format_double(iou) + " niou=" + format_double(niou) + " n_images=" + std::to_string(n_images);
}

}  // namespace hcf
