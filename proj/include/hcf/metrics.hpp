#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "hcf/tensor.hpp"

namespace hcf {

struct ConfusionCounts {
  std::uint64_t true_positive = 0;
  std::uint64_t predicted = 0;  // P
  std::uint64_t target = 0;     // T
};

/// Counts over one image; a pixel is predicted positive when prob > threshold.
ConfusionCounts confusion(const Tensor& probabilities, const Tensor& mask, double threshold = 0.5);

/// Dataset-level IoU: sum TP / (sum T + sum P - sum TP), one pooled ratio.
/// Returns 1 when every prediction and mask is empty.
double iou_metric(std::span<const Tensor> probabilities, std::span<const Tensor> masks, double threshold = 0.5);

/// Mean of per-image IoUs; an image whose union is empty contributes 1.
double niou_metric(std::span<const Tensor> probabilities, std::span<const Tensor> masks, double threshold = 0.5);

struct MetricsReport {
  double iou = 0.0;
  double niou = 0.0;
  std::size_t n_images = 0;

  /// `iou=<float> niou=<float> n_images=<int>`
  std::string to_line() const;
};

}  // namespace hcf
