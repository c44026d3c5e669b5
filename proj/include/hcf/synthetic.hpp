#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcf/tensor.hpp"

namespace hcf {

/// Image [1, H, W] in [0, 1] with its binary mask [1, H, W].
struct SegmentationSample {
  Tensor image;
  Tensor mask;
  std::string id;
};

/// Infrared-like scenes: a smooth low-frequency background, broad clutter
/// blobs, pixel noise, and a few small bright disks that form the mask.
struct SyntheticConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t min_radius = 1;
  std::size_t max_radius = 3;
  double min_boost = 0.3;
  double max_boost = 0.8;
  /// Upper bound on the fraction of pixels covered by objects.
  double max_coverage = 0.005;
  std::size_t clutter_blobs = 4;
  double noise = 0.02;
  std::uint64_t seed = 0;
};

/// Pixel count of a digital disk {dx^2 + dy^2 <= r^2}.
std::size_t disk_area(std::size_t radius);

SegmentationSample generate_sample(const SyntheticConfig& cfg, std::size_t index);
std::vector<SegmentationSample> generate_dataset(const SyntheticConfig& cfg, std::size_t n);

}  // namespace hcf
