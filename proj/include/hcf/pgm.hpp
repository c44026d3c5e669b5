#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcf/tensor.hpp"

namespace hcf {

/// Binary (P5) greyscale image. Samples are stored widened to 16 bits.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint16_t maxval = 255;
  std::vector<std::uint16_t> pixels;
};

GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& image);

/// [1, H, W] tensor scaled into [0, 1] by maxval.
Tensor image_to_tensor(const GrayImage& image);
/// Quantizes a [.., H, W] tensor with values in [0, 1] to 8 bits.
GrayImage tensor_to_image(const Tensor& t);

}  // namespace hcf
