#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "hcf/nn_ops.hpp"
#include "hcf/parameters.hpp"
#include "hcf/tensor.hpp"

namespace hcf {

/// Skip-connection fuser. The deeper (high-dimensional) and shallower
/// (low-dimensional) neighbours are aligned to the current feature with a 1x1
/// conv plus bilinear resize; a missing neighbour at the pyramid boundary is
/// replaced by the current feature itself.
struct DasiParams {
  std::optional<Conv2dParams> align_high;
  std::optional<Conv2dParams> align_low;
  Conv2dParams fuse_conv;  // 3x3, C -> C, pad 1
  BatchNormState fuse_bn;

  std::size_t channels() const { return fuse_conv.out_channels(); }

  static DasiParams make(std::size_t channels, std::optional<std::size_t> high_channels,
                         std::optional<std::size_t> low_channels, std::uint64_t seed);
  void collect(const std::string& prefix, TensorRegistry& registry) const;
};

/// 1x1 conv to the target channel count, then bilinear resize to (h, w).
Tensor align(const Tensor& f, std::size_t h, std::size_t w, const Conv2dParams& conv);

/// Splits the channels into four partitions and gates each one elementwise:
///   alpha = sigmoid(u_i),  u_i' = alpha * l_i + (1 - alpha) * h_i.
Tensor gated_fuse(const Tensor& u, const Tensor& l_aligned, const Tensor& h_aligned);

/// F_u' before the fuse convolution.
Tensor dasi_pre_conv(const std::optional<Tensor>& f_high, const std::optional<Tensor>& f_low, const Tensor& f_u,
                     const DasiParams& params);

/// ReLU(BN(conv3x3(F_u'))); output shape equals f_u's.
Tensor dasi_forward(const std::optional<Tensor>& f_high, const std::optional<Tensor>& f_low, const Tensor& f_u,
                    DasiParams& params, Mode mode);

}  // namespace hcf
