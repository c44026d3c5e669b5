#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hcf/nn_ops.hpp"
#include "hcf/parameters.hpp"
#include "hcf/tensor.hpp"

namespace hcf {

inline constexpr std::size_t kMdcrHeads = 4;

struct MdcrParams {
  std::array<Conv2dParams, kMdcrHeads> heads;  // depthwise 3x3, dilation d_i, pad d_i
  std::array<std::size_t, kMdcrHeads> dilations{1, 3, 5, 7};
  Conv2dParams inner;  // 1x1, C -> C, C/4 groups of 4 channels
  Conv2dParams outer;  // 1x1, C -> C
  BatchNormState out_bn;

  std::size_t channels() const { return outer.out_channels(); }

  static MdcrParams make(std::size_t channels, std::array<std::size_t, kMdcrHeads> dilations, std::uint64_t seed);
  void collect(const std::string& prefix, TensorRegistry& registry) const;
};

/// Four contiguous, order-preserving channel blocks.
std::array<Tensor, kMdcrHeads> head_split(const Tensor& f);

/// Depthwise dilated 3x3 conv on one head; spatial extents are preserved.
Tensor dilated_head(const Tensor& head, const Conv2dParams& conv);

/// Channel c' = 4*j + i of the interleaved tensor is channel j of head i, i.e.
/// source channel i*(C/4) + j. Returned as a gather index over C channels.
std::vector<std::size_t> interleave_permutation(std::size_t channels);

/// Group j = [a_1^j, a_2^j, a_3^j, a_4^j]; C/4 tensors of shape [N, 4, H, W].
std::vector<Tensor> interleave(const std::array<Tensor, kMdcrHeads>& heads);

/// split -> per-head DDWConv -> interleave -> grouped pointwise W_inner ->
/// pointwise W_outer -> BN -> ReLU.
Tensor mdcr_forward(const Tensor& f, MdcrParams& params, Mode mode);

}  // namespace hcf
