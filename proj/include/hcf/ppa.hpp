#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "hcf/nn_ops.hpp"
#include "hcf/parameters.hpp"
#include "hcf/tensor.hpp"

namespace hcf {

/// Patch-aware branch: patch size, the two-layer FFN acting on the p*p patch
/// axis, task embedding xi [C'] and channel-selection matrix P [C', C'].
struct PatchBranchParams {
  std::size_t patch = 2;
  Conv2dParams ffn_in;   // 1x1, p*p -> 2*p*p
  Conv2dParams ffn_out;  // 1x1, 2*p*p -> p*p
  Tensor task_embedding;
  Tensor selection;

  static PatchBranchParams make(std::size_t channels, std::size_t patch, SeedStream& seeds);
};

struct PpaParams {
  Conv2dParams input_proj;  // 1x1, C -> C'
  PatchBranchParams local;   // p = 2
  PatchBranchParams global;  // p = 4
  std::array<Conv2dParams, 3> serial;
  Tensor eca_kernel;  // [1, 1, k, 1], 1-D conv over the channel axis
  Conv2dParams spatial;  // 2 -> 1, 7x7, pad 3
  BatchNormState out_bn;
  double dropout_rate = 0.1;

  std::size_t in_channels() const { return input_proj.in_channels(); }
  std::size_t out_channels() const { return input_proj.out_channels(); }

  static PpaParams make(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed,
                        double dropout_rate = 0.1, std::array<std::size_t, 2> patch_sizes = {2, 4},
                        std::size_t eca_kernel_size = 3);
  void collect(const std::string& prefix, TensorRegistry& registry) const;
};

/// Token feature selection. `tokens` is [N, C', d] (or [C', d]); column j is the
/// token t_j in R^C'. Each token is scaled by sim_j = clamp(cos(t_j, xi), 0, 1)
/// (0 when either norm vanishes) and then mixed across channels:
///   out[n] = P * tokens[n] * diag(sim).
Tensor feature_select(const Tensor& tokens, const Tensor& xi, const Tensor& selection);

/// The clamped cosine similarity of every token against xi; [N, d].
std::vector<double> token_similarity(const Tensor& tokens, const Tensor& xi);

Tensor patch_branch(const Tensor& fp, const PatchBranchParams& params);

/// c1 = conv(fp), c2 = conv(c1), c3 = conv(c2); returns c1 + c2 + c3.
Tensor serial_conv_branch(const Tensor& fp, const std::array<Conv2dParams, 3>& convs);

/// ECA-style: global average pool, 1-D conv across channels, sigmoid, scale.
Tensor channel_attention(const Tensor& f, const Tensor& eca_kernel);
/// The [N, C, 1, 1] sigmoid scale applied by channel_attention.
Tensor channel_attention_map(const Tensor& f, const Tensor& eca_kernel);

/// CBAM-style: [mean_c, max_c] -> 7x7 conv -> sigmoid mask broadcast over channels.
Tensor spatial_attention(const Tensor& f, const Conv2dParams& conv);
Tensor spatial_attention_map(const Tensor& f, const Conv2dParams& conv);

/// F~ = local + global + serial branches on the projected input.
Tensor ppa_branches(const Tensor& f, const PpaParams& params);

/// Full block: F'' = ReLU(BN(dropout(M_s(F_c) * F_c))) with F_c = M_c(F~) * F~.
/// `dropout_seed` fixes the dropout mask in train mode.
Tensor ppa_forward(const Tensor& f, PpaParams& params, Mode mode, std::uint64_t dropout_seed = 0);

}  // namespace hcf
