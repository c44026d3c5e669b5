#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "hcf/config_file.hpp"
#include "hcf/dasi.hpp"
#include "hcf/mdcr.hpp"
#include "hcf/nn_ops.hpp"
#include "hcf/parameters.hpp"
#include "hcf/ppa.hpp"
#include "hcf/tensor.hpp"

namespace hcf {

struct NetworkConfig {
  std::size_t stages = 5;
  std::vector<std::size_t> widths{16, 32, 64, 128, 256};
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> dilations{1, 3, 5, 7};
  std::array<std::size_t, 2> patch_sizes{2, 4};
  bool use_ppa = true;
  bool use_dasi = true;
  bool use_mdcr = true;
  double dropout = 0.1;
  /// Deep-supervision weights, finest scale first. Empty means 2^-i per stage,
  /// which is [1, 0.5, 0.25, 0.125, 0.0625] for five stages.
  std::vector<double> lambdas;

  std::vector<double> supervision_weights() const;
  /// Inputs must have H and W divisible by this.
  std::size_t size_multiple() const { return std::size_t{1} << (stages - 1); }
  void validate() const;

  void write(KeyValueFile& kv) const;
  static NetworkConfig read(const KeyValueFile& kv);
  std::string to_text() const;
};

/// Baseline stage block: two conv3x3 + BN + ReLU layers.
struct DoubleConvParams {
  Conv2dParams conv1;
  BatchNormState bn1;
  Conv2dParams conv2;
  BatchNormState bn2;

  static DoubleConvParams make(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed);
  void collect(const std::string& prefix, TensorRegistry& registry) const;
};

Tensor double_conv_forward(const Tensor& x, DoubleConvParams& params, Mode mode);

using StageBlock = std::variant<PpaParams, DoubleConvParams>;

/// U-shaped segmentation network: stage blocks with max pooling on the way
/// down, an optional MDCR bottleneck, transposed-conv upsampling with optional
/// DASI skip fusion on the way up, and a 1x1 prediction head per decoder scale.
class Network {
 public:
  static Network build(const NetworkConfig& cfg, std::uint64_t seed);

  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Pre-sigmoid logits at full input resolution, finest scale (i = 0) first.
  /// `dropout_stream` selects the dropout masks in train mode.
  std::vector<Tensor> forward(const Tensor& images, Mode mode, std::uint64_t dropout_stream = 0);

  const NetworkConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const TensorRegistry& tensors() const { return registry_; }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const { return registry_.parameter_count(); }

 private:
  Network() = default;
  Tensor run_block(StageBlock& block, const Tensor& x, Mode mode, std::uint64_t dropout_seed);

  NetworkConfig cfg_;
  std::uint64_t seed_ = 0;
  std::vector<StageBlock> encoder_;
  std::vector<StageBlock> decoder_;  // decoder_[i] produces the scale-i features, i < stages-1
  std::vector<Conv2dParams> upsample_;
  std::vector<DasiParams> skip_fusers_;
  std::unique_ptr<MdcrParams> bottleneck_;
  std::vector<Conv2dParams> heads_;
  TensorRegistry registry_;
};

inline Network build_network(const NetworkConfig& cfg, std::uint64_t seed) { return Network::build(cfg, seed); }

struct ModelSize {
  std::uint64_t parameters = 0;
  std::uint64_t macs = 0;
};

/// Parameter count plus multiply-accumulates of one eval-mode forward pass at
/// `input_shape` [N, C, H, W]. Conv MACs are outElems * kH * kW * inC / groups.
ModelSize count_params_macs(Network& net, const Shape& input_shape);

}  // namespace hcf
