#include "hcf/network.hpp"

#include <cmath>
#include <sstream>

namespace hcf {

namespace {

std::string join(const auto& values) {
  std::string s;
  for (const auto& v : values) {
    if (!s.empty()) s += ",";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>)
      s += format_double(v);
    else
      s += std::to_string(v);
  }
  return s;
}

template <std::size_t N>
std::array<std::size_t, N> to_array(const std::vector<std::size_t>& v, const char* key) {
  if (v.size() != N) throw ConfigError(std::string("config key '") + key + "' needs " + std::to_string(N) + " values");
  std::array<std::size_t, N> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// NetworkConfig

std::vector<double> NetworkConfig::supervision_weights() const {
  if (!lambdas.empty()) return lambdas;
  std::vector<double> w(stages);
  for (std::size_t i = 0; i < stages; ++i) w[i] = std::ldexp(1.0, -static_cast<int>(i));
  return w;
}

void NetworkConfig::validate() const {
  if (stages < 2) throw ConfigError("network needs at least 2 stages");
  if (widths.size() != stages)
    throw ConfigError("widths lists " + std::to_string(widths.size()) + " stages, expected " + std::to_string(stages));
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("stage widths must be positive");
    if ((use_dasi || use_mdcr) && w % 4)
      throw ConfigError("stage width " + std::to_string(w) + " not divisible by 4 (required by DASI/MDCR)");
  }
  if (!lambdas.empty() && lambdas.size() != stages)
    throw ConfigError("lambdas lists " + std::to_string(lambdas.size()) + " weights, expected " +
                      std::to_string(stages));
  for (std::size_t i = 1; i < dilations.size(); ++i)
    if (dilations[i] <= dilations[i - 1] || dilations[0] == 0)
      throw ConfigError("dilations must be positive and strictly increasing");
  if (patch_sizes[0] == 0 || patch_sizes[1] == 0) throw ConfigError("patch sizes must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

void NetworkConfig::write(KeyValueFile& kv) const {
  kv.set("stages", std::to_string(stages));
  kv.set("widths", join(widths));
  kv.set("in_channels", std::to_string(in_channels));
  kv.set("dilations", join(dilations));
  kv.set("patch_sizes", join(patch_sizes));
  kv.set("use_ppa", use_ppa ? "true" : "false");
  kv.set("use_dasi", use_dasi ? "true" : "false");
  kv.set("use_mdcr", use_mdcr ? "true" : "false");
  kv.set("dropout", format_double(dropout));
  kv.set("lambdas", join(supervision_weights()));
}

NetworkConfig NetworkConfig::read(const KeyValueFile& kv) {
  NetworkConfig c;
  c.stages = kv.get_size("stages", c.stages);
  if (kv.has("widths")) {
    c.widths = kv.get_sizes("widths", {});
  } else if (c.stages != 5) {
    // Default widths double per stage from 16.
    c.widths.resize(c.stages);
    for (std::size_t i = 0; i < c.stages; ++i) c.widths[i] = std::size_t{16} << i;
  }
  c.in_channels = kv.get_size("in_channels", c.in_channels);
  c.dilations = to_array<4>(kv.get_sizes("dilations", {c.dilations.begin(), c.dilations.end()}), "dilations");
  c.patch_sizes = to_array<2>(kv.get_sizes("patch_sizes", {c.patch_sizes.begin(), c.patch_sizes.end()}), "patch_sizes");
  c.use_ppa = kv.get_bool("use_ppa", c.use_ppa);
  c.use_dasi = kv.get_bool("use_dasi", c.use_dasi);
  c.use_mdcr = kv.get_bool("use_mdcr", c.use_mdcr);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.lambdas = kv.get_doubles("lambdas", {});
  c.validate();
  return c;
}

std::string NetworkConfig::to_text() const {
  KeyValueFile kv;
  write(kv);
  std::string s;
  for (const auto& [k, v] : kv.entries()) s += k + "=" + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Blocks

DoubleConvParams DoubleConvParams::make(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed) {
  SeedStream seeds(seed);
  DoubleConvParams p;
  p.conv1 = Conv2dParams::make(in_channels, out_channels, {.kernel = 3, .padding = 1}, seeds.next());
  p.bn1 = BatchNormState::make(out_channels);
  p.conv2 = Conv2dParams::make(out_channels, out_channels, {.kernel = 3, .padding = 1}, seeds.next());
  p.bn2 = BatchNormState::make(out_channels);
  return p;
}

void DoubleConvParams::collect(const std::string& prefix, TensorRegistry& registry) const {
  registry.add(prefix + ".conv1", conv1);
  registry.add(prefix + ".bn1", bn1);
  registry.add(prefix + ".conv2", conv2);
  registry.add(prefix + ".bn2", bn2);
}

Tensor double_conv_forward(const Tensor& x, DoubleConvParams& params, Mode mode) {
  const Tensor y = relu(batch_norm(conv2d(x, params.conv1), params.bn1, mode));
  return relu(batch_norm(conv2d(y, params.conv2), params.bn2, mode));
}

// ---------------------------------------------------------------------------
// Network

Network Network::build(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network net;
  net.cfg_ = cfg;
  net.seed_ = seed;
  SeedStream seeds(seed);
  const std::size_t s = cfg.stages;
  const auto& w = cfg.widths;

  auto make_block = [&](std::size_t in, std::size_t out) -> StageBlock {
    if (cfg.use_ppa) return PpaParams::make(in, out, seeds.next(), cfg.dropout, cfg.patch_sizes);
    return DoubleConvParams::make(in, out, seeds.next());
  };

  for (std::size_t i = 0; i < s; ++i) net.encoder_.push_back(make_block(i == 0 ? cfg.in_channels : w[i - 1], w[i]));
  if (cfg.use_mdcr) net.bottleneck_ = std::make_unique<MdcrParams>(MdcrParams::make(w[s - 1], cfg.dilations, seeds.next()));
  for (std::size_t i = 0; i + 1 < s; ++i) {
    // Transposed-conv weights are laid out [inC, outC, kH, kW].
    Conv2dParams up;
    up.weight = Tensor::create(Shape{w[i + 1], w[i], 2, 2}, init::Kaiming{seeds.next()});
    up.weight.set_requires_grad();
    up.bias = Tensor::create(Shape{w[i]});
    up.bias.set_requires_grad();
    up.stride = 2;
    net.upsample_.push_back(std::move(up));
    net.decoder_.push_back(make_block(2 * w[i], w[i]));
    if (cfg.use_dasi) {
      std::optional<std::size_t> low;
      if (i > 0) low = w[i - 1];
      net.skip_fusers_.push_back(DasiParams::make(w[i], w[i + 1], low, seeds.next()));
    }
  }
  for (std::size_t i = 0; i < s; ++i) net.heads_.push_back(Conv2dParams::make(w[i], 1, {.kernel = 1}, seeds.next()));

  auto collect_block = [&](const std::string& name, const StageBlock& b) {
    std::visit([&](const auto& p) { p.collect(name, net.registry_); }, b);
  };
  for (std::size_t i = 0; i < s; ++i) collect_block("encoder" + std::to_string(i), net.encoder_[i]);
  if (net.bottleneck_) net.bottleneck_->collect("bottleneck", net.registry_);
  for (std::size_t i = 0; i + 1 < s; ++i) {
    net.registry_.add("upsample" + std::to_string(i), net.upsample_[i]);
    if (cfg.use_dasi) net.skip_fusers_[i].collect("skip" + std::to_string(i), net.registry_);
    collect_block("decoder" + std::to_string(i), net.decoder_[i]);
  }
  for (std::size_t i = 0; i < s; ++i) net.registry_.add("head" + std::to_string(i), net.heads_[i]);
  return net;
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : registry_.parameters) out.push_back(p.tensor);
  return out;
}

Tensor Network::run_block(StageBlock& block, const Tensor& x, Mode mode, std::uint64_t dropout_seed) {
  if (auto* ppa = std::get_if<PpaParams>(&block)) return ppa_forward(x, *ppa, mode, dropout_seed);
  return double_conv_forward(x, std::get<DoubleConvParams>(block), mode);
}

std::vector<Tensor> Network::forward(const Tensor& images, Mode mode, std::uint64_t dropout_stream) {
  const Shape& shape = images.shape();
  if (shape.rank() != 4 || shape[1] != cfg_.in_channels)
    throw ShapeError("network input must be [N, " + std::to_string(cfg_.in_channels) + ", H, W], got " + shape.str());
  const std::size_t h = shape[2], w = shape[3];
  if (h % cfg_.size_multiple() || w % cfg_.size_multiple())
    throw ShapeError("input extents " + shape.str() + " must be divisible by " + std::to_string(cfg_.size_multiple()));

  const std::size_t s = cfg_.stages;
  const std::uint64_t forward_seed = mix_seed(seed_, dropout_stream);
  std::uint64_t block_index = 0;
  auto next_dropout_seed = [&] { return mix_seed(forward_seed, block_index++); };

  std::vector<Tensor> enc(s);
  for (std::size_t i = 0; i < s; ++i) {
    const Tensor in = i == 0 ? images : max_pool2d(enc[i - 1]);
    enc[i] = run_block(encoder_[i], in, mode, next_dropout_seed());
  }

  std::vector<Tensor> dec(s);
  dec[s - 1] = bottleneck_ ? mdcr_forward(enc[s - 1], *bottleneck_, mode) : enc[s - 1];
  for (std::size_t i = s - 1; i-- > 0;) {
    Tensor skip = enc[i];
    if (cfg_.use_dasi) {
      std::optional<Tensor> low;
      if (i > 0) low = enc[i - 1];
      skip = dasi_forward(enc[i + 1], low, enc[i], skip_fusers_[i], mode);
    }
    const Tensor up = transposed_conv2d(dec[i + 1], upsample_[i]);
    dec[i] = run_block(decoder_[i], concat({up, skip}, 1), mode, next_dropout_seed());
  }

  std::vector<Tensor> logits(s);
  for (std::size_t i = 0; i < s; ++i) logits[i] = bilinear_resize(conv2d(dec[i], heads_[i]), h, w);
  return logits;
}

ModelSize count_params_macs(Network& net, const Shape& input_shape) {
  ModelSize size;
  size.parameters = net.parameter_count();
  NoGradGuard no_grad;
  MacCounter counter;
  net.forward(Tensor::create(input_shape), Mode::kEval);
  size.macs = counter.total();
  return size;
}

}  // namespace hcf
