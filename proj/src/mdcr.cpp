#include "hcf/mdcr.hpp"

namespace hcf {

MdcrParams MdcrParams::make(std::size_t channels, std::array<std::size_t, kMdcrHeads> dilations, std::uint64_t seed) {
  if (channels % kMdcrHeads) throw ConfigError("MDCR channels must be divisible by 4, got " + std::to_string(channels));
  for (std::size_t i = 0; i < kMdcrHeads; ++i) {
    if (dilations[i] == 0) throw ConfigError("MDCR dilation rates must be positive");
    if (i > 0 && dilations[i] <= dilations[i - 1]) throw ConfigError("MDCR dilation rates must be strictly increasing");
  }
  SeedStream seeds(seed);
  const std::size_t per_head = channels / kMdcrHeads;
  MdcrParams p;
  p.dilations = dilations;
  for (std::size_t i = 0; i < kMdcrHeads; ++i)
    p.heads[i] = Conv2dParams::make(
        per_head, per_head,
        {.kernel = 3, .padding = Conv2dParams::same_padding(3, dilations[i]), .dilation = dilations[i], .groups = per_head},
        seeds.next());
  p.inner = Conv2dParams::make(channels, channels, {.kernel = 1, .groups = per_head}, seeds.next());
  p.outer = Conv2dParams::make(channels, channels, {.kernel = 1}, seeds.next());
  p.out_bn = BatchNormState::make(channels);
  return p;
}

void MdcrParams::collect(const std::string& prefix, TensorRegistry& registry) const {
  for (std::size_t i = 0; i < kMdcrHeads; ++i) registry.add(prefix + ".head" + std::to_string(i), heads[i]);
  registry.add(prefix + ".inner", inner);
  registry.add(prefix + ".outer", outer);
  registry.add(prefix + ".out_bn", out_bn);
}

std::array<Tensor, kMdcrHeads> head_split(const Tensor& f) {
  if (f.shape().rank() != 4) throw ShapeError("head_split: expected an NCHW tensor");
  const std::size_t c = f.dim(1);
  if (c % kMdcrHeads) throw ConfigError("head_split: channel count " + std::to_string(c) + " not divisible by 4");
  const std::size_t part = c / kMdcrHeads;
  std::array<Tensor, kMdcrHeads> heads;
  for (std::size_t i = 0; i < kMdcrHeads; ++i) heads[i] = slice(f, 1, i * part, (i + 1) * part);
  return heads;
}

Tensor dilated_head(const Tensor& head, const Conv2dParams& conv) { return conv2d(head, conv); }

std::vector<std::size_t> interleave_permutation(std::size_t channels) {
  if (channels % kMdcrHeads) throw ConfigError("interleave: channel count not divisible by 4");
  const std::size_t part = channels / kMdcrHeads;
  std::vector<std::size_t> perm(channels);
  for (std::size_t j = 0; j < part; ++j)
    for (std::size_t i = 0; i < kMdcrHeads; ++i) perm[j * kMdcrHeads + i] = i * part + j;
  return perm;
}

std::vector<Tensor> interleave(const std::array<Tensor, kMdcrHeads>& heads) {
  const Shape& s = heads[0].shape();
  for (const auto& h : heads)
    if (!(h.shape() == s)) throw ShapeError("interleave: heads must share one shape");
  const Tensor all = concat({heads.begin(), heads.end()}, 1);
  const Tensor mixed = index_select(all, 1, interleave_permutation(all.dim(1)));
  std::vector<Tensor> groups;
  for (std::size_t j = 0; j < s[1]; ++j) groups.push_back(slice(mixed, 1, j * kMdcrHeads, (j + 1) * kMdcrHeads));
  return groups;
}

Tensor mdcr_forward(const Tensor& f, MdcrParams& params, Mode mode) {
  if (f.shape().rank() != 4 || f.dim(1) != params.channels())
    throw ShapeError("mdcr: expected " + std::to_string(params.channels()) + " channels, got " + f.shape().str());
  const auto heads = head_split(f);
  std::vector<Tensor> refined;
  for (std::size_t i = 0; i < kMdcrHeads; ++i) refined.push_back(dilated_head(heads[i], params.heads[i]));
  const Tensor all = concat(refined, 1);
  const Tensor mixed = index_select(all, 1, interleave_permutation(all.dim(1)));
  const Tensor groups = conv2d(mixed, params.inner);
  return relu(batch_norm(conv2d(groups, params.outer), params.out_bn, mode));
}

}  // namespace hcf
