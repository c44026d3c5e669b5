#include "hcf/dasi.hpp"

#include <algorithm>
#include <cmath>

namespace hcf {

namespace {

constexpr std::size_t kPartitions = 4;

// alpha*l + (1-alpha)*h with alpha = sigmoid(u), clamped into [min(l,h), max(l,h)]
// so rounding never leaves the convex hull.
Tensor convex_gate(const Tensor& u, const Tensor& l, const Tensor& h) {
  const auto ud = u.data(), ld = l.data(), hd = h.data();
  std::vector<double> alpha(ud.size()), out(ud.size());
  for (std::size_t i = 0; i < ud.size(); ++i) {
    const double a = ud[i] >= 0 ? 1.0 / (1.0 + std::exp(-ud[i])) : std::exp(ud[i]) / (1.0 + std::exp(ud[i]));
    alpha[i] = a;
    const double v = a * ld[i] + (1.0 - a) * hd[i];
    out[i] = std::clamp(v, std::min(ld[i], hd[i]), std::max(ld[i], hd[i]));
  }
  return make_result(u.shape(), std::move(out), "convex_gate", {u, l, h},
                     [alpha = std::move(alpha)](const detail::Node& node, std::span<const double> g,
                                                detail::GradSink& sink) {
                       const auto& ld = node.record->inputs[1]->data;
                       const auto& hd = node.record->inputs[2]->data;
                       if (sink.needs(0)) {
                         auto gu = sink.grad(0);
                         for (std::size_t i = 0; i < g.size(); ++i)
                           gu[i] += g[i] * (ld[i] - hd[i]) * alpha[i] * (1.0 - alpha[i]);
                       }
                       if (sink.needs(1)) {
                         auto gl = sink.grad(1);
                         for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i] * alpha[i];
                       }
                       if (sink.needs(2)) {
                         auto gh = sink.grad(2);
                         for (std::size_t i = 0; i < g.size(); ++i) gh[i] += g[i] * (1.0 - alpha[i]);
                       }
                     });
}

}  // namespace

DasiParams DasiParams::make(std::size_t channels, std::optional<std::size_t> high_channels,
                            std::optional<std::size_t> low_channels, std::uint64_t seed) {
  if (channels % kPartitions) throw ConfigError("DASI channels must be divisible by 4, got " + std::to_string(channels));
  SeedStream seeds(seed);
  DasiParams p;
  if (high_channels) p.align_high = Conv2dParams::make(*high_channels, channels, {.kernel = 1}, seeds.next());
  if (low_channels) p.align_low = Conv2dParams::make(*low_channels, channels, {.kernel = 1}, seeds.next());
  p.fuse_conv = Conv2dParams::make(channels, channels, {.kernel = 3, .padding = 1}, seeds.next());
  p.fuse_bn = BatchNormState::make(channels);
  return p;
}

void DasiParams::collect(const std::string& prefix, TensorRegistry& registry) const {
  if (align_high) registry.add(prefix + ".align_high", *align_high);
  if (align_low) registry.add(prefix + ".align_low", *align_low);
  registry.add(prefix + ".fuse_conv", fuse_conv);
  registry.add(prefix + ".fuse_bn", fuse_bn);
}

Tensor align(const Tensor& f, std::size_t h, std::size_t w, const Conv2dParams& conv) {
  return bilinear_resize(conv2d(f, conv), h, w);
}

Tensor gated_fuse(const Tensor& u, const Tensor& l_aligned, const Tensor& h_aligned) {
  if (u.shape().rank() != 4 || !(u.shape() == l_aligned.shape()) || !(u.shape() == h_aligned.shape()))
    throw ShapeError("gated_fuse: streams must share one NCHW shape");
  const std::size_t c = u.dim(1);
  if (c % kPartitions) throw ConfigError("gated_fuse: channel count " + std::to_string(c) + " not divisible by 4");
  const std::size_t part = c / kPartitions;
  std::vector<Tensor> fused;
  fused.reserve(kPartitions);
  for (std::size_t i = 0; i < kPartitions; ++i) {
    const std::size_t b = i * part, e = b + part;
    fused.push_back(convex_gate(slice(u, 1, b, e), slice(l_aligned, 1, b, e), slice(h_aligned, 1, b, e)));
  }
  return concat(fused, 1);
}

Tensor dasi_pre_conv(const std::optional<Tensor>& f_high, const std::optional<Tensor>& f_low, const Tensor& f_u,
                     const DasiParams& params) {
  if (f_u.shape().rank() != 4 || f_u.dim(1) != params.channels())
    throw ShapeError("dasi: current feature must have " + std::to_string(params.channels()) + " channels");
  const std::size_t h = f_u.dim(2), w = f_u.dim(3);
  auto aligned = [&](const std::optional<Tensor>& f, const std::optional<Conv2dParams>& conv, const char* which) {
    if (!f) return f_u;
    if (!conv) throw ConfigError(std::string("dasi: no alignment weights for the ") + which + " stream");
    return align(*f, h, w, *conv);
  };
  const Tensor hi = aligned(f_high, params.align_high, "high-dimensional");
  const Tensor lo = aligned(f_low, params.align_low, "low-dimensional");
  return gated_fuse(f_u, lo, hi);
}

Tensor dasi_forward(const std::optional<Tensor>& f_high, const std::optional<Tensor>& f_low, const Tensor& f_u,
                    DasiParams& params, Mode mode) {
  const Tensor fused = dasi_pre_conv(f_high, f_low, f_u, params);
  return relu(batch_norm(conv2d(fused, params.fuse_conv), params.fuse_bn, mode));
}

}  // namespace hcf
