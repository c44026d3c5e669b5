#include "hcf/nn_ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace hcf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local MacCounter* g_mac_counter = nullptr;

void require_rank4(const Tensor& x, const char* op) {
  if (x.shape().rank() != 4) throw ShapeError(std::string(op) + ": expected an NCHW tensor, got " + x.shape().str());
}

/// Spatial frame of one convolution: the input image (h, w) and the output grid (oh, ow).
struct ConvFrame {
  std::size_t h, w, kh, kw, oh, ow;
  ConvGeometry g;
};

// Unrolls `channels` planes of an h x w image into a [channels*kh*kw, oh*ow] matrix.
void im2col(const double* img, std::size_t channels, const ConvFrame& f, double* col) {
  const std::size_t ncols = f.oh * f.ow;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = img + c * f.h * f.w;
    for (std::size_t u = 0; u < f.kh; ++u)
      for (std::size_t v = 0; v < f.kw; ++v) {
        double* row = col + ((c * f.kh + u) * f.kw + v) * ncols;
        const std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u * f.g.dilation_h) - static_cast<std::ptrdiff_t>(f.g.pad_h);
        const std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v * f.g.dilation_w) - static_cast<std::ptrdiff_t>(f.g.pad_w);
        for (std::size_t i = 0; i < f.oh; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * f.g.stride_h) + du;
          double* dst = row + i * f.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(f.h)) {
            std::fill_n(dst, f.ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(y) * f.w;
          for (std::size_t j = 0; j < f.ow; ++j) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(j * f.g.stride_w) + dv;
            dst[j] = (x < 0 || x >= static_cast<std::ptrdiff_t>(f.w)) ? 0.0 : src[x];
          }
        }
      }
  }
}

// Adjoint of im2col: scatters-and-adds the column matrix back onto the image.
void col2im(const double* col, std::size_t channels, const ConvFrame& f, double* img) {
  const std::size_t ncols = f.oh * f.ow;
  for (std::size_t c = 0; c < channels; ++c) {
    double* plane = img + c * f.h * f.w;
    for (std::size_t u = 0; u < f.kh; ++u)
      for (std::size_t v = 0; v < f.kw; ++v) {
        const double* row = col + ((c * f.kh + u) * f.kw + v) * ncols;
        const std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u * f.g.dilation_h) - static_cast<std::ptrdiff_t>(f.g.pad_h);
        const std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v * f.g.dilation_w) - static_cast<std::ptrdiff_t>(f.g.pad_w);
        for (std::size_t i = 0; i < f.oh; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(i * f.g.stride_h) + du;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(f.h)) continue;
          double* dst = plane + static_cast<std::size_t>(y) * f.w;
          const double* src = row + i * f.ow;
          for (std::size_t j = 0; j < f.ow; ++j) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(j * f.g.stride_w) + dv;
            if (x >= 0 && x < static_cast<std::ptrdiff_t>(f.w)) dst[x] += src[j];
          }
        }
      }
  }
}

bool is_pointwise(const ConvFrame& f) {
  return f.kh == 1 && f.kw == 1 && f.g.stride_h == 1 && f.g.stride_w == 1 && f.g.pad_h == 0 && f.g.pad_w == 0;
}

void check_bias(const Tensor& bias, std::size_t out_channels, const char* op) {
  if (bias.defined() && (bias.shape().rank() != 1 || bias.numel() != out_channels))
    throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(out_channels) + "]");
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                            std::size_t dilation) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (in + 2 * pad < span || stride == 0) return 0;
  return (in + 2 * pad - span) / stride + 1;
}

Conv2dParams Conv2dParams::make(std::size_t in_channels, std::size_t out_channels, const ConvSpec& spec,
                                std::uint64_t seed) {
  if (spec.groups == 0 || in_channels % spec.groups || out_channels % spec.groups)
    throw ConfigError("conv channels " + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                      " not divisible by groups " + std::to_string(spec.groups));
  Conv2dParams p;
  p.weight = Tensor::create(Shape{out_channels, in_channels / spec.groups, spec.kernel, spec.kernel},
                            init::Kaiming{seed});
  p.weight.set_requires_grad();
  if (spec.bias) {
    p.bias = Tensor::create(Shape{out_channels});
    p.bias.set_requires_grad();
  }
  p.stride = spec.stride;
  p.padding = spec.padding;
  p.dilation = spec.dilation;
  p.groups = spec.groups;
  return p;
}

// ---------------------------------------------------------------------------
// conv2d

Tensor conv2d(const Tensor& x, const Conv2dParams& p) { return conv2d(x, p.weight, p.bias, p.geometry()); }

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  require_rank4(x, "conv2d");
  if (weight.shape().rank() != 4) throw ShapeError("conv2d: weight must be [outC, inC/groups, kH, kW]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = weight.dim(0), cg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (g.groups == 0 || c % g.groups || oc % g.groups || cg * g.groups != c)
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight " + weight.shape().str() +
                     " with groups=" + std::to_string(g.groups));
  check_bias(bias, oc, "conv2d");
  const std::size_t oh = conv_out_extent(h, kh, g.stride_h, g.pad_h, g.dilation_h);
  const std::size_t ow = conv_out_extent(w, kw, g.stride_w, g.pad_w, g.dilation_w);
  if (oh == 0 || ow == 0) throw ShapeError("conv2d: output extent < 1 for input " + x.shape().str());

  const ConvFrame f{h, w, kh, kw, oh, ow, g};
  const std::size_t ocg = oc / g.groups;
  const std::size_t k = cg * kh * kw;
  const std::size_t npix = oh * ow;
  const bool pointwise = is_pointwise(f);

  std::vector<double> out(n * oc * npix);
  std::vector<double> col(pointwise ? 0 : k * npix);
  const auto xd = x.data();
  const auto wd = weight.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      const double* img = xd.data() + (b * c + gi * cg) * h * w;
      const double* colp = img;
      if (!pointwise) {
        im2col(img, cg, f, col.data());
        colp = col.data();
      }
      ConstMapMat wm(wd.data() + gi * ocg * k, ocg, k);
      ConstMapMat cm(colp, k, npix);
      MapMat om(out.data() + (b * oc + gi * ocg) * npix, ocg, npix);
      om.noalias() = wm * cm;
    }
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < oc; ++o) {
        double* dst = out.data() + (b * oc + o) * npix;
        for (std::size_t i = 0; i < npix; ++i) dst[i] += bd[o];
      }
  }
  MacCounter::record(static_cast<std::uint64_t>(n * oc * npix * k));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      Shape{n, oc, oh, ow}, std::move(out), "conv2d", std::move(inputs),
      [f, n, c, oc, cg, ocg, k, npix, pointwise](const detail::Node& node, std::span<const double> gout,
                                                 detail::GradSink& sink) {
        const auto& rec = *node.record;
        const auto& xd = rec.inputs[0]->data;
        const auto& wd = rec.inputs[1]->data;
        const std::size_t groups = f.g.groups;
        const bool need_x = sink.needs(0), need_w = sink.needs(1);
        std::span<double> gx = need_x ? sink.grad(0) : std::span<double>{};
        std::span<double> gw = need_w ? sink.grad(1) : std::span<double>{};
        std::vector<double> col(pointwise ? 0 : k * npix);
        std::vector<double> dcol(pointwise ? 0 : k * npix);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            ConstMapMat gm(gout.data() + (b * oc + gi * ocg) * npix, ocg, npix);
            ConstMapMat wm(wd.data() + gi * ocg * k, ocg, k);
            const double* img = xd.data() + (b * c + gi * cg) * f.h * f.w;
            if (need_w) {
              const double* colp = img;
              if (!pointwise) {
                im2col(img, cg, f, col.data());
                colp = col.data();
              }
              MapMat gwm(gw.data() + gi * ocg * k, ocg, k);
              gwm.noalias() += gm * ConstMapMat(colp, k, npix).transpose();
            }
            if (need_x) {
              double* gimg = gx.data() + (b * c + gi * cg) * f.h * f.w;
              if (pointwise) {
                MapMat(gimg, k, npix).noalias() += wm.transpose() * gm;
              } else {
                MapMat(dcol.data(), k, npix).noalias() = wm.transpose() * gm;
                col2im(dcol.data(), cg, f, gimg);
              }
            }
          }
        if (rec.inputs.size() > 2 && sink.needs(2)) {
          auto gb = sink.grad(2);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t o = 0; o < oc; ++o) {
              const double* src = gout.data() + (b * oc + o) * npix;
              double acc = 0.0;
              for (std::size_t i = 0; i < npix; ++i) acc += src[i];
              gb[o] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// transposed_conv2d

Tensor transposed_conv2d(const Tensor& x, const Conv2dParams& p) {
  return transposed_conv2d(x, p.weight, p.bias, p.geometry());
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
  require_rank4(x, "transposed_conv2d");
  if (weight.shape().rank() != 4) throw ShapeError("transposed_conv2d: weight must be [inC, outC/groups, kH, kW]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ocg = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (g.groups == 0 || weight.dim(0) != c || c % g.groups)
    throw ShapeError("transposed_conv2d: input has " + std::to_string(c) + " channels but weight is " +
                     weight.shape().str());
  const std::size_t oc = ocg * g.groups;
  check_bias(bias, oc, "transposed_conv2d");
  const std::ptrdiff_t oh_s = static_cast<std::ptrdiff_t>((h - 1) * g.stride_h + g.dilation_h * (kh - 1) + 1) -
                              2 * static_cast<std::ptrdiff_t>(g.pad_h);
  const std::ptrdiff_t ow_s = static_cast<std::ptrdiff_t>((w - 1) * g.stride_w + g.dilation_w * (kw - 1) + 1) -
                              2 * static_cast<std::ptrdiff_t>(g.pad_w);
  if (oh_s < 1 || ow_s < 1) throw ShapeError("transposed_conv2d: output extent < 1");
  const auto oh = static_cast<std::size_t>(oh_s), ow = static_cast<std::size_t>(ow_s);

  // The equivalent forward convolution maps the (oh, ow) output back onto (h, w).
  const ConvFrame f{oh, ow, kh, kw, h, w, g};
  const std::size_t cg = c / g.groups;
  const std::size_t k = ocg * kh * kw;
  const std::size_t npix = h * w;

  std::vector<double> out(n * oc * oh * ow, 0.0);
  std::vector<double> col(k * npix);
  const auto xd = x.data();
  const auto wd = weight.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < g.groups; ++gi) {
      ConstMapMat xm(xd.data() + (b * c + gi * cg) * npix, cg, npix);
      ConstMapMat wm(wd.data() + gi * cg * k, cg, k);
      MapMat(col.data(), k, npix).noalias() = wm.transpose() * xm;
      col2im(col.data(), ocg, f, out.data() + (b * oc + gi * ocg) * oh * ow);
    }
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < oc; ++o) {
        double* dst = out.data() + (b * oc + o) * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) dst[i] += bd[o];
      }
  }
  MacCounter::record(static_cast<std::uint64_t>(n * c * npix * k));

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      Shape{n, oc, oh, ow}, std::move(out), "transposed_conv2d", std::move(inputs),
      [f, n, c, oc, cg, ocg, k, npix](const detail::Node& node, std::span<const double> gout,
                                      detail::GradSink& sink) {
        const auto& rec = *node.record;
        const auto& xd = rec.inputs[0]->data;
        const auto& wd = rec.inputs[1]->data;
        const bool need_x = sink.needs(0), need_w = sink.needs(1);
        std::span<double> gx = need_x ? sink.grad(0) : std::span<double>{};
        std::span<double> gw = need_w ? sink.grad(1) : std::span<double>{};
        std::vector<double> col(k * npix);
        const std::size_t out_plane = f.h * f.w;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t gi = 0; gi < f.g.groups; ++gi) {
            im2col(gout.data() + (b * oc + gi * ocg) * out_plane, ocg, f, col.data());
            ConstMapMat cm(col.data(), k, npix);
            if (need_x) {
              ConstMapMat wm(wd.data() + gi * cg * k, cg, k);
              MapMat(gx.data() + (b * c + gi * cg) * npix, cg, npix).noalias() += wm * cm;
            }
            if (need_w) {
              ConstMapMat xm(xd.data() + (b * c + gi * cg) * npix, cg, npix);
              MapMat(gw.data() + gi * cg * k, cg, k).noalias() += xm * cm.transpose();
            }
          }
        if (rec.inputs.size() > 2 && sink.needs(2)) {
          auto gb = sink.grad(2);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t o = 0; o < oc; ++o) {
              const double* src = gout.data() + (b * oc + o) * out_plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += src[i];
              gb[o] += acc;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// batch_norm

BatchNormState BatchNormState::make(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor::create(Shape{channels}, init::Ones{});
  s.gamma.set_requires_grad();
  s.beta = Tensor::create(Shape{channels});
  s.beta.set_requires_grad();
  s.running_mean = Tensor::create(Shape{channels});
  s.running_var = Tensor::create(Shape{channels}, init::Ones{});
  return s;
}

Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode) {
  require_rank4(x, "batch_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != state.channels())
    throw ShapeError("batch_norm: input has " + std::to_string(c) + " channels, state has " +
                     std::to_string(state.channels()));
  const double m = static_cast<double>(n * hw);
  const auto xd = x.data();
  const auto gamma = state.gamma.data();
  const auto beta = state.beta.data();

  std::vector<double> mu(c), inv_std(c);
  if (mode != Mode::kEval) {
    const double keep = mode == Mode::kTrain ? 1.0 - state.momentum : 1.0;
    const double add = mode == Mode::kTrain ? state.momentum : 1.0;
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xd.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mean = s / m;
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xd.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      const double var = sq / m;
      mu[ch] = mean;
      inv_std[ch] = 1.0 / std::sqrt(var + state.epsilon);
      const double unbiased = m > 1 ? sq / (m - 1) : var;
      rm[ch] = keep * rm[ch] + add * mean;
      rv[ch] = keep * rv[ch] + add * unbiased;
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + state.epsilon);
    }
  }

  std::vector<double> xhat(xd.size()), out(xd.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[off + i] = (xd[off + i] - mu[ch]) * inv_std[ch];
        out[off + i] = gamma[ch] * xhat[off + i] + beta[ch];
      }
    }

  const bool train = mode != Mode::kEval;
  return make_result(
      x.shape(), std::move(out), "batch_norm", {x, state.gamma, state.beta},
      [n, c, hw, m, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
        const auto& gamma = node.record->inputs[1]->data;
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        if (sink.needs(1)) {
          auto gg = sink.grad(1);
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (sink.needs(2)) {
          auto gb = sink.grad(2);
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (sink.needs(0)) {
          auto gx = sink.grad(0);
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * hw;
              const double k = gamma[ch] * inv_std[ch];
              if (train) {
                const double mg = sum_g[ch] / m, mgx = sum_gx[ch] / m;
                for (std::size_t i = 0; i < hw; ++i)
                  gx[off + i] += k * (g[off + i] - mg - xhat[off + i] * mgx);
              } else {
                for (std::size_t i = 0; i < hw; ++i) gx[off + i] += k * g[off + i];
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// pooling, resizing, softmax

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank4(x, "max_pool2d");
  if (kernel == 0 || kernel != stride) throw ShapeError("max_pool2d: only kernel == stride is supported");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % stride || w % stride)
    throw ShapeError("max_pool2d: extents " + x.shape().str() + " not divisible by " + std::to_string(stride));
  const std::size_t oh = h / stride, ow = w / stride;
  const auto xd = x.data();
  std::vector<double> out(n * c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (i * stride) * w + j * stride;
        for (std::size_t u = 0; u < kernel; ++u)
          for (std::size_t v = 0; v < kernel; ++v) {
            const std::size_t idx = base + (i * stride + u) * w + j * stride + v;
            if (xd[idx] > xd[best]) best = idx;
          }
        out[o] = xd[best];
        arg[o] = best;
      }
  }
  if (BranchTrace::active())
    for (std::size_t a : arg) BranchTrace::record(a);
  return make_result(Shape{n, c, oh, ow}, std::move(out), "max_pool2d", {x},
                     [arg = std::move(arg)](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                     });
}

namespace {

struct LerpTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double w1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank4(x, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: target extents must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  const auto ty = lerp_taps(h, out_h);
  const auto tx = lerp_taps(w, out_w);
  const auto xd = x.data();
  std::vector<double> out(n * c * out_h * out_w);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xd.data() + plane * h * w;
    double* dst = out.data() + plane * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const LerpTap& a = ty[i];
      const double* r0 = src + a.i0 * w;
      const double* r1 = src + a.i1 * w;
      for (std::size_t j = 0; j < out_w; ++j) {
        const LerpTap& b = tx[j];
        dst[i * out_w + j] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) + a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
      }
    }
  }
  return make_result(Shape{n, c, out_h, out_w}, std::move(out), "bilinear_resize", {x},
                     [n, c, h, w, out_h, out_w, ty, tx](const detail::Node&, std::span<const double> g,
                                                        detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t plane = 0; plane < n * c; ++plane) {
                         double* dst = gx.data() + plane * h * w;
                         const double* src = g.data() + plane * out_h * out_w;
                         for (std::size_t i = 0; i < out_h; ++i) {
                           const LerpTap& a = ty[i];
                           for (std::size_t j = 0; j < out_w; ++j) {
                             const LerpTap& b = tx[j];
                             const double v = src[i * out_w + j];
                             dst[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                             dst[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                             dst[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                             dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.rank()) throw ShapeError("softmax: axis out of range for " + s.str());
  std::size_t outer = 1, inner = 1;
  const std::size_t extent = s[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double mx = xd[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, xd[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < extent; ++k) {
        const double e = std::exp(xd[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < extent; ++k) out[base + k * inner] /= total;
    }
  return make_result(s, std::move(out), "softmax", {x},
                     [outer, inner, extent](const detail::Node& node, std::span<const double> g,
                                            detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       const auto& y = node.data;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * extent * inner + i;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < extent; ++k) dot += g[base + k * inner] * y[base + k * inner];
                           for (std::size_t k = 0; k < extent; ++k) {
                             const std::size_t idx = base + k * inner;
                             gx[idx] += y[idx] * (g[idx] - dot);
                           }
                         }
                     });
}

// ---------------------------------------------------------------------------
// patches

namespace {

// Maps flat indices of the unfolded layout onto the NCHW image layout.
std::vector<std::size_t> patch_permutation(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  const std::size_t gh = h / p, gw = w / p;
  std::vector<std::size_t> perm(n * c * h * w);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t u = 0; u < p; ++u)
      for (std::size_t v = 0; v < p; ++v)
        for (std::size_t i = 0; i < gh; ++i)
          for (std::size_t j = 0; j < gw; ++j) perm[o++] = plane * h * w + (i * p + u) * w + j * p + v;
  return perm;
}

}  // namespace

Tensor unfold_patches(const Tensor& x, std::size_t p) {
  require_rank4(x, "unfold_patches");
  if (p == 0) throw ConfigError("unfold_patches: patch size must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % p || w % p)
    throw ShapeError("unfold_patches: extents " + x.shape().str() + " not divisible by p=" + std::to_string(p));
  auto perm = patch_permutation(n, c, h, w, p);
  const auto xd = x.data();
  std::vector<double> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = xd[perm[i]];
  return make_result(Shape{n, c, p * p, (h / p) * (w / p)}, std::move(out), "unfold_patches", {x},
                     [perm = std::move(perm)](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < perm.size(); ++i) gx[perm[i]] += g[i];
                     });
}

Tensor fold_patches(const Tensor& x, std::size_t p, std::size_t h, std::size_t w) {
  require_rank4(x, "fold_patches");
  if (p == 0) throw ConfigError("fold_patches: patch size must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (h % p || w % p || x.dim(2) != p * p || x.dim(3) != (h / p) * (w / p))
    throw ShapeError("fold_patches: " + x.shape().str() + " is not an unfolding of " + std::to_string(h) + "x" +
                     std::to_string(w) + " with p=" + std::to_string(p));
  auto perm = patch_permutation(n, c, h, w, p);
  const auto xd = x.data();
  std::vector<double> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[perm[i]] = xd[i];
  return make_result(Shape{n, c, h, w}, std::move(out), "fold_patches", {x},
                     [perm = std::move(perm)](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < perm.size(); ++i) gx[i] += g[perm[i]];
                     });
}

// ---------------------------------------------------------------------------
// dropout, pad, crop

Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, Mode mode) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (mode != Mode::kTrain || rate == 0.0) return x;
  std::mt19937_64 rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = (static_cast<double>(rng() >> 11) * 0x1.0p-53) < rate ? 0.0 : keep_scale;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return make_result(x.shape(), std::move(out), "dropout", {x},
                     [mask = std::move(mask)](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                     });
}

Tensor pad2d(const Tensor& x, std::size_t bottom, std::size_t right) {
  require_rank4(x, "pad2d");
  if (bottom == 0 && right == 0) return x;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = h + bottom, pw = w + right;
  const auto xd = x.data();
  std::vector<double> out(n * c * ph * pw, 0.0);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(xd.data() + (plane * h + i) * w, w, out.data() + (plane * ph + i) * pw);
  return make_result(Shape{n, c, ph, pw}, std::move(out), "pad2d", {x},
                     [n, c, h, w, ph, pw](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t plane = 0; plane < n * c; ++plane)
                         for (std::size_t i = 0; i < h; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             gx[(plane * h + i) * w + j] += g[(plane * ph + i) * pw + j];
                     });
}

Tensor crop2d(const Tensor& x, std::size_t h, std::size_t w) {
  require_rank4(x, "crop2d");
  const std::size_t n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (h == 0 || w == 0 || h > ih || w > iw) throw ShapeError("crop2d: window exceeds " + x.shape().str());
  if (h == ih && w == iw) return x;
  const auto xd = x.data();
  std::vector<double> out(n * c * h * w);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(xd.data() + (plane * ih + i) * iw, w, out.data() + (plane * h + i) * w);
  return make_result(Shape{n, c, h, w}, std::move(out), "crop2d", {x},
                     [n, c, h, w, ih, iw](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t plane = 0; plane < n * c; ++plane)
                         for (std::size_t i = 0; i < h; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             gx[(plane * ih + i) * iw + j] += g[(plane * h + i) * w + j];
                     });
}

// ---------------------------------------------------------------------------

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = this; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }

void MacCounter::record(std::uint64_t macs) {
  if (g_mac_counter) g_mac_counter->total_ += macs;
}

}  // namespace hcf
