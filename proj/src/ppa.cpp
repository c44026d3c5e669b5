#include "hcf/ppa.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace hcf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct CosineTerms {
  double cos = 0.0;
  double token_norm = 0.0;
  double xi_norm = 0.0;
};

// Cosine between column j of a [C, d] token matrix and xi.
CosineTerms cosine(const double* tokens, std::size_t c, std::size_t d, std::size_t j, const double* xi) {
  double dot = 0.0, tt = 0.0, xx = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    const double t = tokens[k * d + j];
    dot += t * xi[k];
    tt += t * t;
    xx += xi[k] * xi[k];
  }
  CosineTerms r;
  r.token_norm = std::sqrt(tt);
  r.xi_norm = std::sqrt(xx);
  if (r.token_norm > 0.0 && r.xi_norm > 0.0) r.cos = dot / (r.token_norm * r.xi_norm);
  return r;
}

double clamp_sim(double cos) { return std::clamp(cos, 0.0, 1.0); }

}  // namespace

PatchBranchParams PatchBranchParams::make(std::size_t channels, std::size_t patch, SeedStream& seeds) {
  if (patch == 0) throw ConfigError("patch size must be positive");
  PatchBranchParams b;
  b.patch = patch;
  const std::size_t pp = patch * patch;
  b.ffn_in = Conv2dParams::make(pp, 2 * pp, {.kernel = 1}, seeds.next());
  b.ffn_out = Conv2dParams::make(2 * pp, pp, {.kernel = 1}, seeds.next());
  b.task_embedding = Tensor::create(Shape{channels}, init::Uniform{seeds.next(), -1.0, 1.0});
  b.task_embedding.set_requires_grad();
  std::vector<double> eye(channels * channels, 0.0);
  for (std::size_t i = 0; i < channels; ++i) eye[i * channels + i] = 1.0;
  b.selection = Tensor::from_data(Shape{channels, channels}, std::move(eye), true);
  return b;
}

PpaParams PpaParams::make(std::size_t in_channels, std::size_t out_channels, std::uint64_t seed, double dropout_rate,
                          std::array<std::size_t, 2> patch_sizes, std::size_t eca_kernel_size) {
  if (eca_kernel_size % 2 == 0) throw ConfigError("ECA kernel size must be odd");
  SeedStream seeds(seed);
  PpaParams p;
  p.input_proj = Conv2dParams::make(in_channels, out_channels, {.kernel = 1}, seeds.next());
  p.local = PatchBranchParams::make(out_channels, patch_sizes[0], seeds);
  p.global = PatchBranchParams::make(out_channels, patch_sizes[1], seeds);
  for (auto& conv : p.serial) conv = Conv2dParams::make(out_channels, out_channels, {.kernel = 3, .padding = 1}, seeds.next());
  p.eca_kernel = Tensor::create(Shape{1, 1, eca_kernel_size, 1}, init::Kaiming{seeds.next()});
  p.eca_kernel.set_requires_grad();
  p.spatial = Conv2dParams::make(2, 1, {.kernel = 7, .padding = 3}, seeds.next());
  p.out_bn = BatchNormState::make(out_channels);
  p.dropout_rate = dropout_rate;
  return p;
}

void PpaParams::collect(const std::string& prefix, TensorRegistry& registry) const {
  registry.add(prefix + ".input_proj", input_proj);
  for (const auto* branch : {&local, &global}) {
    const std::string name = prefix + (branch == &local ? ".local" : ".global");
    registry.add(name + ".ffn_in", branch->ffn_in);
    registry.add(name + ".ffn_out", branch->ffn_out);
    registry.parameter(name + ".task_embedding", branch->task_embedding);
    registry.parameter(name + ".selection", branch->selection);
  }
  for (std::size_t i = 0; i < serial.size(); ++i) registry.add(prefix + ".serial" + std::to_string(i), serial[i]);
  registry.parameter(prefix + ".eca_kernel", eca_kernel);
  registry.add(prefix + ".spatial", spatial);
  registry.add(prefix + ".out_bn", out_bn);
}

std::vector<double> token_similarity(const Tensor& tokens, const Tensor& xi) {
  const Shape& s = tokens.shape();
  const std::size_t n = s.rank() == 3 ? s[0] : 1;
  const std::size_t c = s[s.rank() - 2], d = s[s.rank() - 1];
  std::vector<double> sims(n * d);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < d; ++j)
      sims[b * d + j] = clamp_sim(cosine(tokens.data().data() + b * c * d, c, d, j, xi.data().data()).cos);
  return sims;
}

Tensor feature_select(const Tensor& tokens, const Tensor& xi, const Tensor& selection) {
  const Shape& s = tokens.shape();
  if (s.rank() != 2 && s.rank() != 3) throw ShapeError("feature_select: tokens must be [C, d] or [N, C, d]");
  const std::size_t n = s.rank() == 3 ? s[0] : 1;
  const std::size_t c = s[s.rank() - 2], d = s[s.rank() - 1];
  if (xi.numel() != c) throw ShapeError("feature_select: task embedding must have " + std::to_string(c) + " entries");
  if (selection.shape() != Shape{c, c}) throw ShapeError("feature_select: selection matrix must be CxC");

  const auto td = tokens.data();
  const auto xd = xi.data();
  std::vector<double> sims(n * d), out(n * c * d);
  RowMat scaled(c, d);
  ConstMapMat pm(selection.data().data(), c, c);
  for (std::size_t b = 0; b < n; ++b) {
    const double* t = td.data() + b * c * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double cos = cosine(t, c, d, j, xd.data()).cos;
      sims[b * d + j] = clamp_sim(cos);
      BranchTrace::record(cos > 0.0);  // the upper clamp only absorbs rounding
    }
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t j = 0; j < d; ++j) scaled(k, j) = t[k * d + j] * sims[b * d + j];
    MapMat(out.data() + b * c * d, c, d).noalias() = pm * scaled;
  }
  MacCounter::record(static_cast<std::uint64_t>(n * c * c * d));

  return make_result(
      s, std::move(out), "feature_select", {tokens, xi, selection},
      [n, c, d, sims = std::move(sims)](const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
        const auto& rec = *node.record;
        const auto& td = rec.inputs[0]->data;
        const auto& xd = rec.inputs[1]->data;
        ConstMapMat pm(rec.inputs[2]->data.data(), c, c);
        const bool need_t = sink.needs(0), need_xi = sink.needs(1), need_p = sink.needs(2);
        std::span<double> gt = need_t ? sink.grad(0) : std::span<double>{};
        std::span<double> gxi = need_xi ? sink.grad(1) : std::span<double>{};
        std::span<double> gp = need_p ? sink.grad(2) : std::span<double>{};
        RowMat scaled(c, d), dscaled(c, d);
        for (std::size_t b = 0; b < n; ++b) {
          const double* t = td.data() + b * c * d;
          ConstMapMat gm(g.data() + b * c * d, c, d);
          if (need_p) {
            for (std::size_t k = 0; k < c; ++k)
              for (std::size_t j = 0; j < d; ++j) scaled(k, j) = t[k * d + j] * sims[b * d + j];
            MapMat(gp.data(), c, c).noalias() += gm * scaled.transpose();
          }
          if (!need_t && !need_xi) continue;
          dscaled.noalias() = pm.transpose() * gm;
          for (std::size_t j = 0; j < d; ++j) {
            const double sim = sims[b * d + j];
            double dsim = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
              if (need_t) gt[b * c * d + k * d + j] += dscaled(k, j) * sim;
              dsim += dscaled(k, j) * t[k * d + j];
            }
            const CosineTerms ct = cosine(t, c, d, j, xd.data());
            // Clamped region (cos <= 0) and degenerate norms pass no gradient.
            if (!(ct.cos > 0.0 && ct.cos < 1.0) || ct.token_norm == 0.0 || ct.xi_norm == 0.0) continue;
            const double inv = 1.0 / (ct.token_norm * ct.xi_norm);
            for (std::size_t k = 0; k < c; ++k) {
              const double tk = t[k * d + j];
              if (need_t) gt[b * c * d + k * d + j] += dsim * (xd[k] * inv - ct.cos * tk / (ct.token_norm * ct.token_norm));
              if (need_xi) gxi[k] += dsim * (tk * inv - ct.cos * xd[k] / (ct.xi_norm * ct.xi_norm));
            }
          }
        }
      });
}

Tensor patch_branch(const Tensor& fp, const PatchBranchParams& params) {
  if (fp.shape().rank() != 4) throw ShapeError("patch_branch: expected [N, C', H', W']");
  const std::size_t p = params.patch;
  if (p == 0) throw ConfigError("patch_branch: patch size must be positive");
  const std::size_t n = fp.dim(0), c = fp.dim(1), h = fp.dim(2), w = fp.dim(3);
  const std::size_t hp = (h + p - 1) / p * p, wp = (w + p - 1) / p * p;
  const std::size_t pp = p * p, positions = (hp / p) * (wp / p);

  const Tensor padded = pad2d(fp, hp - h, wp - w);
  const Tensor patches = unfold_patches(padded, p);  // [N, C, p*p, L]

  // Weight path: channel mean -> FFN over the patch axis -> softmax over positions.
  Tensor logits = reshape(mean_axis(patches, 1), Shape{n, pp, positions, 1});
  logits = conv2d(relu(conv2d(logits, params.ffn_in)), params.ffn_out);
  logits = reshape(logits, Shape{n, 1, pp, positions});
  // Scaled by the position count so that uniform attention leaves features unchanged.
  const Tensor weights = scale(softmax(logits, 3), static_cast<double>(positions));

  const Tensor tokens = reshape(mean_axis(mul(patches, weights), 2), Shape{n, c, positions});
  const Tensor selected = feature_select(tokens, params.task_embedding, params.selection);
  const Tensor grid = reshape(selected, Shape{n, c, hp / p, wp / p});
  return crop2d(bilinear_resize(grid, hp, wp), h, w);
}

Tensor serial_conv_branch(const Tensor& fp, const std::array<Conv2dParams, 3>& convs) {
  const Tensor c1 = conv2d(fp, convs[0]);
  const Tensor c2 = conv2d(c1, convs[1]);
  const Tensor c3 = conv2d(c2, convs[2]);
  return add(add(c1, c2), c3);
}

Tensor channel_attention_map(const Tensor& f, const Tensor& eca_kernel) {
  const std::size_t n = f.dim(0), c = f.dim(1);
  const std::size_t k = eca_kernel.dim(2);
  const Tensor pooled = reshape(mean_axis(mean_axis(f, 3), 2), Shape{n, 1, c, 1});
  ConvGeometry g;
  g.pad_h = k / 2;
  const Tensor logits = conv2d(pooled, eca_kernel, Tensor{}, g);
  return sigmoid(reshape(logits, Shape{n, c, 1, 1}));
}

Tensor channel_attention(const Tensor& f, const Tensor& eca_kernel) {
  return mul(f, channel_attention_map(f, eca_kernel));
}

Tensor spatial_attention_map(const Tensor& f, const Conv2dParams& conv) {
  const Tensor pooled = concat({mean_axis(f, 1), max_axis(f, 1)}, 1);
  return sigmoid(conv2d(pooled, conv));
}

Tensor spatial_attention(const Tensor& f, const Conv2dParams& conv) { return mul(f, spatial_attention_map(f, conv)); }

Tensor ppa_branches(const Tensor& f, const PpaParams& params) {
  if (f.shape().rank() != 4 || f.dim(1) != params.in_channels())
    throw ShapeError("ppa: expected " + std::to_string(params.in_channels()) + " input channels, got " +
                     f.shape().str());
  const Tensor fp = conv2d(f, params.input_proj);
  return add(add(patch_branch(fp, params.local), patch_branch(fp, params.global)),
             serial_conv_branch(fp, params.serial));
}

Tensor ppa_forward(const Tensor& f, PpaParams& params, Mode mode, std::uint64_t dropout_seed) {
  const Tensor fused = ppa_branches(f, params);
  const Tensor fc = channel_attention(fused, params.eca_kernel);
  const Tensor fs = spatial_attention(fc, params.spatial);
  return relu(batch_norm(dropout(fs, params.dropout_rate, dropout_seed, mode), params.out_bn, mode));
}

}  // namespace hcf
