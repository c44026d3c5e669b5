#include "hcf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "hcf/nn_ops.hpp"
#include "hcf/parameters.hpp"

namespace hcf {

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * (static_cast<double>(engine_() >> 11) * 0x1.0p-53); }
  std::size_t integer(std::size_t lo, std::size_t hi) {  // inclusive
    return lo + static_cast<std::size_t>(engine_() % (hi - lo + 1));
  }

 private:
  std::mt19937_64 engine_;
};

struct Disk {
  double cy, cx;
  std::size_t r;
};

}  // namespace

std::size_t disk_area(std::size_t radius) {
  const auto r = static_cast<std::ptrdiff_t>(radius);
  std::size_t n = 0;
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) n += dx * dx + dy * dy <= r * r;
  return n;
}

SegmentationSample generate_sample(const SyntheticConfig& cfg, std::size_t index) {
  if (cfg.height == 0 || cfg.width == 0) throw ConfigError("synthetic image extents must be positive");
  if (cfg.min_objects > cfg.max_objects || cfg.min_radius > cfg.max_radius || cfg.min_radius == 0)
    throw ConfigError("synthetic object ranges are inconsistent");
  const std::size_t h = cfg.height, w = cfg.width;
  Rng rng(mix_seed(cfg.seed, index));

  // Low-frequency background: a coarse random grid, bilinearly upsampled.
  std::vector<double> pixels;
  {
    NoGradGuard no_grad;
    const std::size_t gh = std::max<std::size_t>(2, h / 16), gw = std::max<std::size_t>(2, w / 16);
    std::vector<double> coarse(gh * gw);
    for (auto& v : coarse) v = rng.uniform(0.1, 0.4);
    const Tensor bg = bilinear_resize(Tensor::from_data(Shape{1, 1, gh, gw}, coarse), h, w);
    pixels.assign(bg.data().begin(), bg.data().end());
  }
  // Broad clutter blobs, much larger than any object.
  for (std::size_t k = 0; k < cfg.clutter_blobs; ++k) {
    const double cy = rng.uniform(0, static_cast<double>(h)), cx = rng.uniform(0, static_cast<double>(w));
    const double sigma = rng.uniform(4.0, 9.0), amp = rng.uniform(0.05, 0.2);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        pixels[y * w + x] += amp * std::exp(-d2 / (2 * sigma * sigma));
      }
  }
  for (auto& v : pixels) v += rng.uniform(-cfg.noise, cfg.noise);

  // Small targets under a total-area budget.
  std::vector<double> mask(h * w, 0.0);
  std::vector<Disk> disks;
  auto budget = static_cast<std::size_t>(std::floor(cfg.max_coverage * static_cast<double>(h * w)));
  const std::size_t count = rng.integer(cfg.min_objects, cfg.max_objects);
  for (std::size_t k = 0; k < count; ++k) {
    std::size_t r = rng.integer(cfg.min_radius, cfg.max_radius);
    while (r > cfg.min_radius && disk_area(r) > budget) --r;
    const double boost = rng.uniform(cfg.min_boost, cfg.max_boost);
    if (disk_area(r) > budget || h < 2 * r + 1 || w < 2 * r + 1) break;
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      const double cy = static_cast<double>(rng.integer(r, h - 1 - r));
      const double cx = static_cast<double>(rng.integer(r, w - 1 - r));
      placed = std::all_of(disks.begin(), disks.end(), [&](const Disk& d) {
        return std::hypot(d.cy - cy, d.cx - cx) > static_cast<double>(d.r + r + 1);
      });
      if (!placed) continue;
      disks.push_back({cy, cx, r});
      const auto ir = static_cast<std::ptrdiff_t>(r);
      for (std::ptrdiff_t dy = -ir; dy <= ir; ++dy)
        for (std::ptrdiff_t dx = -ir; dx <= ir; ++dx) {
          if (dx * dx + dy * dy > ir * ir) continue;
          const auto idx = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(cy) + dy) * w +
                           static_cast<std::size_t>(static_cast<std::ptrdiff_t>(cx) + dx);
          mask[idx] = 1.0;
          pixels[idx] += boost;
        }
      budget -= disk_area(r);
    }
  }
  for (auto& v : pixels) v = std::clamp(v, 0.0, 1.0);

  char id[32];
  std::snprintf(id, sizeof id, "sample_%04zu", index);
  return {Tensor::from_data(Shape{1, h, w}, std::move(pixels)), Tensor::from_data(Shape{1, h, w}, std::move(mask)), id};
}

std::vector<SegmentationSample> generate_dataset(const SyntheticConfig& cfg, std::size_t n) {
  if (n == 0) throw ConfigError("generate_dataset: n must be at least 1");
  std::vector<SegmentationSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

}  // namespace hcf
