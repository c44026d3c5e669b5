#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "hcf/tensor.hpp"

namespace hcf {

struct GradCheckOptions {
  double eps = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random sample of this many.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the relative-error denominator. Coordinates whose true
  /// gradient is zero (a bias feeding train-mode batch norm) otherwise report
  /// pure finite-difference roundoff as a relative error near 1.
  double denominator_floor = 1e-6;
  /// When a perturbed pass takes a different branch at some ReLU / max /
  /// clamp than the unperturbed pass, eps is divided by 10 (not below 1e-6)
  /// and the coordinate retried. Coordinates that still straddle a kink at
  /// the smallest step are counted in `nonsmooth` and not scored.
  bool refine_at_kinks = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t nonsmooth = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences
///   |g - (f(x+e) - f(x-e)) / 2e| / max(|g| + |numeric|, denominator_floor)
/// over coordinates of `leaves`, which are perturbed in place and restored.
/// `loss` must be deterministic and return a single-element tensor.
/// `coordinates` counts the scored coordinates.
GradCheckReport finite_difference_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                                        const GradCheckOptions& options = {});

/// Single-input form: f is evaluated at x and at perturbed copies of x.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace hcf
