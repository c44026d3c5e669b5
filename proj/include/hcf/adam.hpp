#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hcf/parameters.hpp"

namespace hcf {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers aligned with a parameter list, plus the step counter.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState for_parameters(std::span<const NamedTensor> params);
};

/// One bias-corrected Adam update using each parameter's accumulated gradient
/// (zero when absent). Throws NumericError naming the first parameter whose
/// gradient is non-finite; no parameter is modified in that case.
void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamHyper& hyper);

}  // namespace hcf
