#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcf/gradcheck.hpp"

namespace hcf {

/// Fixed small problems used by `hcfnet gradcheck` and the acceptance suite.
///   ppa   PPA 4->4 on 1x4x8x8, input and every parameter
///   dasi  DASI C=8 with high 1x16x3x3, low 1x4x12x12, f_u 1x8x6x6
///   mdcr  MDCR C=8 on 1x8x6x6, input and every parameter
///   net   2 stages, widths (8,16), 2x1x16x16 input, `net_sample` sampled parameters
/// Each loss is a fixed random weighting of the outputs (the deep-supervision
/// loss for `net`), evaluated in train mode, with eps 1e-4.
GradCheckReport run_gradcheck_suite(const std::string& module, std::uint64_t seed = 7, std::size_t net_sample = 20);

std::vector<std::string> gradcheck_suite_names();

}  // namespace hcf
