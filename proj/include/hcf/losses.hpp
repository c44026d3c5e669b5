#pragma once

#include <span>
#include <vector>

#include "hcf/tensor.hpp"

namespace hcf {

/// Mean over all pixels of -[y log s(z) + (1-y) log(1-s(z))], evaluated as
/// max(z,0) - z*y + log1p(exp(-|z|)). Targets must be exactly 0 or 1.
Tensor bce_loss(const Tensor& logits, const Tensor& target);

inline constexpr double kSoftIouEpsilon = 1e-6;

/// 1 - (sum p*y + eps) / (sum p + sum y - sum p*y + eps) per image (leading
/// axis), averaged over the batch; p = sigmoid(z).
Tensor soft_iou_loss(const Tensor& logits, const Tensor& target);

/// sum_i lambda_i * (bce_i + soft_iou_i).
Tensor deep_supervision_loss(std::span<const Tensor> logits, const Tensor& target, std::span<const double> lambdas);

}  // namespace hcf
