#pragma once

#include <cstddef>
#include <cstdint>

#include "hcf/tensor.hpp"

namespace hcf {

/// kCalibrate re-estimates batch-norm statistics: batch norm behaves as in
/// training but sums each batch's moments into the running buffers, and
/// dropout is off. See recalibrate_batch_norm.
enum class Mode { kTrain, kEval, kCalibrate };

/// Per-axis convolution geometry. Padding is zero padding.
struct ConvGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t dilation_h = 1, dilation_w = 1;
  std::size_t groups = 1;

  static ConvGeometry uniform(std::size_t stride, std::size_t padding, std::size_t dilation, std::size_t groups) {
    return {stride, stride, padding, padding, dilation, dilation, groups};
  }
};

/// Output extent of a convolution along one axis; 0 when the window does not fit.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad,
                            std::size_t dilation);

struct ConvSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
  bool bias = true;
};

/// Weight [outC, inC/groups, kH, kW] and optional bias [outC].
struct Conv2dParams {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) * groups; }
  ConvGeometry geometry() const { return ConvGeometry::uniform(stride, padding, dilation, groups); }

  /// Kaiming-uniform weights, zero bias, both marked trainable.
  static Conv2dParams make(std::size_t in_channels, std::size_t out_channels, const ConvSpec& spec,
                           std::uint64_t seed);
  /// "Same" padding d*(k-1)/2 for odd k at stride 1.
  static std::size_t same_padding(std::size_t kernel, std::size_t dilation) { return dilation * (kernel - 1) / 2; }
};

Tensor conv2d(const Tensor& x, const Conv2dParams& p);
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);

/// Adjoint of conv2d with respect to its input. Weight layout [inC, outC/groups, kH, kW];
/// output extent (H-1)*stride - 2*pad + dilation*(k-1) + 1.
Tensor transposed_conv2d(const Tensor& x, const Conv2dParams& p);
Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);

/// Affine terms are trainable; running statistics are plain buffers.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  std::size_t channels() const { return gamma.numel(); }
  static BatchNormState make(std::size_t channels);
};

/// Per-channel normalization over N, H, W. Train mode normalizes with batch
/// moments and folds them into the running statistics (unbiased variance);
/// eval mode uses the running statistics only. Calibrate mode normalizes like
/// train mode and adds the batch mean and unbiased variance to the running buffers.
Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode);

/// Non-overlapping max pooling; ties route the gradient to the first element in row-major order.
Tensor max_pool2d(const Tensor& x, std::size_t kernel = 2, std::size_t stride = 2);

/// Bilinear interpolation with half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// [N,C,H,W] -> [N,C,p*p,(H/p)*(W/p)], out[n,c,u*p+v,i*(W/p)+j] = x[n,c,i*p+u,j*p+v].
Tensor unfold_patches(const Tensor& x, std::size_t p);
/// Inverse of unfold_patches for an H x W target.
Tensor fold_patches(const Tensor& x, std::size_t p, std::size_t h, std::size_t w);

/// Inverted dropout; identity outside train mode or when rate is 0. The keep mask is
/// a pure function of `seed`.
Tensor dropout(const Tensor& x, double rate, std::uint64_t seed, Mode mode);

/// Zero padding on the bottom and right edges of an NCHW tensor.
Tensor pad2d(const Tensor& x, std::size_t bottom, std::size_t right);
/// Keeps the top-left h x w window of an NCHW tensor.
Tensor crop2d(const Tensor& x, std::size_t h, std::size_t w);

/// Accumulates multiply-accumulate counts of conv-like ops on this thread while alive.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t total() const { return total_; }
  static void record(std::uint64_t macs);

 private:
  std::uint64_t total_ = 0;
  MacCounter* previous_;
};

}  // namespace hcf
