#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hcf/adam.hpp"
#include "hcf/config_file.hpp"
#include "hcf/metrics.hpp"
#include "hcf/network.hpp"
#include "hcf/synthetic.hpp"

namespace hcf {

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t epochs = 30;
  /// Stops after this many optimizer steps when non-zero.
  std::size_t max_steps = 0;
  AdamHyper adam;
  std::uint64_t seed = 0;
  std::string checkpoint = "hcfnet.ckpt";
  /// Directory of `<id>.pgm` / `<id>_mask.pgm` pairs; empty selects synthetic data.
  std::string data_dir;
  std::size_t synthetic_samples = 8;
  SyntheticConfig synthetic;

  void validate() const;
  /// Keys: batch_size, epochs, max_steps, lr, beta1, beta2, adam_eps, seed,
  /// checkpoint, data_dir, data_n, data_seed, image_height, image_width,
  /// min_objects, max_objects.
  static TrainConfig read(const KeyValueFile& kv);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean step loss
  double iou = 0.0;       // pooled IoU of the finest head over the epoch's training steps
  /// `epoch=<i> loss=<float> iou=<float>`
  std::string to_line() const;
};

struct TrainOutcome {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
};

/// Loads `data_dir`, or generates the synthetic set.
std::vector<SegmentationSample> load_training_data(const TrainConfig& cfg);
std::vector<SegmentationSample> load_dataset_dir(const std::string& dir);
void save_dataset_dir(const std::string& dir, const std::vector<SegmentationSample>& data);

/// Adam on the deep-supervision loss. Batches follow a per-epoch shuffle derived
/// from (seed, epoch); dropout masks derive from the global step. After every
/// epoch the batch-norm statistics are recalibrated and the checkpoint (with
/// optimizer state) is written and logs one EpochRecord
/// line per epoch to `log`. With `resume_from`, the network, optimizer and epoch
/// counter come from that checkpoint and training continues where it stopped.
/// A non-finite loss or gradient writes the pre-step state to the checkpoint
/// path and rethrows.
TrainOutcome train(const TrainConfig& train_cfg, const NetworkConfig& net_cfg,
                   const std::vector<SegmentationSample>& data, std::ostream* log = nullptr,
                   const std::string& resume_from = "");

/// Replaces every batch-norm running mean and variance with the average batch
/// moments over `data`, taken in order in chunks of `batch_size` with dropout
/// off. The moving averages kept during training lag the weights, and layers
/// whose channels have collapsed in training amplify that lag by up to
/// 1/sqrt(eps) in eval mode. Parameters are untouched.
void recalibrate_batch_norm(Network& net, const std::vector<SegmentationSample>& data, std::size_t batch_size);

/// Stacks samples [1,H,W] into [B,1,H,W].
Tensor stack_images(const std::vector<SegmentationSample>& data, std::span<const std::size_t> indices, bool masks);

/// Sigmoid of the finest head in eval mode, [1,H,W]. Inputs whose extents are
/// not multiples of 2^(stages-1) are zero padded at the bottom/right and the
/// output is cropped back.
Tensor predict_probability(Network& net, const Tensor& image);

MetricsReport evaluate(Network& net, const std::vector<SegmentationSample>& data);

struct InferenceFiles {
  std::string mask_path;
  std::string probability_path;
};

/// Writes `<stem>_mask.pgm` (0/255 at threshold 0.5) and `<stem>_prob.pgm`.
InferenceFiles infer(Network& net, const std::string& image_path, const std::string& out_dir);

}  // namespace hcf
