#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "hcf/adam.hpp"
#include "hcf/network.hpp"

namespace hcf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Optimizer section of a checkpoint.
struct TrainingSnapshot {
  AdamState optimizer;
  std::uint64_t epochs_completed = 0;
};

struct LoadedCheckpoint {
  Network network;
  std::optional<TrainingSnapshot> training;
};

/// Layout (little-endian): "HCFC", u32 version, u32 length + NetworkConfig text,
/// u64 init seed, u32 count + (u32 name length, name, tensor blob) per
/// parameter, the same for buffers, u8 optimizer flag and, when set, u64 step,
/// u64 epochs completed, u32 count + (name, first-moment blob,
/// second-moment blob) per parameter.
void save_checkpoint(const std::string& path, const Network& net, const TrainingSnapshot* training = nullptr);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace hcf
