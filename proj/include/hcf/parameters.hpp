#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcf/nn_ops.hpp"
#include "hcf/tensor.hpp"

namespace hcf {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Hierarchically named handles onto a model's trainable parameters and its
/// non-trainable buffers (batch-norm running statistics). Handles share storage
/// with the model.
struct TensorRegistry {
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> buffers;

  void parameter(const std::string& name, const Tensor& t) { parameters.push_back({name, t}); }
  void buffer(const std::string& name, const Tensor& t) { buffers.push_back({name, t}); }

  void add(const std::string& prefix, const Conv2dParams& conv) {
    parameter(prefix + ".weight", conv.weight);
    if (conv.bias.defined()) parameter(prefix + ".bias", conv.bias);
  }
  void add(const std::string& prefix, const BatchNormState& bn) {
    parameter(prefix + ".gamma", bn.gamma);
    parameter(prefix + ".beta", bn.beta);
    buffer(prefix + ".running_mean", bn.running_mean);
    buffer(prefix + ".running_var", bn.running_var);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters) n += p.tensor.numel();
    return n;
  }
};

/// splitmix64 stream; every sub-module draws its init seeds from one of these.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  SeedStream s(a ^ (b * 0xD6E8FEB86659FD93ull));
  return s.next();
}

}  // namespace hcf
