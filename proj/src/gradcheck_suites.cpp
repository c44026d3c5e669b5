#include "hcf/gradcheck_suites.hpp"

#include "hcf/dasi.hpp"
#include "hcf/losses.hpp"
#include "hcf/mdcr.hpp"
#include "hcf/network.hpp"
#include "hcf/ppa.hpp"

namespace hcf {

namespace {

Tensor random_input(const Shape& shape, SeedStream& seeds) {
  return Tensor::create(shape, init::Uniform{seeds.next(), -1.0, 1.0});
}

// sum(r * y) for a fixed random r; a plain sum would be flat after train-mode BN.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, Tensor::create(y.shape(), init::Uniform{seed, -1.0, 1.0})));
}

std::vector<Tensor> with_parameters(std::vector<Tensor> leaves, const TensorRegistry& registry) {
  for (const auto& p : registry.parameters) leaves.push_back(p.tensor);
  return leaves;
}

GradCheckReport check(const std::function<Tensor()>& loss, std::vector<Tensor> leaves, std::size_t sample,
                      std::uint64_t seed) {
  return finite_difference_check(loss, leaves, {.eps = 1e-4, .max_coordinates = sample, .seed = seed});
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() { return {"ppa", "dasi", "mdcr", "net"}; }

GradCheckReport run_gradcheck_suite(const std::string& module, std::uint64_t seed, std::size_t net_sample) {
  SeedStream seeds(seed);
  if (module == "ppa") {
    auto params = PpaParams::make(4, 4, seeds.next());
    TensorRegistry reg;
    params.collect("ppa", reg);
    const Tensor x = random_input(Shape{1, 4, 8, 8}, seeds);
    const std::uint64_t w = seeds.next(), drop = seeds.next();
    return check([&] { return weighted_sum(ppa_forward(x, params, Mode::kTrain, drop), w); },
                 with_parameters({x}, reg), 0, seeds.next());
  }
  if (module == "dasi") {
    auto params = DasiParams::make(8, 16, 4, seeds.next());
    TensorRegistry reg;
    params.collect("dasi", reg);
    const Tensor high = random_input(Shape{1, 16, 3, 3}, seeds);
    const Tensor low = random_input(Shape{1, 4, 12, 12}, seeds);
    const Tensor u = random_input(Shape{1, 8, 6, 6}, seeds);
    const std::uint64_t w = seeds.next();
    return check([&] { return weighted_sum(dasi_forward(high, low, u, params, Mode::kTrain), w); },
                 with_parameters({high, low, u}, reg), 0, seeds.next());
  }
  if (module == "mdcr") {
    auto params = MdcrParams::make(8, {1, 3, 5, 7}, seeds.next());
    TensorRegistry reg;
    params.collect("mdcr", reg);
    const Tensor x = random_input(Shape{1, 8, 6, 6}, seeds);
    const std::uint64_t w = seeds.next();
    return check([&] { return weighted_sum(mdcr_forward(x, params, Mode::kTrain), w); }, with_parameters({x}, reg),
                 0, seeds.next());
  }
  if (module == "net") {
    NetworkConfig cfg;
    cfg.stages = 2;
    cfg.widths = {8, 16};
    Network net = Network::build(cfg, seeds.next());
    const Tensor x = Tensor::create(Shape{2, 1, 16, 16}, init::Uniform{seeds.next(), 0.0, 1.0});
    std::vector<double> mask(x.numel(), 0.0);
    for (std::size_t i = 0; i < mask.size(); i += 7) mask[i] = 1.0;
    const Tensor target = Tensor::from_data(x.shape(), std::move(mask));
    const auto lambdas = cfg.supervision_weights();
    return check(
        [&] {
          const auto logits = net.forward(x, Mode::kTrain, 0);
          return deep_supervision_loss(logits, target, lambdas);
        },
        net.parameters(), net_sample, seeds.next());
  }
  throw ConfigError("unknown gradcheck module '" + module + "' (expected ppa, dasi, mdcr or net)");
}

}  // namespace hcf
