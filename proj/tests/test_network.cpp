#include <doctest.h>

#include "hcf/gradcheck_suites.hpp"
#include "hcf/network.hpp"
#include "oracles.hpp"

using namespace hcf;

namespace {

NetworkConfig toy_config() {
  NetworkConfig c;
  c.stages = 2;
  c.widths = {8, 16};
  return c;
}

NetworkConfig ablation(int row) {
  NetworkConfig c;
  c.use_ppa = row >= 1;
  c.use_dasi = row >= 2;
  c.use_mdcr = row >= 3;
  return c;
}

}  // namespace

TEST_CASE("network emits one full-resolution logit map per scale") {
  Network net = Network::build(NetworkConfig{}, 1);
  const Tensor x = Tensor::from_data(Shape{2, 1, 32, 32}, oracle::random_values(2048, 2, 0.0, 1.0));
  const auto logits = net.forward(x, Mode::kEval);
  REQUIRE(logits.size() == 5);
  for (const auto& l : logits) CHECK(l.shape() == Shape{2, 1, 32, 32});
  const auto again = net.forward(x, Mode::kEval);
  for (std::size_t i = 0; i < 5; ++i) CHECK(bitwise_equal(logits[i], again[i]));
  CHECK_THROWS_AS(net.forward(Tensor::create(Shape{1, 1, 24, 24}), Mode::kEval), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::create(Shape{1, 2, 32, 32}), Mode::kEval), ShapeError);
}

TEST_CASE("ablation rows have strictly increasing parameter counts") {
  std::size_t previous = 0;
  for (int row = 0; row < 4; ++row) {
    const Network net = Network::build(ablation(row), 3);
    CHECK(net.parameter_count() > previous);
    previous = net.parameter_count();
  }
}

TEST_CASE("baseline row uses plain conv pairs only") {
  const Network net = Network::build(ablation(0), 3);
  for (const auto& p : net.tensors().parameters) {
    CHECK(p.name.find("skip") == std::string::npos);
    CHECK(p.name.find("bottleneck") == std::string::npos);
    CHECK(p.name.find("task_embedding") == std::string::npos);
  }
}

TEST_CASE("same seed builds identical weights") {
  const Network a = Network::build(toy_config(), 9), b = Network::build(toy_config(), 9);
  const Network c = Network::build(toy_config(), 10);
  bool any_differs = false;
  for (std::size_t i = 0; i < a.tensors().parameters.size(); ++i) {
    CHECK(bitwise_equal(a.tensors().parameters[i].tensor, b.tensors().parameters[i].tensor));
    any_differs |= !bitwise_equal(a.tensors().parameters[i].tensor, c.tensors().parameters[i].tensor);
  }
  CHECK(any_differs);
}

TEST_CASE("2-stage toy config matches the hand-summed size table") {
  // PPA(in, C) = in*C + C (projection) + 76 + C + C^2 (p=2 branch) + 1072 + C + C^2 (p=4 branch)
  //            + 3*(9C^2 + C) (serial) + 3 (ECA) + 99 (7x7 spatial) + 2C (BN)
  const std::size_t enc0 = 3178;    // PPA(1, 8)
  const std::size_t enc1 = 8930;    // PPA(8, 16)
  const std::size_t mdcr = 544;     // 4*(36+4) + (64+16) + (256+16) + 32
  const std::size_t up0 = 520;      // 16*8*2*2 + 8
  const std::size_t dasi0 = 736;    // align_high 16*8+8, fuse 9*64+8, BN 16
  const std::size_t dec0 = 3298;    // PPA(16, 8)
  const std::size_t heads = 9 + 17;
  Network net = Network::build(toy_config(), 4);
  CHECK(net.parameter_count() == enc0 + enc1 + mdcr + up0 + dasi0 + dec0 + heads);

  // MACs at 1x1x16x16, per block (projection, p=2 branch, p=4 branch, serial, ECA, spatial):
  const std::uint64_t m_enc0 = 2048 + 8192 + 17408 + 442368 + 24 + 25088;
  const std::uint64_t m_enc1 = 8192 + 5120 + 5120 + 442368 + 48 + 6272;
  const std::uint64_t m_mdcr = 9216 + 4096 + 16384;
  const std::uint64_t m_dasi0 = 8192 + 147456;
  const std::uint64_t m_up0 = 32768;
  const std::uint64_t m_dec0 = 32768 + 8192 + 17408 + 442368 + 24 + 25088;
  const std::uint64_t m_heads = 2048 + 1024;
  const ModelSize size = count_params_macs(net, Shape{1, 1, 16, 16});
  CHECK(size.parameters == net.parameter_count());
  CHECK(size.macs == m_enc0 + m_enc1 + m_mdcr + m_dasi0 + m_up0 + m_dec0 + m_heads);
  CHECK(count_params_macs(net, Shape{2, 1, 16, 16}).macs == 2 * size.macs);
}

TEST_CASE("network config text round trip and validation") {
  NetworkConfig c = toy_config();
  c.use_dasi = false;
  c.dropout = 0.25;
  KeyValueFile kv = KeyValueFile::parse(c.to_text());
  const NetworkConfig r = NetworkConfig::read(kv);
  CHECK(r.to_text() == c.to_text());
  CHECK(r.widths == c.widths);
  CHECK_FALSE(r.use_dasi);
  CHECK(r.supervision_weights() == std::vector<double>{1.0, 0.5});
  CHECK(NetworkConfig{}.supervision_weights() == std::vector<double>{1.0, 0.5, 0.25, 0.125, 0.0625});

  NetworkConfig bad = toy_config();
  bad.widths = {8};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.widths = {6, 16};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.stages = 1;
  bad.widths = {8};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.lambdas = {1.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = toy_config();
  bad.dilations = {1, 3, 3, 7};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("full network gradients match finite differences") {
  const auto rep = run_gradcheck_suite("net");
  CHECK(rep.coordinates == 20);
  CHECK(rep.max_relative_error < 1e-4);
}
