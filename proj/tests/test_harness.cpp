#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hcf/adam.hpp"
#include "hcf/checkpoint.hpp"
#include "hcf/config_file.hpp"
#include "hcf/pgm.hpp"
#include "hcf/trainer.hpp"
#include "oracles.hpp"

using namespace hcf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hcf_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

NetworkConfig toy_net() {
  NetworkConfig c;
  c.stages = 2;
  c.widths = {8, 16};
  return c;
}

TrainConfig toy_train(const fs::path& dir) {
  TrainConfig t;
  t.epochs = 3;
  t.seed = 5;
  t.checkpoint = (dir / "toy.ckpt").string();
  t.synthetic_samples = 6;
  t.synthetic.height = t.synthetic.width = 32;
  t.synthetic.seed = 2;
  return t;
}

// Each 4-connected component must be a digital disk of radius 1..3.
bool components_are_disks(const Tensor& mask, std::size_t& count) {
  const std::size_t h = mask.dim(1), w = mask.dim(2);
  const auto m = mask.data();
  std::vector<int> seen(h * w, 0);
  count = 0;
  for (std::size_t s = 0; s < h * w; ++s) {
    if (m[s] == 0.0 || seen[s]) continue;
    ++count;
    std::vector<std::size_t> stack{s}, comp;
    seen[s] = 1;
    while (!stack.empty()) {
      const std::size_t k = stack.back();
      stack.pop_back();
      comp.push_back(k);
      const std::size_t y = k / w, x = k % w;
      const std::size_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] >= h || q[1] >= w) continue;
        const std::size_t j = q[0] * w + q[1];
        if (m[j] != 0.0 && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    std::size_t y0 = h, y1 = 0, x0 = w, x1 = 0;
    for (std::size_t k : comp) {
      y0 = std::min(y0, k / w), y1 = std::max(y1, k / w);
      x0 = std::min(x0, k % w), x1 = std::max(x1, k % w);
    }
    if (y1 - y0 != x1 - x0 || (y1 - y0) % 2) return false;
    const std::size_t r = (y1 - y0) / 2;
    if (r < 1 || r > 3 || comp.size() != disk_area(r)) return false;
    const long cy = static_cast<long>(y0 + r), cx = static_cast<long>(x0 + r);
    for (std::size_t k : comp) {
      const long dy = static_cast<long>(k / w) - cy, dx = static_cast<long>(k % w) - cx;
      if (dy * dy + dx * dx > static_cast<long>(r * r)) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("synthetic samples satisfy the small-object invariants") {
  SyntheticConfig cfg;
  cfg.seed = 11;
  const auto data = generate_dataset(cfg, 100);
  double coverage = 0.0;
  for (const auto& s : data) {
    REQUIRE(s.image.shape() == Shape{1, 64, 64});
    REQUIRE(s.mask.shape() == Shape{1, 64, 64});
    for (double v : s.image.data()) CHECK((v >= 0.0 && v <= 1.0));
    double on = 0.0;
    for (double v : s.mask.data()) {
      CHECK((v == 0.0 || v == 1.0));
      on += v;
    }
    std::size_t objects = 0;
    CHECK(components_are_disks(s.mask, objects));
    CHECK(objects <= 3);
    CHECK(on / 4096.0 <= 0.005);
    coverage += on / 4096.0;
  }
  coverage /= 100.0;
  CHECK(coverage >= 0.0001);
  CHECK(coverage <= 0.005);
  CHECK(data[7].id == "sample_0007");
}

TEST_CASE("synthetic generator: determinism and degenerate configs") {
  SyntheticConfig cfg;
  cfg.seed = 3;
  const auto a = generate_dataset(cfg, 4), b = generate_dataset(cfg, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(bitwise_equal(a[i].image, b[i].image));
    CHECK(bitwise_equal(a[i].mask, b[i].mask));
  }
  cfg.seed = 4;
  CHECK_FALSE(bitwise_equal(generate_dataset(cfg, 1)[0].image, a[0].image));

  cfg.min_objects = cfg.max_objects = 0;
  for (const auto& s : generate_dataset(cfg, 5))
    for (double v : s.mask.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(generate_dataset(cfg, 0), ConfigError);
  CHECK(disk_area(1) == 5);
  CHECK(disk_area(2) == 13);
  CHECK(disk_area(3) == 29);
}

TEST_CASE("PGM round trip, 8 and 16 bit") {
  const fs::path dir = scratch("pgm");
  for (std::uint16_t maxval : {std::uint16_t{255}, std::uint16_t{4095}}) {
    GrayImage img;
    img.width = 5;
    img.height = 3;
    img.maxval = maxval;
    for (std::size_t i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint16_t>((i * 977) % (maxval + 1)));
    const std::string path = (dir / ("img" + std::to_string(maxval) + ".pgm")).string();
    write_pgm(path, img);
    const GrayImage back = read_pgm(path);
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.maxval == maxval);
    CHECK(back.pixels == img.pixels);
    const Tensor t = image_to_tensor(back);
    CHECK(t.shape() == Shape{1, 3, 5});
    CHECK(t.data()[1] == static_cast<double>(img.pixels[1]) / maxval);
  }
  std::ofstream(dir / "comment.pgm", std::ios::binary) << "P5\n# made by hand\n2 1\n255\n" << '\x07' << '\xff';
  CHECK(read_pgm((dir / "comment.pgm").string()).pixels == std::vector<std::uint16_t>{7, 255});
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
  CHECK_THROWS_AS(read_pgm((dir / "short.pgm").string()), IoError);
  std::ofstream(dir / "ascii.pgm") << "P2\n1 1\n255\n0\n";
  CHECK_THROWS_AS(read_pgm((dir / "ascii.pgm").string()), IoError);
  CHECK_THROWS_AS(read_pgm((dir / "missing.pgm").string()), IoError);
}

TEST_CASE("Adam: zero gradient, first step, quadratic bowl") {
  const AdamHyper hyper{.lr = 0.1};

  // Fresh state and no gradient: nothing moves.
  Tensor z = Tensor::from_data(Shape{2}, {5.0, -3.0}, true);
  const NamedTensor nz[] = {{"z", z}};
  AdamState sz = AdamState::for_parameters(nz);
  adam_step(nz, sz, hyper);
  CHECK(oracle::values(z) == oracle::Vec{5.0, -3.0});

  // First step with constant gradient 2x: update is lr * sign(g).
  Tensor x = Tensor::from_data(Shape{2}, {5.0, -3.0}, true);
  const NamedTensor named[] = {{"x", x}};
  AdamState st = AdamState::for_parameters(named);
  backward(sum(mul(x, x)));
  adam_step(named, st, hyper);
  CHECK(std::abs(x.data()[0] - 4.9) < 1e-9);
  CHECK(std::abs(x.data()[1] - -2.9) < 1e-9);

  // Zero gradient afterwards: both moments decay toward 0.
  const double m_before = st.first_moment[0][0], v_before = st.second_moment[0][0];
  x.zero_grad();
  adam_step(named, st, hyper);
  CHECK(st.first_moment[0][0] == 0.9 * m_before);
  CHECK(st.second_moment[0][0] == 0.999 * v_before);

  // 200 steps on |x|^2 from [5, -3] against the scalar recurrence.
  Tensor y = Tensor::from_data(Shape{2}, {5.0, -3.0}, true);
  const NamedTensor ny[] = {{"y", y}};
  AdamState sy = AdamState::for_parameters(ny);
  double ref[2] = {5.0, -3.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 200; ++t) {
    y.zero_grad();
    backward(sum(mul(y, y)));
    adam_step(ny, sy, hyper);
    for (int i = 0; i < 2; ++i) {
      const double g = 2.0 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(std::abs(y.data()[0] - ref[0]) < 1e-12);
  CHECK(std::abs(y.data()[1] - ref[1]) < 1e-12);
  CHECK(std::hypot(y.data()[0], y.data()[1]) < 0.05);
}

TEST_CASE("Adam rejects a non-finite gradient and names the parameter") {
  Tensor a = Tensor::from_data(Shape{1}, {1.0}, true), b = Tensor::from_data(Shape{1}, {1e-300}, true);
  const Tensor c = Tensor::from_data(Shape{1}, {1e10});
  const NamedTensor named[] = {{"alpha", a}, {"beta", b}};
  AdamState st = AdamState::for_parameters(named);
  // Finite loss whose gradient with respect to b overflows: d/db = 1e300 * 1e10.
  const Tensor loss = sum(add(a, scale(mul(b, c), 1e300)));
  bool threw = false;
  try {
    backward(loss);
    adam_step(named, st, {});
  } catch (const NumericError& e) {
    threw = true;
    const std::string what = e.what();
    CHECK((what.find("beta") != std::string::npos || what.find("gradient") != std::string::npos));
  }
  CHECK(threw);
  CHECK(a.data()[0] == 1.0);
  CHECK(b.data()[0] == 1e-300);
}

TEST_CASE("training config parsing and validation") {
  const KeyValueFile kv = KeyValueFile::parse("batch_size=2\nepochs=7\nlr=0.01\nseed=9\ndata_n=5\ndata_seed=4\n");
  const TrainConfig t = TrainConfig::read(kv);
  CHECK(t.batch_size == 2);
  CHECK(t.epochs == 7);
  CHECK(t.adam.lr == 0.01);
  CHECK(t.seed == 9);
  CHECK(t.synthetic_samples == 5);
  CHECK(t.synthetic.seed == 4);
  CHECK_THROWS_AS(TrainConfig::read(KeyValueFile::parse("batch_size=0\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::read(KeyValueFile::parse("lr=0\n")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::read(KeyValueFile::parse("lr=-1\n")), ConfigError);
}

TEST_CASE("training smoke run, log format and checkpoint") {
  const fs::path dir = scratch("smoke");
  TrainConfig t = toy_train(dir);
  t.epochs = 1;
  t.synthetic_samples = 4;
  const auto data = load_training_data(t);
  std::ostringstream log;
  const TrainOutcome out = train(t, toy_net(), data, &log);
  REQUIRE(out.epochs.size() == 1);
  CHECK(out.steps == 1);
  CHECK(std::isfinite(out.epochs[0].loss));
  CHECK(log.str().rfind("epoch=1 loss=", 0) == 0);
  CHECK(log.str().find(" iou=") != std::string::npos);
  CHECK(fs::exists(t.checkpoint));
  const LoadedCheckpoint ck = load_checkpoint(t.checkpoint);
  REQUIRE(ck.training.has_value());
  CHECK(ck.training->optimizer.step == 1);
  CHECK(ck.training->epochs_completed == 1);
}

TEST_CASE("training is deterministic and resume reproduces the trajectory") {
  const fs::path dir = scratch("resume");
  TrainConfig t = toy_train(dir);
  const auto data = load_training_data(t);
  const auto before = oracle::values(data[0].image);

  std::ostringstream full_log, again_log;
  const TrainOutcome full = train(t, toy_net(), data, &full_log);
  t.checkpoint = (dir / "again.ckpt").string();
  train(t, toy_net(), data, &again_log);
  CHECK(full_log.str() == again_log.str());
  CHECK(slurp(dir / "toy.ckpt") == slurp(dir / "again.ckpt"));
  CHECK(oracle::values(data[0].image) == before);

  TrainConfig first = t;
  first.epochs = 1;
  first.checkpoint = (dir / "part.ckpt").string();
  std::ostringstream part_log;
  train(first, toy_net(), data, &part_log);
  TrainConfig rest = t;
  rest.checkpoint = (dir / "part.ckpt").string();
  const TrainOutcome resumed = train(rest, toy_net(), data, &part_log, rest.checkpoint);
  CHECK(part_log.str() == full_log.str());
  CHECK(resumed.steps == full.steps);
  CHECK(slurp(dir / "part.ckpt") == slurp(dir / "toy.ckpt"));
}

TEST_CASE("checkpoint round trip reproduces forward outputs bitwise") {
  const fs::path dir = scratch("ckpt");
  TrainConfig t = toy_train(dir);
  t.epochs = 2;
  const auto data = load_training_data(t);
  train(t, toy_net(), data);
  LoadedCheckpoint a = load_checkpoint(t.checkpoint);
  save_checkpoint((dir / "copy.ckpt").string(), a.network, a.training ? &*a.training : nullptr);
  CHECK(slurp(dir / "copy.ckpt") == slurp(t.checkpoint));
  LoadedCheckpoint b = load_checkpoint((dir / "copy.ckpt").string());
  const std::size_t idx[] = {0, 1};
  const Tensor x = stack_images(data, idx, false);
  const auto la = a.network.forward(x, Mode::kEval), lb = b.network.forward(x, Mode::kEval);
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(bitwise_equal(la[i], lb[i]));
  const auto ta = a.network.forward(x, Mode::kTrain, 3), tb = b.network.forward(x, Mode::kTrain, 3);
  CHECK(bitwise_equal(ta[0], tb[0]));

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), IoError);
  CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), IoError);
}

TEST_CASE("inference writes deterministic mask and probability files") {
  const fs::path dir = scratch("infer");
  Network net = Network::build(toy_net(), 1);
  SyntheticConfig sc;
  sc.height = 31;  // not a multiple of 2: padded and cropped
  sc.width = 29;
  const auto sample = generate_sample(sc, 0);
  write_pgm((dir / "scene.pgm").string(), tensor_to_image(sample.image));

  const InferenceFiles f1 = infer(net, (dir / "scene.pgm").string(), (dir / "a").string());
  const InferenceFiles f2 = infer(net, (dir / "scene.pgm").string(), (dir / "b").string());
  CHECK(fs::path(f1.mask_path).filename() == "scene_mask.pgm");
  CHECK(fs::path(f1.probability_path).filename() == "scene_prob.pgm");
  CHECK(slurp(f1.mask_path) == slurp(f2.mask_path));
  CHECK(slurp(f1.probability_path) == slurp(f2.probability_path));
  const GrayImage mask = read_pgm(f1.mask_path);
  CHECK(mask.width == 29);
  CHECK(mask.height == 31);
  for (auto v : mask.pixels) CHECK((v == 0 || v == 255));

  GrayImage zero;
  zero.width = zero.height = 16;
  zero.pixels.assign(256, 0);
  write_pgm((dir / "zero.pgm").string(), zero);
  const InferenceFiles fz = infer(net, (dir / "zero.pgm").string(), (dir / "z").string());
  CHECK(read_pgm(fz.probability_path).pixels.size() == 256);
  const Tensor p = predict_probability(net, image_to_tensor(zero));
  for (double v : p.data()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(infer(net, (dir / "nope.pgm").string(), (dir / "c").string()), IoError);
}

TEST_CASE("evaluate reports metrics in range") {
  Network net = Network::build(toy_net(), 2);
  SyntheticConfig sc;
  sc.height = sc.width = 32;
  const auto data = generate_dataset(sc, 3);
  const MetricsReport r = evaluate(net, data);
  CHECK(r.n_images == 3);
  CHECK((r.iou >= 0.0 && r.iou <= 1.0));
  CHECK((r.niou >= 0.0 && r.niou <= 1.0));
  const std::vector<SegmentationSample> one{data[0]};
  const MetricsReport r1 = evaluate(net, one);
  CHECK(r1.iou == r1.niou);
  CHECK_THROWS_AS(evaluate(net, {}), DomainError);
}

TEST_CASE("batch-norm recalibration matches eval to train-mode statistics") {
  NetworkConfig cfg = toy_net();
  cfg.dropout = 0.0;
  Network net = Network::build(cfg, 4);
  SyntheticConfig sc;
  sc.height = sc.width = 32;
  const auto data = generate_dataset(sc, 4);
  const std::size_t all[] = {0, 1, 2, 3};
  const Tensor x = stack_images(data, all, false);
  std::vector<Tensor> params_before;
  for (const auto& p : net.tensors().parameters) params_before.push_back(p.tensor.detach());

  const auto max_prob_gap = [&] {
    const Tensor a = net.forward(x, Mode::kEval)[0];
    std::vector<double> running;
    for (const auto& b : net.tensors().buffers) running.insert(running.end(), b.tensor.data().begin(), b.tensor.data().end());
    const Tensor b = net.forward(x, Mode::kTrain)[0];
    // Restore the running statistics the train-mode pass moved.
    std::size_t k = 0;
    for (const auto& buf : net.tensors().buffers) {
      Tensor t = buf.tensor;
      for (auto& v : t.mutable_data()) v = running[k++];
    }
    double gap = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
      gap = std::max(gap, std::abs(oracle::sigmoid(a.data()[i]) - oracle::sigmoid(b.data()[i])));
    return gap;
  };
  const double fresh_gap = max_prob_gap();
  recalibrate_batch_norm(net, data, 4);
  // One batch: eval differs from train only by the unbiased variance, m/(m-1) with m >= 4*16*16.
  const double calibrated_gap = max_prob_gap();
  CHECK(calibrated_gap < 1e-2);
  CHECK(calibrated_gap < fresh_gap);

  // Idempotent, and parameters are untouched.
  std::vector<double> first;
  for (const auto& b : net.tensors().buffers) first.insert(first.end(), b.tensor.data().begin(), b.tensor.data().end());
  recalibrate_batch_norm(net, data, 4);
  std::size_t k = 0;
  bool same = true;
  for (const auto& b : net.tensors().buffers)
    for (double v : b.tensor.data()) same &= v == first[k++];
  CHECK(same);
  for (std::size_t i = 0; i < params_before.size(); ++i)
    CHECK(bitwise_equal(net.tensors().parameters[i].tensor, params_before[i]));

  // Partial final batch: 3 samples in chunks of 2 average two batches.
  recalibrate_batch_norm(net, {data[0], data[1], data[2]}, 2);
  for (const auto& b : net.tensors().buffers)
    for (double v : b.tensor.data()) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(recalibrate_batch_norm(net, {}, 4), DomainError);
  CHECK_THROWS_AS(recalibrate_batch_norm(net, data, 0), ConfigError);
}

TEST_CASE("dataset directory round trip") {
  const fs::path dir = scratch("dataset");
  SyntheticConfig sc;
  sc.height = sc.width = 32;
  const auto data = generate_dataset(sc, 3);
  save_dataset_dir(dir.string(), data);
  const auto back = load_dataset_dir(dir.string());
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == data[i].id);
    CHECK(bitwise_equal(back[i].mask, data[i].mask));
    // 8-bit quantization of the image.
    CHECK(oracle::max_abs_diff(back[i].image.data(), data[i].image.data()) <= 0.5 / 255.0 + 1e-12);
  }
  CHECK_THROWS_AS(load_dataset_dir((dir / "missing").string()), IoError);
}

#ifdef HCFNET_BINARY
TEST_CASE("CLI exit codes") {
  const fs::path dir = scratch("cli");
  const std::string bin = HCFNET_BINARY;
  const auto run = [&](const std::string& args) {
    const int status = std::system((bin + " " + args + " > " + (dir / "out.txt").string() + " 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(run("--help") == 0);
  CHECK(run("") == 1);
  CHECK(run("train --config " + (dir / "absent.cfg").string()) == 2);
  CHECK(run("gradcheck --module nope") == 1);
  CHECK(run("eval --ckpt " + (dir / "absent.ckpt").string() + " --data " + dir.string()) == 2);

  std::ofstream(dir / "bad.cfg") << "stages=2\nwidths=8,16\nbatch_size=0\n";
  CHECK(run("train --config " + (dir / "bad.cfg").string()) == 1);
  std::ofstream(dir / "typo.cfg") << "stages=2\nwidths=8,16\nepoch=1\n";
  CHECK(run("train --config " + (dir / "typo.cfg").string()) == 1);
  CHECK(run("report --config " + (dir / "typo.cfg").string()) == 1);

  std::ofstream(dir / "toy.cfg") << "stages=2\nwidths=8,16\nepochs=1\ndata_n=4\nimage_height=32\nimage_width=32\n"
                                 << "checkpoint=" << (dir / "cli.ckpt").string() << "\n";
  CHECK(run("train --config " + (dir / "toy.cfg").string() + " --seed 3") == 0);
  CHECK(slurp(dir / "out.txt").rfind("epoch=1 loss=", 0) == 0);
  CHECK(run("gen-data --out " + (dir / "data").string() + " --n 2 --height 32 --width 32") == 0);
  CHECK(run("eval --ckpt " + (dir / "cli.ckpt").string() + " --data " + (dir / "data").string()) == 0);
  CHECK(slurp(dir / "out.txt").find("n_images=2") != std::string::npos);
  CHECK(run("infer --ckpt " + (dir / "cli.ckpt").string() + " --image " + (dir / "data" / "sample_0000.pgm").string() +
            " --out-dir " + (dir / "pred").string()) == 0);
  CHECK(fs::exists(dir / "pred" / "sample_0000_mask.pgm"));
  CHECK(run("report --config " + (dir / "toy.cfg").string() + " --height 16 --width 16") == 0);
  CHECK(slurp(dir / "out.txt").find("params=17232") != std::string::npos);
}
#endif
