#include "hcf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <ostream>
#include <random>

#include "hcf/checkpoint.hpp"
#include "hcf/losses.hpp"
#include "hcf/pgm.hpp"

namespace hcf {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(adam.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam.eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (data_dir.empty() && synthetic_samples < 1) throw ConfigError("data_n must be at least 1");
  if (checkpoint.empty()) throw ConfigError("checkpoint path must not be empty");
}

TrainConfig TrainConfig::read(const KeyValueFile& kv) {
  TrainConfig c;
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.epochs = kv.get_size("epochs", c.epochs);
  c.max_steps = kv.get_size("max_steps", c.max_steps);
  c.adam.lr = kv.get_double("lr", c.adam.lr);
  c.adam.beta1 = kv.get_double("beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("beta2", c.adam.beta2);
  c.adam.eps = kv.get_double("adam_eps", c.adam.eps);
  c.seed = kv.get_size("seed", c.seed);
  c.checkpoint = kv.get_string("checkpoint", c.checkpoint);
  c.data_dir = kv.get_string("data_dir", c.data_dir);
  c.synthetic_samples = kv.get_size("data_n", c.synthetic_samples);
  c.synthetic.seed = kv.get_size("data_seed", c.synthetic.seed);
  c.synthetic.height = kv.get_size("image_height", c.synthetic.height);
  c.synthetic.width = kv.get_size("image_width", c.synthetic.width);
  c.synthetic.min_objects = kv.get_size("min_objects", c.synthetic.min_objects);
  c.synthetic.max_objects = kv.get_size("max_objects", c.synthetic.max_objects);
  c.validate();
  return c;
}

std::string EpochRecord::to_line() const {
  return "epoch=" + std::to_string(epoch) + " loss=" + format_double(loss) + " iou=" + format_double(iou);
}

// ---------------------------------------------------------------------------
// Data

std::vector<SegmentationSample> load_dataset_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path& p = entry.path();
    const std::string stem = p.stem().string();
    if (p.extension() == ".pgm" && !stem.ends_with("_mask")) images.push_back(p);
  }
  std::sort(images.begin(), images.end());
  std::vector<SegmentationSample> out;
  for (const auto& p : images) {
    const std::string stem = p.stem().string();
    const fs::path mask_path = p.parent_path() / (stem + "_mask.pgm");
    if (!fs::exists(mask_path)) throw IoError("missing mask for " + p.string());
    const GrayImage img = read_pgm(p.string());
    GrayImage mask = read_pgm(mask_path.string());
    if (img.width != mask.width || img.height != mask.height) throw IoError("image/mask size mismatch for " + stem);
    for (auto& v : mask.pixels) v = v > 0 ? 1 : 0;
    mask.maxval = 1;
    out.push_back({image_to_tensor(img), image_to_tensor(mask), stem});
  }
  return out;
}

void save_dataset_dir(const std::string& dir, const std::vector<SegmentationSample>& data) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  for (const auto& s : data) {
    write_pgm((fs::path(dir) / (s.id + ".pgm")).string(), tensor_to_image(s.image));
    write_pgm((fs::path(dir) / (s.id + "_mask.pgm")).string(), tensor_to_image(s.mask));
  }
}

std::vector<SegmentationSample> load_training_data(const TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    auto data = load_dataset_dir(cfg.data_dir);
    if (data.empty()) throw IoError("no images in " + cfg.data_dir);
    return data;
  }
  return generate_dataset(cfg.synthetic, cfg.synthetic_samples);
}

Tensor stack_images(const std::vector<SegmentationSample>& data, std::span<const std::size_t> indices, bool masks) {
  if (indices.empty()) throw ContractError("stack_images: empty batch");
  const Shape& s = (masks ? data[indices[0]].mask : data[indices[0]].image).shape();
  std::vector<double> v;
  v.reserve(indices.size() * s.numel());
  for (std::size_t i : indices) {
    const Tensor& t = masks ? data[i].mask : data[i].image;
    if (!(t.shape() == s)) throw ShapeError("stack_images: samples differ in shape");
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  return Tensor::from_data(Shape{indices.size(), s[0], s[1], s[2]}, std::move(v));
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

void accumulate(ConfusionCounts& total, const Tensor& logits, const Tensor& masks) {
  const auto z = logits.data();
  const auto y = masks.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const bool p = z[i] > 0.0;  // sigmoid(z) > 0.5
    const bool t = y[i] > 0.5;
    total.true_positive += p && t;
    total.predicted += p;
    total.target += t;
  }
}

double pooled_iou(const ConfusionCounts& c) {
  const std::uint64_t uni = c.predicted + c.target - c.true_positive;
  return uni == 0 ? 1.0 : static_cast<double>(c.true_positive) / static_cast<double>(uni);
}

}  // namespace

void recalibrate_batch_norm(Network& net, const std::vector<SegmentationSample>& data, std::size_t batch_size) {
  if (data.empty()) throw DomainError("recalibrate_batch_norm: empty dataset");
  if (batch_size == 0) throw ConfigError("recalibrate_batch_norm: batch size must be positive");
  NoGradGuard no_grad;
  for (const auto& b : net.tensors().buffers) {
    Tensor t = b.tensor;
    for (auto& v : t.mutable_data()) v = 0.0;
  }
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t batches = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size, ++batches) {
    const std::span<const std::size_t> idx(order.data() + begin, std::min(batch_size, order.size() - begin));
    net.forward(stack_images(data, idx, false), Mode::kCalibrate);
  }
  for (const auto& b : net.tensors().buffers) {
    Tensor t = b.tensor;
    for (auto& v : t.mutable_data()) v /= static_cast<double>(batches);
  }
}

TrainOutcome train(const TrainConfig& train_cfg, const NetworkConfig& net_cfg,
                   const std::vector<SegmentationSample>& data, std::ostream* log, const std::string& resume_from) {
  train_cfg.validate();
  if (data.empty()) throw DomainError("train: empty dataset");

  std::optional<Network> net;
  TrainingSnapshot snap;
  if (resume_from.empty()) {
    net.emplace(Network::build(net_cfg, train_cfg.seed));
    snap.optimizer = AdamState::for_parameters(net->tensors().parameters);
  } else {
    LoadedCheckpoint ckpt = load_checkpoint(resume_from);
    net.emplace(std::move(ckpt.network));
    if (!ckpt.training) throw IoError(resume_from + " has no optimizer state to resume from");
    snap = std::move(*ckpt.training);
  }
  const NetworkConfig& cfg = net->config();
  const auto lambdas = cfg.supervision_weights();
  const auto& named = net->tensors().parameters;
  std::vector<Tensor> params = net->parameters();
  const std::size_t multiple = cfg.size_multiple();
  for (const auto& s : data)
    if (s.image.dim(1) % multiple != 0 || s.image.dim(2) % multiple != 0)
      throw ConfigError("training images must have extents divisible by " + std::to_string(multiple));

  TrainOutcome outcome;
  const std::size_t n = data.size();
  bool stop = false;
  for (std::size_t epoch = snap.epochs_completed + 1; epoch <= train_cfg.epochs && !stop; ++epoch) {
    const auto order = epoch_order(n, train_cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    ConfusionCounts counts;
    for (std::size_t begin = 0; begin < n; begin += train_cfg.batch_size) {
      if (train_cfg.max_steps != 0 && snap.optimizer.step >= train_cfg.max_steps) {
        stop = true;
        break;
      }
      const std::span<const std::size_t> idx(order.data() + begin, std::min(train_cfg.batch_size, n - begin));
      const Tensor images = stack_images(data, idx, false);
      const Tensor masks = stack_images(data, idx, true);
      double loss_value = 0.0;
      try {
        const auto logits = net->forward(images, Mode::kTrain, snap.optimizer.step);
        const Tensor loss = deep_supervision_loss(logits, masks, lambdas);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("non-finite training loss");
        accumulate(counts, logits[0], masks);
        zero_grads(params);
        backward(loss);
        adam_step(named, snap.optimizer, train_cfg.adam);
      } catch (const NumericError&) {
        snap.epochs_completed = epoch - 1;
        save_checkpoint(train_cfg.checkpoint, *net, &snap);
        throw;
      }
      outcome.step_losses.push_back(loss_value);
      loss_sum += loss_value;
      ++batches;
    }
    if (batches == 0) break;
    const EpochRecord record{epoch, loss_sum / static_cast<double>(batches), pooled_iou(counts)};
    outcome.epochs.push_back(record);
    snap.epochs_completed = epoch;
    recalibrate_batch_norm(*net, data, train_cfg.batch_size);
    save_checkpoint(train_cfg.checkpoint, *net, &snap);
    if (log) *log << record.to_line() << "\n" << std::flush;
  }
  zero_grads(params);
  outcome.steps = snap.optimizer.step;
  return outcome;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

Tensor predict_probability(Network& net, const Tensor& image) {
  if (image.shape().rank() != 3 || image.dim(0) != net.config().in_channels)
    throw ShapeError("predict_probability expects [" + std::to_string(net.config().in_channels) + ",H,W], got " +
                     image.shape().str());
  NoGradGuard no_grad;
  const std::size_t h = image.dim(1), w = image.dim(2), m = net.config().size_multiple();
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  Tensor x = reshape(image, Shape{1, image.dim(0), h, w});
  if (ph != h || pw != w) x = pad2d(x, ph - h, pw - w);
  Tensor logits = net.forward(x, Mode::kEval)[0];
  if (ph != h || pw != w) logits = crop2d(logits, h, w);
  return reshape(sigmoid(logits), Shape{1, h, w});
}

MetricsReport evaluate(Network& net, const std::vector<SegmentationSample>& data) {
  if (data.empty()) throw DomainError("evaluate: empty dataset");
  std::vector<Tensor> probs, masks;
  for (const auto& s : data) {
    probs.push_back(predict_probability(net, s.image));
    masks.push_back(s.mask);
  }
  return {iou_metric(probs, masks), niou_metric(probs, masks), data.size()};
}

InferenceFiles infer(Network& net, const std::string& image_path, const std::string& out_dir) {
  const GrayImage img = read_pgm(image_path);
  const Tensor prob = predict_probability(net, image_to_tensor(img));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  const std::string stem = fs::path(image_path).stem().string();
  InferenceFiles files{(fs::path(out_dir) / (stem + "_mask.pgm")).string(),
                       (fs::path(out_dir) / (stem + "_prob.pgm")).string()};
  GrayImage mask = tensor_to_image(prob);
  const auto p = prob.data();
  for (std::size_t i = 0; i < p.size(); ++i) mask.pixels[i] = p[i] > 0.5 ? 255 : 0;
  write_pgm(files.mask_path, mask);
  write_pgm(files.probability_path, tensor_to_image(prob));
  return files;
}

}  // namespace hcf
