// Command-line front end: train, infer, eval, gradcheck, report, gen-data.
// Exit codes: 0 success, 1 contract/config violation, 2 I/O failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "hcf/checkpoint.hpp"
#include "hcf/gradcheck_suites.hpp"
#include "hcf/trainer.hpp"

namespace {

using namespace hcf;

constexpr double kGradTolerance = 1e-4;

KeyValueFile load_config(const std::string& path) {
  static const std::set<std::string> known = {
      "stages",      "widths",      "in_channels", "dilations",   "patch_sizes", "use_ppa",  "use_dasi",
      "use_mdcr",    "dropout",     "lambdas",     "batch_size",  "epochs",      "max_steps", "lr",
      "beta1",       "beta2",       "adam_eps",    "seed",        "checkpoint",  "data_dir", "data_n",
      "data_seed",   "image_height", "image_width", "min_objects", "max_objects"};
  KeyValueFile kv = KeyValueFile::load(path);
  for (const auto& [key, value] : kv.entries())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "' in " + path);
  return kv;
}

int run_train(const std::string& config_path, std::optional<std::uint64_t> seed, const std::string& resume) {
  const KeyValueFile kv = load_config(config_path);
  TrainConfig tc = TrainConfig::read(kv);
  if (seed) tc.seed = *seed;
  const NetworkConfig nc = NetworkConfig::read(kv);
  const auto data = load_training_data(tc);
  const TrainOutcome out = train(tc, nc, data, &std::cout, resume);
  std::cout << "checkpoint=" << tc.checkpoint << " steps=" << out.steps << "\n";
  return 0;
}

int run_infer(const std::string& ckpt, const std::string& image, const std::string& out_dir) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const InferenceFiles files = infer(loaded.network, image, out_dir);
  std::cout << "mask=" << files.mask_path << " prob=" << files.probability_path << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt);
  const auto data = load_dataset_dir(data_dir);
  std::cout << evaluate(loaded.network, data).to_line() << "\n";
  return 0;
}

int run_gradcheck(const std::vector<std::string>& modules, std::uint64_t seed, std::size_t sample) {
  bool ok = true;
  for (const auto& m : modules) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport r = run_gradcheck_suite(m, seed, sample);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass = r.max_relative_error < kGradTolerance;
    ok = ok && pass;
    std::printf("module=%s max_rel_error=%.3e coordinates=%zu nonsmooth=%zu seconds=%.2f worst=(leaf %zu, index %zu, analytic %.6e, numeric %.6e) %s\n", m.c_str(), r.max_relative_error,
                r.coordinates, r.nonsmooth, secs, r.worst_leaf, r.worst_index, r.worst_analytic, r.worst_numeric, pass ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

int run_report(const std::string& config_path, std::size_t batch, std::size_t height, std::size_t width,
               std::uint64_t seed) {
  const NetworkConfig cfg = NetworkConfig::read(load_config(config_path));
  Network net = Network::build(cfg, seed);
  std::map<std::string, std::size_t> groups;
  std::vector<std::string> order;
  for (const auto& p : net.tensors().parameters) {
    const std::string group = p.name.substr(0, p.name.find('.'));
    if (!groups.count(group)) order.push_back(group);
    groups[group] += p.tensor.numel();
  }
  std::printf("%-14s %12s\n", "component", "parameters");
  for (const auto& g : order) std::printf("%-14s %12zu\n", g.c_str(), groups[g]);
  const ModelSize size = count_params_macs(net, Shape{batch, cfg.in_channels, height, width});
  std::printf("%-14s %12llu\n", "total", static_cast<unsigned long long>(size.parameters));
  std::printf("params=%llu macs=%llu input=%zux%zux%zux%zu\n", static_cast<unsigned long long>(size.parameters),
              static_cast<unsigned long long>(size.macs), batch, cfg.in_channels, height, width);
  return 0;
}

int run_gen_data(const std::string& out, std::size_t n, std::uint64_t seed, std::size_t height, std::size_t width) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.height = height;
  cfg.width = width;
  save_dataset_dir(out, generate_dataset(cfg, n));
  std::cout << "wrote " << n << " samples to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HCF-Net infrared small-object segmentation"};
  app.require_subcommand(1);

  std::string config, ckpt, image, out_dir, data_dir, resume, out;
  std::uint64_t seed_value = 0;
  std::size_t n = 0, height = 512, width = 512, batch = 1;

  auto* train_cmd = app.add_subcommand("train", "train a model; logs epoch=<i> loss=<f> iou=<f>");
  train_cmd->add_option("--config", config, "key=value config file")->required();
  auto* seed_opt = train_cmd->add_option("--seed", seed_value, "overrides the config seed");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");

  auto* infer_cmd = app.add_subcommand("infer", "write mask and probability map for one PGM image");
  infer_cmd->add_option("--ckpt", ckpt)->required();
  infer_cmd->add_option("--image", image)->required();
  infer_cmd->add_option("--out-dir", out_dir)->required();

  auto* eval_cmd = app.add_subcommand("eval", "IoU / nIoU over a directory of <id>.pgm + <id>_mask.pgm");
  eval_cmd->add_option("--ckpt", ckpt)->required();
  eval_cmd->add_option("--data", data_dir)->required();

  std::string module = "all";
  std::uint64_t grad_seed = 7;
  auto* grad_cmd = app.add_subcommand("gradcheck", "central-difference gradient checks");
  grad_cmd->add_option("--module", module)->check(CLI::IsMember({"ppa", "dasi", "mdcr", "net", "all"}));
  grad_cmd->add_option("--seed", grad_seed);
  std::size_t grad_sample = 20;
  grad_cmd->add_option("--sample", grad_sample, "parameter coordinates sampled for --module net");

  std::uint64_t report_seed = 0;
  auto* report_cmd = app.add_subcommand("report", "parameter and MAC counts");
  report_cmd->add_option("--config", config)->required();
  report_cmd->add_option("--height", height);
  report_cmd->add_option("--width", width);
  report_cmd->add_option("--batch", batch);
  report_cmd->add_option("--seed", report_seed);

  std::size_t gen_h = 64, gen_w = 64;
  std::uint64_t gen_seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic PGM dataset");
  gen_cmd->add_option("--out", out)->required();
  gen_cmd->add_option("--n", n)->required();
  gen_cmd->add_option("--seed", gen_seed);
  gen_cmd->add_option("--height", gen_h);
  gen_cmd->add_option("--width", gen_w);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train_cmd)
      return run_train(config, seed_opt->count() ? std::optional<std::uint64_t>(seed_value) : std::nullopt, resume);
    if (*infer_cmd) return run_infer(ckpt, image, out_dir);
    if (*eval_cmd) return run_eval(ckpt, data_dir);
    if (*grad_cmd) return run_gradcheck(module == "all" ? gradcheck_suite_names() : std::vector{module}, grad_seed, grad_sample);
    if (*report_cmd) return run_report(config, batch, height, width, report_seed);
    if (*gen_cmd) return run_gen_data(out, n, gen_seed, gen_h, gen_w);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
