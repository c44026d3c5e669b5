#include "hcf/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace hcf {

namespace {

void put_uint(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_uint(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = in.get();
    if (c == EOF) throw IoError("checkpoint is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put_uint(out, s.size(), 4);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get_uint(in, 4);
  if (n > (1u << 24)) throw IoError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint is truncated");
  return s;
}

void put_named(std::ostream& out, const std::vector<NamedTensor>& list) {
  put_uint(out, list.size(), 4);
  for (const auto& nt : list) {
    put_string(out, nt.name);
    write_tensor(out, nt.tensor);
  }
}

// Reads a named section and copies each blob into the matching model tensor.
void get_named_into(std::istream& in, const std::vector<NamedTensor>& targets, const char* what) {
  const auto count = get_uint(in, 4);
  if (count != targets.size())
    throw IoError(std::string("checkpoint ") + what + " count " + std::to_string(count) + " does not match model (" +
                  std::to_string(targets.size()) + ")");
  for (const auto& target : targets) {
    const std::string name = get_string(in);
    if (name != target.name) throw IoError("checkpoint entry '" + name + "' where '" + target.name + "' was expected");
    const Tensor blob = read_tensor(in);
    if (!(blob.shape() == target.tensor.shape()))
      throw IoError("checkpoint entry '" + name + "' has shape " + blob.shape().str());
    Tensor dst = target.tensor;
    auto d = dst.mutable_data();
    const auto s = blob.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

Tensor vector_blob(const std::vector<double>& v, const Shape& shape) { return Tensor::from_data(shape, v); }

}  // namespace

void save_checkpoint(const std::string& path, const Network& net, const TrainingSnapshot* training) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write("HCFC", 4);
    put_uint(out, kCheckpointVersion, 4);
    put_string(out, net.config().to_text());
    put_uint(out, net.seed(), 8);
    put_named(out, net.tensors().parameters);
    put_named(out, net.tensors().buffers);
    out.put(training ? 1 : 0);
    if (training) {
      const auto& params = net.tensors().parameters;
      const AdamState& opt = training->optimizer;
      if (opt.first_moment.size() != params.size()) throw ContractError("optimizer state does not match the network");
      put_uint(out, opt.step, 8);
      put_uint(out, training->epochs_completed, 8);
      put_uint(out, params.size(), 4);
      for (std::size_t i = 0; i < params.size(); ++i) {
        put_string(out, params[i].name);
        write_tensor(out, vector_blob(opt.first_moment[i], params[i].tensor.shape()));
        write_tensor(out, vector_blob(opt.second_moment[i], params[i].tensor.shape()));
      }
    }
    out.flush();
    if (!out) throw IoError("failed while writing checkpoint " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "HCFC") throw IoError(path + " is not a checkpoint");
  const auto version = get_uint(in, 4);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const NetworkConfig cfg = NetworkConfig::read(KeyValueFile::parse(get_string(in)));
  const std::uint64_t seed = get_uint(in, 8);
  LoadedCheckpoint ckpt{Network::build(cfg, seed), std::nullopt};
  get_named_into(in, ckpt.network.tensors().parameters, "parameter");
  get_named_into(in, ckpt.network.tensors().buffers, "buffer");
  const int flag = in.get();
  if (flag == EOF) throw IoError("checkpoint is truncated");
  if (flag == 1) {
    TrainingSnapshot snap;
    snap.optimizer.step = get_uint(in, 8);
    snap.epochs_completed = get_uint(in, 8);
    const auto& params = ckpt.network.tensors().parameters;
    const auto count = get_uint(in, 4);
    if (count != params.size()) throw IoError("checkpoint optimizer section does not match the model");
    for (const auto& p : params) {
      if (get_string(in) != p.name) throw IoError("checkpoint optimizer entry out of order");
      const Tensor m = read_tensor(in), v = read_tensor(in);
      if (!(m.shape() == p.tensor.shape()) || !(v.shape() == p.tensor.shape()))
        throw IoError("checkpoint optimizer entry '" + p.name + "' has the wrong shape");
      snap.optimizer.first_moment.emplace_back(m.data().begin(), m.data().end());
      snap.optimizer.second_moment.emplace_back(v.data().begin(), v.data().end());
    }
    ckpt.training = std::move(snap);
  } else if (flag != 0) {
    throw IoError("bad optimizer flag in checkpoint");
  }
  return ckpt;
}

}  // namespace hcf
