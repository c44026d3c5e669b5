#include "hcf/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace hcf {

// ---------------------------------------------------------------------------
// Shape

Shape::Shape(std::initializer_list<std::size_t> extents)
    : Shape(std::span<const std::size_t>(extents.begin(), extents.size())) {}

Shape::Shape(std::span<const std::size_t> extents) {
  if (extents.empty() || extents.size() > kMaxRank)
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(extents.size()));
  for (std::size_t i = 0; i < extents.size(); ++i) {
    if (extents[i] == 0) throw ShapeError("tensor extents must be positive");
    extents_[i] = extents[i];
  }
  rank_ = extents.size();
}

std::size_t Shape::numel() const {
  if (rank_ == 0) return 0;
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= extents_[i];
  return n;
}

std::size_t Shape::stride(std::size_t axis) const {
  std::size_t s = 1;
  for (std::size_t i = axis + 1; i < rank_; ++i) s *= extents_[i];
  return s;
}

std::string Shape::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) s += ",";
    s += std::to_string(extents_[i]);
  }
  return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor basics

namespace {

// 53-bit uniform in [0,1) straight from the engine output, so values are
// identical across standard library implementations.
double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

std::size_t fan_in(const Shape& s) {
  if (s.rank() == 1) return s[0];
  return s.numel() / s[0];
}

std::shared_ptr<detail::Node> make_node(const Shape& shape, std::vector<double> values) {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data = std::move(values);
  return node;
}

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_tape_seq{0};

}  // namespace

Tensor Tensor::create(const Shape& shape, const Init& how) {
  const std::size_t n = shape.numel();
  if (n == 0) throw ShapeError("cannot create a tensor with an empty shape");
  std::vector<double> v(n, 0.0);
  std::visit(
      [&](const auto& spec) {
        using T = std::decay_t<decltype(spec)>;
        if constexpr (std::is_same_v<T, init::Ones>) {
          std::fill(v.begin(), v.end(), 1.0);
        } else if constexpr (std::is_same_v<T, init::Constant>) {
          std::fill(v.begin(), v.end(), spec.value);
        } else if constexpr (std::is_same_v<T, init::Uniform>) {
          std::mt19937_64 rng(spec.seed);
          for (auto& x : v) x = spec.lo + (spec.hi - spec.lo) * unit_uniform(rng);
        } else if constexpr (std::is_same_v<T, init::Kaiming>) {
          std::mt19937_64 rng(spec.seed);
          const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(shape)));
          for (auto& x : v) x = bound * (2.0 * unit_uniform(rng) - 1.0);
        }
      },
      how);
  return Tensor(make_node(shape, std::move(v)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape.numel())
    throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " + shape.str());
  for (double x : values)
    if (!std::isfinite(x)) throw NumericError("non-finite value in tensor data");
  auto node = make_node(shape, std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor, shape " + shape().str());
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.rank()) throw ShapeError("index rank mismatch");
  std::size_t off = 0, axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range");
    off = off * s[axis] + i;
    ++axis;
  }
  return node_->data[off];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (node_->record) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->data)); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {
thread_local BranchTrace* g_branch_trace = nullptr;
}  // namespace

BranchTrace::BranchTrace() : previous_(g_branch_trace) { g_branch_trace = this; }
BranchTrace::~BranchTrace() { g_branch_trace = previous_; }
bool BranchTrace::active() { return g_branch_trace != nullptr; }
void BranchTrace::record(std::uint64_t value) {
  if (!g_branch_trace) return;
  std::uint64_t& h = g_branch_trace->digest_;
  h = (h ^ value) * 0x100000001b3ull;
  h ^= h >> 29;
}

bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(const Shape& shape, std::vector<double> values, const char* op, std::vector<Tensor> inputs,
                   detail::BackwardFn backward) {
  if (values.size() != shape.numel()) throw ShapeError(std::string(op) + ": internal size mismatch");
  for (double x : values)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": produced a non-finite value");
  auto node = make_node(shape, std::move(values));
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || (t.defined() && t.node()->on_tape());
    if (any) {
      auto rec = std::make_shared<detail::TapeRecord>();
      rec->seq = g_tape_seq.fetch_add(1, std::memory_order_relaxed);
      rec->op = op;
      rec->inputs.reserve(inputs.size());
      for (auto& t : inputs) rec->inputs.push_back(t.node());
      rec->output = node.get();
      rec->backward = std::move(backward);
      node->record = std::move(rec);
    }
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Reverse sweep

namespace {

class MapSink final : public detail::GradSink {
 public:
  MapSink(const detail::TapeRecord& rec, std::unordered_map<const detail::Node*, std::vector<double>>& grads)
      : rec_(rec), grads_(grads) {}

  bool needs(std::size_t i) const override { return rec_.inputs[i]->on_tape(); }

  std::span<double> grad(std::size_t i) override {
    const detail::Node* in = rec_.inputs[i].get();
    auto& buf = grads_[in];
    if (buf.empty()) buf.assign(in->data.size(), 0.0);
    return buf;
  }

 private:
  const detail::TapeRecord& rec_;
  std::unordered_map<const detail::Node*, std::vector<double>>& grads_;
};

}  // namespace

void backward(const Tensor& scalar_loss) {
  if (!scalar_loss.defined() || scalar_loss.numel() != 1)
    throw ContractError("backward() requires a single-element loss tensor");
  const auto& root = scalar_loss.node();
  if (!root->on_tape()) throw ContractError("backward() called on a tensor that is not on the tape");

  // Collect reachable records, then replay them newest-first.
  std::vector<detail::TapeRecord*> records;
  std::unordered_set<const detail::TapeRecord*> seen;
  std::vector<const detail::Node*> stack{root.get()};
  std::vector<detail::Node*> leaves;
  std::unordered_set<const detail::Node*> leaf_seen;
  while (!stack.empty()) {
    const detail::Node* n = stack.back();
    stack.pop_back();
    if (n->record) {
      if (!seen.insert(n->record.get()).second) continue;
      records.push_back(n->record.get());
      for (const auto& in : n->record->inputs)
        if (in->on_tape()) stack.push_back(in.get());
    } else if (n->requires_grad && leaf_seen.insert(n).second) {
      leaves.push_back(const_cast<detail::Node*>(n));
    }
  }
  std::sort(records.begin(), records.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

  std::unordered_map<const detail::Node*, std::vector<double>> grads;
  grads[root.get()] = {1.0};
  for (detail::TapeRecord* rec : records) {
    auto it = grads.find(rec->output);
    if (it == grads.end()) continue;
    std::vector<double> gout = std::move(it->second);
    grads.erase(it);
    MapSink sink(*rec, grads);
    rec->backward(*rec->output, gout, sink);
  }

  for (detail::Node* leaf : leaves) {
    auto it = grads.find(leaf);
    if (it == grads.end()) continue;
    if (leaf->grad.empty()) leaf->grad.assign(leaf->data.size(), 0.0);
    for (std::size_t i = 0; i < leaf->grad.size(); ++i) leaf->grad[i] += it->second[i];
  }
}

void zero_grads(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Broadcasting elementwise ops

namespace {

struct Broadcast4 {
  std::array<std::size_t, 4> ext{1, 1, 1, 1};
  std::array<std::size_t, 4> sa{}, sb{};  // element strides, 0 on broadcast axes
};

std::array<std::size_t, 4> padded(const Shape& s) {
  std::array<std::size_t, 4> e{1, 1, 1, 1};
  const std::size_t off = 4 - s.rank();
  for (std::size_t i = 0; i < s.rank(); ++i) e[off + i] = s[i];
  return e;
}

std::array<std::size_t, 4> padded_strides(const std::array<std::size_t, 4>& e) {
  std::array<std::size_t, 4> st{};
  std::size_t s = 1;
  for (int i = 3; i >= 0; --i) {
    st[i] = e[i] == 1 ? 0 : s;
    s *= e[i];
  }
  return st;
}

Broadcast4 plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast4 p;
  const auto ea = padded(a), eb = padded(b);
  for (std::size_t i = 0; i < 4; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      throw ShapeError("shapes " + a.str() + " and " + b.str() + " are not broadcast-compatible");
    p.ext[i] = std::max(ea[i], eb[i]);
  }
  p.sa = padded_strides(ea);
  p.sb = padded_strides(eb);
  return p;
}

template <typename F>
void for_each_broadcast(const Broadcast4& p, F&& f) {
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < p.ext[0]; ++i0)
    for (std::size_t i1 = 0; i1 < p.ext[1]; ++i1)
      for (std::size_t i2 = 0; i2 < p.ext[2]; ++i2) {
        std::size_t ia = i0 * p.sa[0] + i1 * p.sa[1] + i2 * p.sa[2];
        std::size_t ib = i0 * p.sb[0] + i1 * p.sb[1] + i2 * p.sb[2];
        for (std::size_t i3 = 0; i3 < p.ext[3]; ++i3, ++o) f(o, ia + i3 * p.sa[3], ib + i3 * p.sb[3]);
      }
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const Broadcast4 plan = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(out_shape.numel());
  const auto da = a.data(), db = b.data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = op == BinOp::kAdd ? da[i] + db[i] : op == BinOp::kSub ? da[i] - db[i] : da[i] * db[i];
  } else {
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = op == BinOp::kAdd ? da[ia] + db[ib] : op == BinOp::kSub ? da[ia] - db[ib] : da[ia] * db[ib];
    });
  }
  return make_result(out_shape, std::move(out), name, {a, b},
                     [plan, op](const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
                       const auto& rec = *node.record;
                       const auto& va = rec.inputs[0]->data;
                       const auto& vb = rec.inputs[1]->data;
                       std::span<double> ga = sink.needs(0) ? sink.grad(0) : std::span<double>{};
                       std::span<double> gb = sink.needs(1) ? sink.grad(1) : std::span<double>{};
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         switch (op) {
                           case BinOp::kAdd:
                             if (!ga.empty()) ga[ia] += g[o];
                             if (!gb.empty()) gb[ib] += g[o];
                             break;
                           case BinOp::kSub:
                             if (!ga.empty()) ga[ia] += g[o];
                             if (!gb.empty()) gb[ib] -= g[o];
                             break;
                           case BinOp::kMul:
                             if (!ga.empty()) ga[ia] += g[o] * vb[ib];
                             if (!gb.empty()) gb[ib] += g[o] * va[ia];
                             break;
                         }
                       });
                     });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.rank(), b.rank());
  std::vector<std::size_t> ext(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i + a.rank() >= rank ? a[i + a.rank() - rank] : 1;
    const std::size_t eb = i + b.rank() >= rank ? b[i + b.rank() - rank] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError("shapes " + a.str() + " and " + b.str() + " are not broadcast-compatible");
    ext[i] = std::max(ea, eb);
  }
  return Shape(std::span<const std::size_t>(ext));
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::kMul, "mul"); }

Tensor sigmoid(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    // Split by sign so exp() never overflows.
    if (d[i] >= 0) {
      out[i] = 1.0 / (1.0 + std::exp(-d[i]));
    } else {
      const double e = std::exp(d[i]);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result(x.shape(), std::move(out), "sigmoid", {x},
                     [](const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double s = node.data[i];
                         gx[i] += g[i] * s * (1.0 - s);
                       }
                     });
}

Tensor relu(const Tensor& x) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] > 0 ? d[i] : 0.0;
  if (BranchTrace::active())
    for (double v : d) BranchTrace::record(v > 0);
  return make_result(x.shape(), std::move(out), "relu", {x},
                     [](const detail::Node& node, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       const auto& in = node.record->inputs[0]->data;
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (in[i] > 0) gx[i] += g[i];
                     });
}

Tensor scale(const Tensor& x, double factor) {
  const auto d = x.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] * factor;
  return make_result(x.shape(), std::move(out), "scale", {x},
                     [factor](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
                     });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_result(Shape{1}, {acc}, "sum", {x},
                     [](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (auto& v : gx) v += g[0];
                     });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  return scale(sum(x), 1.0 / n);
}

namespace {

// Views a tensor as [outer, axis, inner] around `axis`.
struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + s.str());
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) a.inner *= s[i];
  return a;
}

Shape with_extent(const Shape& s, std::size_t axis, std::size_t extent) {
  std::vector<std::size_t> e(s.extents().begin(), s.extents().end());
  e[axis] = extent;
  return Shape(std::span<const std::size_t>(e));
}

}  // namespace

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_at(x.shape(), axis);
  const auto d = x.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k) {
      const double* src = d.data() + (o * sp.extent + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  return make_result(with_extent(x.shape(), axis, 1), std::move(out), "sum_axis", {x},
                     [sp](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < sp.extent; ++k)
                           for (std::size_t i = 0; i < sp.inner; ++i)
                             gx[(o * sp.extent + k) * sp.inner + i] += g[o * sp.inner + i];
                     });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor max_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_at(x.shape(), axis);
  const auto d = x.data();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.extent * sp.inner + i;
      for (std::size_t k = 1; k < sp.extent; ++k) {
        const std::size_t idx = (o * sp.extent + k) * sp.inner + i;
        if (d[idx] > d[best]) best = idx;
      }
      out[o * sp.inner + i] = d[best];
      arg[o * sp.inner + i] = best;
    }
  if (BranchTrace::active())
    for (std::size_t a : arg) BranchTrace::record(a);
  return make_result(with_extent(x.shape(), axis, 1), std::move(out), "max_axis", {x},
                     [arg = std::move(arg)](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
                     });
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape.numel() != x.numel())
    throw ShapeError("cannot reshape " + x.shape().str() + " to " + shape.str());
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(shape, std::move(out), "reshape", {x},
                     [](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != first.rank()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.rank(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat extent mismatch: " + s.str() + " vs " + first.str());
    extents.push_back(s[axis]);
    total += s[axis];
  }
  const Shape out_shape = with_extent(first, axis, total);
  const AxisSplit sp = split_at(out_shape, axis);
  std::vector<double> out(out_shape.numel());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    const std::size_t block = extents[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(d.data() + o * block, block, out.data() + o * sp.extent * sp.inner + offset * sp.inner);
    offset += extents[k];
  }
  return make_result(out_shape, std::move(out), "concat", parts,
                     [sp, extents](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         const std::size_t block = extents[k] * sp.inner;
                         if (sink.needs(k)) {
                           auto gk = sink.grad(k);
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                             const double* src = g.data() + o * sp.extent * sp.inner + offset * sp.inner;
                             for (std::size_t i = 0; i < block; ++i) gk[o * block + i] += src[i];
                           }
                         }
                         offset += extents[k];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit sp = split_at(x.shape(), axis);
  if (begin >= end || end > sp.extent) throw ShapeError("slice range out of bounds for " + x.shape().str());
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return index_select(x, axis, idx);
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  const AxisSplit sp = split_at(x.shape(), axis);
  if (indices.empty()) throw ShapeError("index_select with no indices");
  for (std::size_t k : indices)
    if (k >= sp.extent) throw ShapeError("index_select index out of range");
  const std::size_t m = indices.size();
  const auto d = x.data();
  std::vector<double> out(sp.outer * m * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < m; ++k)
      std::copy_n(d.data() + (o * sp.extent + indices[k]) * sp.inner, sp.inner,
                  out.data() + (o * m + k) * sp.inner);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(with_extent(x.shape(), axis, m), std::move(out), "index_select", {x},
                     [sp, idx = std::move(idx)](const detail::Node&, std::span<const double> g,
                                                detail::GradSink& sink) {
                       auto gx = sink.grad(0);
                       const std::size_t m = idx.size();
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < m; ++k) {
                           double* dst = gx.data() + (o * sp.extent + idx[k]) * sp.inner;
                           const double* src = g.data() + (o * m + k) * sp.inner;
                           for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated tensor blob");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated tensor blob");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("HCFT", 4);
  const Shape& s = t.shape();
  put_u32(out, static_cast<std::uint32_t>(s.rank()));
  for (std::size_t e : s.extents()) put_u32(out, static_cast<std::uint32_t>(e));
  for (double x : t.data()) put_f64(out, x);
  if (!out) throw IoError("failed to write tensor blob");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "HCFT") throw IoError("bad tensor magic");
  const std::uint32_t rank = get_u32(in);
  if (rank == 0 || rank > Shape::kMaxRank) throw IoError("bad tensor rank in blob");
  std::vector<std::size_t> ext(rank);
  for (auto& e : ext) e = get_u32(in);
  for (std::size_t e : ext)
    if (e == 0) throw IoError("zero extent in tensor blob");
  const Shape shape{std::span<const std::size_t>(ext)};
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = get_f64(in);
  return Tensor::from_data(shape, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) return false;
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i)
    if (std::bit_cast<std::uint64_t>(da[i]) != std::bit_cast<std::uint64_t>(db[i])) return false;
  return true;
}

}  // namespace hcf
