#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace hcf {

// Error taxonomy. The CLI maps IoError to exit code 2 and everything else to 1.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Extents of a dense row-major tensor, rank 1 to 4.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> extents);
  explicit Shape(std::span<const std::size_t> extents);

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return extents_[axis]; }
  std::size_t numel() const;
  std::span<const std::size_t> extents() const { return {extents_.data(), rank_}; }

  /// Row-major stride of `axis` in elements.
  std::size_t stride(std::size_t axis) const;

  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i)
      if (a.extents_[i] != b.extents_[i]) return false;
    return true;
  }

 private:
  std::array<std::size_t, kMaxRank> extents_{};
  std::size_t rank_ = 0;
};

namespace init {
struct Zeros {};
struct Ones {};
struct Constant {
  double value;
};
struct Uniform {
  std::uint64_t seed;
  double lo = 0.0;
  double hi = 1.0;
};
/// He-uniform: U(-b, b) with b = sqrt(6 / fan_in); fan_in is the product of all
/// extents after the first (or the sole extent for rank 1).
struct Kaiming {
  std::uint64_t seed;
};
}  // namespace init

using Init = std::variant<init::Zeros, init::Ones, init::Constant, init::Uniform, init::Kaiming>;

class Tensor;

namespace detail {

struct Node;

/// Buffers that receive input gradients while one tape record is replayed.
class GradSink {
 public:
  virtual ~GradSink() = default;
  /// True when input `i` of the record is on a gradient path.
  virtual bool needs(std::size_t i) const = 0;
  /// Zero-initialized (on first request) accumulation buffer for input `i`.
  virtual std::span<double> grad(std::size_t i) = 0;
};

using BackwardFn = std::function<void(const Node& out, std::span<const double> grad_out, GradSink& sink)>;

/// One record of the computation tape. Records are sequence-numbered at
/// creation, so sorting reachable records by `seq` is a topological order.
struct TapeRecord {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<Node>> inputs;
  const Node* output = nullptr;
  BackwardFn backward;
};

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until the first backward reaches this leaf
  std::shared_ptr<TapeRecord> record;

  bool on_tape() const { return requires_grad || record != nullptr; }
};

}  // namespace detail

/// Dense double-precision tensor handle. Copies share storage; values are
/// immutable through the public API except via `mutable_data()` (used by
/// optimizers and batch-norm running statistics) and the gradient slot.
class Tensor {
 public:
  Tensor() = default;

  static Tensor create(const Shape& shape, const Init& how = init::Zeros{});
  static Tensor from_data(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value) { return from_data(Shape{1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const { return shape().numel(); }
  std::size_t dim(std::size_t axis) const { return shape()[axis]; }

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  /// Accumulated gradient; zeros if no backward pass has reached this tensor.
  std::vector<double> grad() const;
  void zero_grad();

  /// Fresh leaf with a copy of the values and no tape history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// While alive, non-differentiable ops (ReLU, max, the similarity clamp) fold
/// the branch each element took into a digest. Two forward passes with equal
/// digests ran through the same piecewise-smooth region, so finite differences
/// between them are meaningful.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t digest() const { return digest_; }

  static bool active();
  static void record(std::uint64_t value);

 private:
  std::uint64_t digest_ = 0xcbf29ce484222325ull;
  BranchTrace* previous_;
};

/// Builds an op output and, when any input is on the tape and recording is
/// enabled, appends a tape record. Non-finite values are rejected.
Tensor make_result(const Shape& shape, std::vector<double> values, const char* op,
                   std::vector<Tensor> inputs, detail::BackwardFn backward);

/// Reverse sweep from a single-element tensor. Gradients accumulate into every
/// reachable leaf with requires_grad until `zero_grad()` is called.
void backward(const Tensor& scalar_loss);

void zero_grads(std::span<Tensor> tensors);

// Elementwise ops. Binary ops broadcast numpy-style: shapes are right-aligned
// and an extent of 1 stretches.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

Shape broadcast_shape(const Shape& a, const Shape& b);

// Reductions with a fixed left-to-right summation order.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces one axis, keeping it with extent 1.
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
/// Max over one axis; the gradient goes to the first maximal element.
Tensor max_axis(const Tensor& x, std::size_t axis);

// Layout ops.
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// out[..., k, ...] = x[..., indices[k], ...] along `axis`.
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);

// Binary blob: "HCFT", u32 rank, u32 extents[rank], f64 payload, little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace hcf
