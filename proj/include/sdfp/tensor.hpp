#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdfp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an API precondition is violated (e.g. backward on a
/// non-scalar root).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Process-wide accounting of tensor buffer allocations. Used to assert
/// memory-complexity properties (e.g. that no [B x N x N x F] buffer is
/// materialised on a given code path).
struct AllocationStats {
  std::uint64_t buffers = 0;
  std::uint64_t total_elements = 0;
  std::size_t largest_buffer = 0;
};

AllocationStats allocation_stats();
void reset_allocation_stats();

class Tape;

/// Dense row-major array of doubles. Values are immutable once built; a
/// tensor may additionally refer to a node on a GradientTape, in which case
/// operations on it are recorded for reverse-mode differentiation.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  std::span<const double> data() const&;
  /// The span would dangle once the temporary is gone.
  std::span<const double> data() const&& = delete;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::size_t row, std::size_t col) const;
  /// Value of a single-element tensor.
  double item() const;
  std::vector<double> to_vector() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::int64_t node() const { return node_; }

  /// Same storage, no tape node.
  Tensor detached() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::int64_t node_ = -1;
};

/// Gradients produced by one backward pass, keyed by tape node.
class Gradients {
 public:
  /// Gradient for a tracked tensor; zeros of the tensor's shape when the
  /// tensor did not influence the root.
  Tensor of(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  friend class Tape;
  std::vector<std::vector<double>> grads_;
  std::vector<Shape> shapes_;
};

/// Ordered record of executed operations. Single owner; cleared between
/// training iterations.
class Tape {
 public:
  using Grad = std::vector<double>;
  /// Receives the output gradient and one (possibly null) accumulator per
  /// parent. A null accumulator marks a parent that needs no gradient.
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<Grad* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor watch(const Tensor& value);

  /// Reverse replay from a scalar root.
  Gradients backward(const Tensor& root) const;

  void clear();
  std::size_t size() const { return nodes_.size(); }

  /// Records an operation result. Parents that are untracked are stored as
  /// -1 and receive no gradient.
  Tensor record(Shape shape, std::vector<double> value,
                std::initializer_list<const Tensor*> parents, BackwardFn fn);
  Tensor record(Shape shape, std::vector<double> value,
                std::span<const Tensor* const> parents, BackwardFn fn);

 private:
  struct Node {
    std::vector<std::int64_t> parents;
    BackwardFn backward;
    Shape shape;
  };
  std::vector<Node> nodes_;
};

/// Tape shared by a set of operands, or nullptr when none is tracked.
/// Throws ContractError when operands live on different tapes.
Tape* common_tape(std::initializer_list<const Tensor*> operands);

// ---------------------------------------------------------------------------
// Elementary operations. Every operation records a tape node when any input
// is tracked. Binary elementwise operations broadcast with trailing-dimension
// alignment.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
/// 1 / sqrt(x), elementwise.
Tensor rsqrt(const Tensor& x);
Tensor sum_over_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_over_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor reshape(const Tensor& x, Shape shape);
/// Gathers entries of `x` along `axis` (indices may repeat).
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);
Tensor stop_gradient(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op);

/// Elementwise exp and tanh over raw buffers (in may alias out). Each value
/// depends only on its input, not on its position in the buffer.
void exp_values(std::span<const double> in, std::span<double> out);
void tanh_values(std::span<const double> in, std::span<double> out);
/// Logistic function via exp(-|x|), the same arithmetic as sigmoid().
void sigmoid_values(std::span<const double> in, std::span<double> out);

/// Keeps large freed buffers in the heap instead of returning them to the
/// system. Tape-heavy training allocates many multi-megabyte temporaries per
/// step; without this each one costs fresh page faults. Process-wide.
void tune_allocator();

/// Raw GEMM kernel, C = A * B with A [m x k], B [k x n], row-major. Each
/// output element accumulates over k sequentially with fused multiply-add,
/// so results for a row do not depend on how many rows are in the batch.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n);

}  // namespace sdfp
