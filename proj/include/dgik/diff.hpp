#pragma once

// Reverse-mode automatic differentiation over dense rank-2 tensors.
//
// A Tape records every primitive applied during one forward pass; tensors
// are cheap handles into it. Learnable weights live in Parameter objects
// that outlive tapes: several tapes may read the same parameters (one per
// worker) and each backward pass accumulates into Parameter::grad.
//
// Broadcasting is limited to a 1×C row applied across all rows (the leading
// batch dimension) and to per-row scaling by an R×1 column.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dgik::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Shape {
  Index rows = 0;
  Index cols = 0;

  std::vector<Index> dims() const { return {rows, cols}; }
  Index numel() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

/// Learnable tensor plus its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v);

  Shape shape() const { return {value.rows(), value.cols()}; }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Per-worker gradient accumulator; lets independent tapes run concurrently
/// and be merged into the shared parameters afterwards.
class GradientBuffer {
 public:
  void add(Parameter* p, const Matrix& g);
  /// Adds every buffered gradient into its Parameter::grad and clears.
  void flush();
  void clear() { entries_.clear(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<std::pair<Parameter*, Matrix>> entries_;
};

/// Handle to a node on a tape.
class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  Shape shape() const;
  Index rows() const { return shape().rows; }
  Index cols() const { return shape().cols; }
  bool requires_grad() const;
  /// Scalar value of a 1×1 tensor.
  double item() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// With `grad_enabled` false no backward rules are recorded (inference).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Matrix value);
  /// Leaf whose gradient is retrievable through grad().
  Tensor variable(Matrix value);
  /// Leaf bound to a parameter; backward accumulates into p.grad.
  Tensor parameter(Parameter& p);

  /// Propagates d(loss)/d(node) through the tape. `loss` must be 1×1.
  /// Node gradients are recomputed on every call; parameter gradients
  /// accumulate across calls, into `sink` when given, else into Parameter::grad.
  void backward(const Tensor& loss, GradientBuffer* sink = nullptr);
  /// Gradient of the last backward pass with respect to `t` (zeros when
  /// `t` did not influence the loss).
  Matrix grad(const Tensor& t) const;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Used by primitive implementations.
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad, const Matrix& out_value)>;
  Tensor record(Matrix value, std::vector<int> parents, BackwardFn backward);
  const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Adds `g` into node `id`'s gradient buffer (no-op if it does not require grad).
  void accumulate(int id, const Matrix& g);
  /// Adds an Eigen expression into node `id`'s gradient, assigning directly
  /// when the buffer is still empty.
  template <class Expr>
  void accumulate_expr(int id, const Expr& e) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad.noalias() = e;
    else n.grad.noalias() += e;
  }
  template <class Fn>
  void accumulate_with(int id, Fn&& fn) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    ensure_grad(n);
    fn(n.grad);
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<int> parents;
    BackwardFn backward;
  };
  static void ensure_grad(Node& n);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// Elementwise arithmetic. `b` may be a 1×C row broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x·W + b with b a 1×C row.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Reductions.
Tensor sum(const Tensor& a);        ///< 1×1
Tensor mean(const Tensor& a);       ///< 1×1
Tensor row_sum(const Tensor& a);    ///< R×1, sums along each row
Tensor row_norm(const Tensor& a);   ///< R×1 Euclidean norm of each row

// Layout.
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, Index start, Index count);
/// Multiplies each row of `a` (R×C) by the matching entry of `s` (R×1).
Tensor row_scale(const Tensor& a, const Tensor& s);
/// Repeats a 1×C row R times.
Tensor broadcast_rows(const Tensor& row, Index rows);
/// out[k] = a[index[k]]
Tensor gather_rows(const Tensor& a, std::span<const int> index);
/// out[index[k]] += a[k], out has `rows` rows.
Tensor scatter_add_rows(const Tensor& a, std::span<const int> index, Index rows);

// Smooth elementwise maps.
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor square(const Tensor& a);
/// Gradient is taken as zero where the input is exactly zero.
Tensor sqrt(const Tensor& a);

// Row-wise (axis 1) normalizations.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor logsumexp(const Tensor& a);  ///< R×1

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Throws NonFinite naming the parameter if any gradient is not finite.
void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& options);

}  // namespace dgik::diff
