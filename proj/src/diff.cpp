#include "dgik/diff.hpp"

#include "dgik/error.hpp"

#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dgik::diff {

namespace {

#if defined(__GLIBC__)
// Tapes allocate and free many multi-megabyte buffers per step. Keeping them
// on the heap instead of fresh mmap regions avoids repeated page faulting.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();
#endif

Shape shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorCode::ShapeMismatch,
              std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const std::string& what) {
  throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": shape " + to_string(a.shape()) + " " + what);
}

Tape& same_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw Error(ErrorCode::InvalidArgument, std::string(op) + ": operands belong to different tapes");
  return *a.tape();
}

Tape& tape_of(const char* op, const Tensor& a) {
  if (!a.valid()) throw Error(ErrorCode::InvalidArgument, std::string(op) + ": empty tensor");
  return *a.tape();
}

enum class Bcast { Same, Row };

Bcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  shape_error(op, a, b);
}

template <class Fwd, class Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tape& t = tape_of(op, a);
  const int ia = a.id();
  return t.record(fwd(a.value()), {ia}, [ia, bwd](Tape& tp, const Matrix& g, const Matrix& out) {
    tp.accumulate_with(ia, [&](Matrix& ga) { bwd(ga, g, tp.value_of(ia), out); });
  });
}

}  // namespace

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << "[" << s.rows << ", " << s.cols << "]";
  return os.str();
}

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

void GradientBuffer::add(Parameter* p, const Matrix& g) {
  for (auto& [q, acc] : entries_) {
    if (q == p) {
      acc += g;
      return;
    }
  }
  entries_.emplace_back(p, g);
}

void GradientBuffer::flush() {
  for (auto& [p, g] : entries_) {
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
    p->grad += g;
  }
  entries_.clear();
}

const Matrix& Tensor::value() const { return tape_->value_of(id_); }
Shape Tensor::shape() const { return shape_of(value()); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

double Tensor::item() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) shape_error("item", *this, "is not a scalar");
  return v(0, 0);
}

Tensor Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::variable(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::record(Matrix value, std::vector<int> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (int p : parents) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p)].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::ensure_grad(Node& n) {
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) n.grad.setZero(n.value.rows(), n.value.cols());
}

void Tape::accumulate(int id, const Matrix& g) {
  accumulate_with(id, [&](Matrix& acc) { acc += g; });
}

void Tape::backward(const Tensor& loss, GradientBuffer* sink) {
  if (loss.tape() != this) throw Error(ErrorCode::InvalidArgument, "backward: loss belongs to a different tape");
  if (loss.rows() != 1 || loss.cols() != 1) shape_error("backward", loss, "is not a scalar loss");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  Node& root = nodes_[static_cast<std::size_t>(loss.id())];
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad, n.value);
    if (n.param) {
      if (sink) {
        sink->add(n.param, n.grad);
      } else {
        Parameter& p = *n.param;
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
        p.grad += n.grad;
      }
    }
  }
}

Matrix Tape::grad(const Tensor& t) const {
  const Node& n = nodes_[static_cast<std::size_t>(t.id())];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape("add", a, b);
  const Bcast k = broadcast_kind("add", a, b);
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value();
  if (k == Bcast::Same) out += b.value();
  else out.rowwise() += b.value().row(0);
  return t.record(std::move(out), {ia, ib}, [ia, ib, k](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_expr(ia, g);
    if (k == Bcast::Same) tp.accumulate_expr(ib, g);
    else tp.accumulate_expr(ib, g.colwise().sum());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape("sub", a, b);
  const Bcast k = broadcast_kind("sub", a, b);
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value();
  if (k == Bcast::Same) out -= b.value();
  else out.rowwise() -= b.value().row(0);
  return t.record(std::move(out), {ia, ib}, [ia, ib, k](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_expr(ia, g);
    if (k == Bcast::Same) tp.accumulate_expr(ib, -g);
    else tp.accumulate_expr(ib, -g.colwise().sum());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape("mul", a, b);
  const Bcast k = broadcast_kind("mul", a, b);
  const int ia = a.id(), ib = b.id();
  Matrix out;
  if (k == Bcast::Same) out = a.value().cwiseProduct(b.value());
  else out = a.value().array().rowwise() * b.value().row(0).array();
  return t.record(std::move(out), {ia, ib}, [ia, ib, k](Tape& tp, const Matrix& g, const Matrix&) {
    const Matrix& av = tp.value_of(ia);
    const Matrix& bv = tp.value_of(ib);
    if (k == Bcast::Same) {
      tp.accumulate_expr(ia, g.cwiseProduct(bv));
      tp.accumulate_expr(ib, g.cwiseProduct(av));
    } else {
      tp.accumulate_expr(ia, (g.array().rowwise() * bv.row(0).array()).matrix());
      tp.accumulate_expr(ib, g.cwiseProduct(av).colwise().sum());
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape("div", a, b);
  const Bcast k = broadcast_kind("div", a, b);
  const int ia = a.id(), ib = b.id();
  Matrix out;
  if (k == Bcast::Same) out = a.value().cwiseQuotient(b.value());
  else out = a.value().array().rowwise() / b.value().row(0).array();
  return t.record(std::move(out), {ia, ib}, [ia, ib, k](Tape& tp, const Matrix& g, const Matrix& o) {
    const Matrix& bv = tp.value_of(ib);
    // d(a/b)/db = -(a/b)/b
    if (k == Bcast::Same) {
      tp.accumulate_expr(ia, g.cwiseQuotient(bv));
      tp.accumulate_expr(ib, -g.cwiseProduct(o).cwiseQuotient(bv));
    } else {
      tp.accumulate_expr(ia, (g.array().rowwise() / bv.row(0).array()).matrix());
      tp.accumulate_expr(ib, (-(g.cwiseProduct(o).colwise().sum().array() / bv.array())).matrix());
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](const Matrix& x) -> Matrix { return s * x; },
               [s](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga += s * g; });
}

Tensor add_scalar(const Tensor& a, double s) {
  Tape& t = tape_of("add_scalar", a);
  const int ia = a.id();
  Matrix out = a.value().array() + s;
  return t.record(std::move(out), {ia}, [ia](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate_expr(ia, g); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape("matmul", a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const int ia = a.id(), ib = b.id();
  Matrix out;
  out.noalias() = a.value() * b.value();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_expr(ia, g * tp.value_of(ib).transpose());
    tp.accumulate_expr(ib, tp.value_of(ia).transpose() * g);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tape& t = same_tape("linear", x, w);
  same_tape("linear", x, b);
  if (x.cols() != w.rows()) shape_error("linear", x, w);
  if (b.rows() != 1 || b.cols() != w.cols()) shape_error("linear", w, b);
  const int ix = x.id(), iw = w.id(), ib = b.id();
  Matrix out(x.rows(), w.cols());
  out.rowwise() = b.value().row(0);
  out.noalias() += x.value() * w.value();
  return t.record(std::move(out), {ix, iw, ib}, [ix, iw, ib](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_expr(ix, g * tp.value_of(iw).transpose());
    tp.accumulate_expr(iw, tp.value_of(ix).transpose() * g);
    tp.accumulate_expr(ib, g.colwise().sum());
  });
}

Tensor sum(const Tensor& a) {
  return unary("sum", a, [](const Matrix& x) -> Matrix { return Matrix::Constant(1, 1, x.sum()); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga.array() += g(0, 0); });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.shape().numel());
  if (n == 0) shape_error("mean", a, "is empty");
  return unary("mean", a, [n](const Matrix& x) -> Matrix { return Matrix::Constant(1, 1, x.sum() / n); },
               [n](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga.array() += g(0, 0) / n; });
}

Tensor row_sum(const Tensor& a) {
  return unary("row_sum", a, [](const Matrix& x) -> Matrix { return x.rowwise().sum(); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga.colwise() += g.col(0); });
}

Tensor row_norm(const Tensor& a) {
  return unary("row_norm", a, [](const Matrix& x) -> Matrix { return x.rowwise().norm(); },
               [](Matrix& ga, const Matrix& g, const Matrix& x, const Matrix& n) {
                 for (Index i = 0; i < x.rows(); ++i)
                   if (n(i, 0) > 0.0) ga.row(i) += (g(i, 0) / n(i, 0)) * x.row(i);
               });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(ErrorCode::InvalidArgument, "concat_cols: no operands");
  Tape& t = tape_of("concat_cols", parts[0]);
  const Index rows = parts[0].rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (const Tensor& p : parts) {
    same_tape("concat_cols", parts[0], p);
    if (p.rows() != rows) shape_error("concat_cols", parts[0], p);
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Matrix out(rows, cols);
  Index c = 0;
  for (const Tensor& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  auto parents = ids;
  return t.record(std::move(out), std::move(parents), [ids, widths](Tape& tp, const Matrix& g, const Matrix&) {
    Index c0 = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.accumulate_expr(ids[k], g.middleCols(c0, widths[k]));
      c0 += widths[k];
    }
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    shape_error("slice_cols", a, "cannot be sliced at columns [" + std::to_string(start) + ", " +
                                     std::to_string(start + count) + ")");
  return unary("slice_cols", a, [=](const Matrix& x) -> Matrix { return x.middleCols(start, count); },
               [=](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga.middleCols(start, count) += g; });
}

Tensor row_scale(const Tensor& a, const Tensor& s) {
  Tape& t = same_tape("row_scale", a, s);
  if (s.cols() != 1 || s.rows() != a.rows()) shape_error("row_scale", a, s);
  const int ia = a.id(), is = s.id();
  Matrix out = a.value().array().colwise() * s.value().col(0).array();
  return t.record(std::move(out), {ia, is}, [ia, is](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_expr(ia, (g.array().colwise() * tp.value_of(is).col(0).array()).matrix());
    tp.accumulate_expr(is, g.cwiseProduct(tp.value_of(ia)).rowwise().sum());
  });
}

Tensor broadcast_rows(const Tensor& row, Index rows) {
  if (row.rows() != 1) shape_error("broadcast_rows", row, "is not a single row");
  return unary("broadcast_rows", row, [rows](const Matrix& x) -> Matrix { return x.replicate(rows, 1); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix&) { ga += g.colwise().sum(); });
}

Tensor gather_rows(const Tensor& a, std::span<const int> index) {
  const Index n = a.rows();
  for (int i : index)
    if (i < 0 || i >= n) shape_error("gather_rows", a, "indexed at row " + std::to_string(i));
  std::vector<int> idx(index.begin(), index.end());
  Matrix out(static_cast<Index>(idx.size()), a.cols());
  const Matrix& av = a.value();
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Index>(k)) = av.row(idx[k]);
  Tape& t = tape_of("gather_rows", a);
  const int ia = a.id();
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, const Matrix& g, const Matrix&) {
    tp.accumulate_with(ia, [&](Matrix& ga) {
      for (std::size_t k = 0; k < idx.size(); ++k) ga.row(idx[k]) += g.row(static_cast<Index>(k));
    });
  });
}

Tensor scatter_add_rows(const Tensor& a, std::span<const int> index, Index rows) {
  if (static_cast<Index>(index.size()) != a.rows())
    shape_error("scatter_add_rows", a, "does not match " + std::to_string(index.size()) + " indices");
  for (int i : index)
    if (i < 0 || i >= rows) shape_error("scatter_add_rows", a, "scattered to row " + std::to_string(i));
  std::vector<int> idx(index.begin(), index.end());
  Matrix out = Matrix::Zero(rows, a.cols());
  const Matrix& av = a.value();
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(idx[k]) += av.row(static_cast<Index>(k));
  Tape& t = tape_of("scatter_add_rows", a);
  const int ia = a.id();
  return t.record(std::move(out), {ia}, [ia, idx = std::move(idx)](Tape& tp, const Matrix& g, const Matrix&) {
    if (!tp.requires_grad(ia)) return;
    Matrix ga(static_cast<Index>(idx.size()), g.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) ga.row(static_cast<Index>(k)) = g.row(idx[k]);
    tp.accumulate_expr(ia, ga);
  });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](const Matrix& x) -> Matrix { return x.array().exp(); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) { ga += g.cwiseProduct(o); });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](const Matrix& x) -> Matrix { return x.array().log(); },
               [](Matrix& ga, const Matrix& g, const Matrix& x, const Matrix&) { ga += g.cwiseQuotient(x); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](const Matrix& x) -> Matrix { return x.array().tanh(); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) {
                 ga.array() += g.array() * (1.0 - o.array().square());
               });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, [](const Matrix& x) -> Matrix { return (1.0 + (-x.array()).exp()).inverse(); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) {
                 ga.array() += g.array() * o.array() * (1.0 - o.array());
               });
}

Tensor silu(const Tensor& a) {
  Tape& t = tape_of("silu", a);
  const int ia = a.id();
  Matrix s = (1.0 + (-a.value().array()).exp()).inverse();
  Matrix out = a.value().cwiseProduct(s);
  if (!t.grad_enabled() || !a.requires_grad()) return t.record(std::move(out), {ia}, nullptr);
  return t.record(std::move(out), {ia}, [ia, s = std::move(s)](Tape& tp, const Matrix& g, const Matrix& o) {
    // silu' = s + x·s·(1 − s) = s + o·(1 − s)
    tp.accumulate_expr(ia, (g.array() * (s.array() + o.array() * (1.0 - s.array()))).matrix());
  });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](const Matrix& x) -> Matrix { return x.array().square(); },
               [](Matrix& ga, const Matrix& g, const Matrix& x, const Matrix&) { ga.array() += 2.0 * g.array() * x.array(); });
}

Tensor sqrt(const Tensor& a) {
  return unary("sqrt", a, [](const Matrix& x) -> Matrix { return x.array().sqrt(); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) {
                 ga.array() += (o.array() > 0.0).select(g.array() / (2.0 * o.array()), 0.0);
               });
}

namespace {
Matrix row_logsumexp(const Matrix& x) {
  const Eigen::VectorXd m = x.rowwise().maxCoeff();
  Eigen::VectorXd s = (x.colwise() - m).array().exp().rowwise().sum().log().matrix();
  return s + m;
}
}  // namespace

Tensor softmax(const Tensor& a) {
  return unary("softmax", a,
               [](const Matrix& x) -> Matrix {
                 Matrix e = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
                 e.array().colwise() /= e.rowwise().sum().array();
                 return e;
               },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) {
                 const Eigen::VectorXd dot = g.cwiseProduct(o).rowwise().sum();
                 ga.array() += o.array() * (g.colwise() - dot).array();
               });
}

Tensor log_softmax(const Tensor& a) {
  return unary("log_softmax", a,
               [](const Matrix& x) -> Matrix { return x.colwise() - row_logsumexp(x).col(0); },
               [](Matrix& ga, const Matrix& g, const Matrix&, const Matrix& o) {
                 const Eigen::VectorXd gs = g.rowwise().sum();
                 ga.array() += g.array() - o.array().exp().colwise() * gs.array();
               });
}

Tensor logsumexp(const Tensor& a) {
  return unary("logsumexp", a, [](const Matrix& x) -> Matrix { return row_logsumexp(x); },
               [](Matrix& ga, const Matrix& g, const Matrix& x, const Matrix& o) {
                 ga.array() += (x.colwise() - o.col(0)).array().exp().colwise() * g.col(0).array();
               });
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& options) {
  for (const Parameter* p : params) {
    if (p->grad.size() != 0 && !p->grad.allFinite())
      throw Error(ErrorCode::NonFinite, "adam_step: non-finite gradient for parameter '" + p->name + "'");
    if (p->grad.size() != 0 && (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()))
      throw Error(ErrorCode::ShapeMismatch, "adam_step: gradient shape " + to_string(shape_of(p->grad)) +
                                                " does not match parameter '" + p->name + "' shape " +
                                                to_string(p->shape()));
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Parameter* p : params) {
      state.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    state.step = 0;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (p.grad.size() == 0) continue;
    Matrix& m = state.m[k];
    Matrix& v = state.v[k];
    m = options.beta1 * m + (1.0 - options.beta1) * p.grad;
    v = options.beta2 * v + (1.0 - options.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= options.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + options.eps);
  }
}

}  // namespace dgik::diff
