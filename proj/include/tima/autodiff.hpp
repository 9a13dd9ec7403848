#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tima/error.hpp"
#include "tima/tensor.hpp"

namespace tima {

enum class OpKind {
  Leaf,
  Detach,
  Add,
  AddRow,
  Sub,
  Mul,
  Div,
  MatMul,
  Transpose,
  Sum,
  Mean,
  Exp,
  Log,
  Tanh,
  Relu,
  Square,
  Scale,
  AddScalar,
  Reciprocal,
  Clamp,
  NormalizeRows,
  LogSoftmax,
  PairwiseSqDist,
  GatherCols,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Detach: return "detach";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Square: return "square";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Reciprocal: return "reciprocal";
    case OpKind::Clamp: return "clamp";
    case OpKind::NormalizeRows: return "l2_normalize_rows";
    case OpKind::LogSoftmax: return "row_log_softmax";
    case OpKind::PairwiseSqDist: return "pairwise_sq_dist";
    case OpKind::GatherCols: return "gather_cols";
  }
  return "?";
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeNode {
  OpKind op = OpKind::Leaf;
  std::vector<std::size_t> parents;
  Tensor value;
  Tensor grad;
  // Pushes this node's gradient into its parents via Tape::accumulate.
  std::function<void(Tape&, const TapeNode&)> backprop;
};

/// Leaf gradients from one backward pass, indexed by leaf Var.
class Gradients {
 public:
  const Tensor& operator[](const Var& leaf) const {
    if (leaf.id() >= grads_.size() || grads_[leaf.id()].empty()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient requested for a non-leaf node");
    }
    return grads_[leaf.id()];
  }

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
};

/// Append-only computation record. Nodes are numbered in creation order,
/// which is a topological order because parents always exist before
/// children.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(OpKind::Leaf, {}, std::move(value), nullptr); }

  /// A leaf whose gradient nobody reads; spelled differently for intent.
  Var constant(Tensor value) { return leaf(std::move(value)); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(const Var& v) const { return nodes_.at(v.id()).value; }

  Var push(OpKind op, std::vector<std::size_t> parents, Tensor value,
           std::function<void(Tape&, const TapeNode&)> backprop) {
    if (!value.all_finite()) {
      throw Error(ErrorCode::NonFinite, std::string("non-finite value produced by ") + op_name(op));
    }
    nodes_.push_back(TapeNode{op, std::move(parents), std::move(value), Tensor{}, std::move(backprop)});
    return Var(this, nodes_.size() - 1);
  }

  /// Adds `g` into the gradient slot of node `id`.
  void accumulate(std::size_t id, const Tensor& g) {
    TapeNode& n = nodes_[id];
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void accumulate(std::size_t id, Tensor&& g) {
    TapeNode& n = nodes_[id];
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    accumulate(id, static_cast<const Tensor&>(g));
  }

  /// Reverse-mode sweep from a scalar node. Every gradient slot is reset
  /// first, so repeated calls return identical results.
  Gradients backward(const Var& loss) {
    if (loss.tape() != this) throw Error(ErrorCode::ShapeMismatch, "loss belongs to a different tape");
    if (!nodes_[loss.id()].value.is_scalar()) {
      throw Error(ErrorCode::NonScalarLoss, "loss has shape " + shape_string(nodes_[loss.id()].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor{};
    nodes_[loss.id()].grad = Tensor(nodes_[loss.id()].value.shape(), 1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      const TapeNode& n = nodes_[id];
      if (n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, n);
    }
    Gradients out;
    out.grads_.resize(nodes_.size());
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      TapeNode& n = nodes_[id];
      if (n.op != OpKind::Leaf && n.op != OpKind::Detach) continue;
      if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
      out.grads_[id] = n.grad;
    }
    return out;
  }

 private:
  std::vector<TapeNode> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error(ErrorCode::ShapeMismatch, "operands live on different tapes");
  return *a.tape();
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = Tensor::zeros_like(a);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::zeros_like(a);
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

// Elementwise unary op whose derivative is a function of (input, output).
template <typename F, typename D>
Var unary(const Var& a, OpKind op, F f, D dfdx) {
  Tape& t = *a.tape();
  Tensor out = map(a.value(), f);
  const std::size_t pa = a.id();
  return t.push(op, {pa}, std::move(out), [pa, dfdx](Tape& tape, const TapeNode& n) {
    const Tensor& x = tape.node(pa).value;
    Tensor g = Tensor::zeros_like(x);
    auto gx = g.data();
    auto go = n.grad.data();
    auto xv = x.data();
    auto yv = n.value.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = go[i] * dfdx(xv[i], yv[i]);
    tape.accumulate(pa, std::move(g));
  });
}

}  // namespace detail

/// Copies the value into a fresh parentless node: gradients stop here.
inline Var detach(const Var& a) {
  return a.tape()->push(OpKind::Detach, {}, a.value(), nullptr);
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(OpKind::Add, {pa, pb}, detail::zip(a.value(), b.value(), std::plus<>()),
                [pa, pb](Tape& tape, const TapeNode& n) {
                  tape.accumulate(pa, n.grad);
                  tape.accumulate(pb, n.grad);
                });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(OpKind::Sub, {pa, pb}, detail::zip(a.value(), b.value(), std::minus<>()),
                [pa, pb](Tape& tape, const TapeNode& n) {
                  tape.accumulate(pa, n.grad);
                  tape.accumulate(pb, detail::map(n.grad, [](double g) { return -g; }));
                });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(OpKind::Mul, {pa, pb}, detail::zip(a.value(), b.value(), std::multiplies<>()),
                [pa, pb](Tape& tape, const TapeNode& n) {
                  tape.accumulate(pa, detail::zip(n.grad, tape.node(pb).value, std::multiplies<>()));
                  tape.accumulate(pb, detail::zip(n.grad, tape.node(pa).value, std::multiplies<>()));
                });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "div");
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(OpKind::Div, {pa, pb}, detail::zip(a.value(), b.value(), std::divides<>()),
                [pa, pb](Tape& tape, const TapeNode& n) {
                  const Tensor& bv = tape.node(pb).value;
                  tape.accumulate(pa, detail::zip(n.grad, bv, std::divides<>()));
                  // d(a/b)/db = -(a/b)/b
                  Tensor gb = detail::zip(n.grad, n.value, std::multiplies<>());
                  gb = detail::zip(gb, bv, [](double x, double y) { return -x / y; });
                  tape.accumulate(pb, std::move(gb));
                });
}

/// a (n x m) + row (1 x m), broadcasting the row over every row of a.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::same_tape(a, row);
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "add_row " + shape_string(av.shape()) + " + " + shape_string(rv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
  const std::size_t pa = a.id(), pr = row.id();
  return t.push(OpKind::AddRow, {pa, pr}, std::move(out), [pa, pr](Tape& tape, const TapeNode& n) {
    tape.accumulate(pa, n.grad);
    Tensor gr = Tensor::zeros(1, n.grad.cols());
    for (std::size_t i = 0; i < n.grad.rows(); ++i)
      for (std::size_t j = 0; j < n.grad.cols(); ++j) gr(0, j) += n.grad(i, j);
    tape.accumulate(pr, std::move(gr));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(OpKind::MatMul, {pa, pb}, tima::matmul(a.value(), b.value()), [pa, pb](Tape& tape, const TapeNode& n) {
    tape.accumulate(pa, matmul_bt(n.grad, tape.node(pb).value));
    tape.accumulate(pb, matmul_at(tape.node(pa).value, n.grad));
  });
}

inline Var transpose(const Var& a) {
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::Transpose, {pa}, tima::transpose(a.value()),
                        [pa](Tape& tape, const TapeNode& n) { tape.accumulate(pa, tima::transpose(n.grad)); });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::Sum, {pa}, Tensor::scalar(s), [pa](Tape& tape, const TapeNode& n) {
    tape.accumulate(pa, Tensor(tape.node(pa).value.shape(), n.grad[0]));
  });
}

inline Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::Mean, {pa}, Tensor::scalar(s / count), [pa, count](Tape& tape, const TapeNode& n) {
    tape.accumulate(pa, Tensor(tape.node(pa).value.shape(), n.grad[0] / count));
  });
}

inline Var exp(const Var& a) {
  return detail::unary(a, OpKind::Exp, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(a, OpKind::Log, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, OpKind::Tanh, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
  return detail::unary(a, OpKind::Relu, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var square(const Var& a) {
  return detail::unary(a, OpKind::Square, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, OpKind::Scale, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& a, double s) {
  return detail::unary(a, OpKind::AddScalar, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var reciprocal(const Var& a) {
  return detail::unary(a, OpKind::Reciprocal, [](double x) { return 1.0 / x; },
                       [](double, double y) { return -y * y; });
}

/// Gradient passes where lo <= x <= hi and is zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(a, OpKind::Clamp, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline constexpr double kMinRowNorm = 1e-12;

/// Projects every row onto the unit sphere.
inline Var l2_normalize_rows(const Var& a) {
  const Tensor& x = a.value();
  if (!x.is_matrix()) throw Error(ErrorCode::ShapeMismatch, "l2_normalize_rows needs a matrix");
  Tensor y = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = row_norm(x.row(i));
    if (norms[i] < kMinRowNorm) {
      throw Error(ErrorCode::DegenerateRow, "row " + std::to_string(i) + " has norm " + std::to_string(norms[i]));
    }
    for (double& v : y.row(i)) v /= norms[i];
  }
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::NormalizeRows, {pa}, std::move(y),
                        [pa, norms = std::move(norms)](Tape& tape, const TapeNode& n) {
                          // dx = (g - y (y.g)) / |x|
                          Tensor g = n.grad;
                          for (std::size_t i = 0; i < g.rows(); ++i) {
                            auto yi = n.value.row(i);
                            auto gi = g.row(i);
                            double dot = 0.0;
                            for (std::size_t j = 0; j < gi.size(); ++j) dot += yi[j] * gi[j];
                            for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = (gi[j] - yi[j] * dot) / norms[i];
                          }
                          tape.accumulate(pa, std::move(g));
                        });
}

/// log softmax(S / tau) per row, max-shifted so tau = 0.01 stays exact.
inline Tensor row_log_softmax(const Tensor& s, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidTemperature, "tau = " + std::to_string(tau));
  Tensor out = s;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double& v : r) {
      v /= tau;
      mx = std::max(mx, v);
    }
    double acc = 0.0;
    for (double v : r) acc += std::exp(v - mx);
    const double lse = mx + std::log(acc);
    for (double& v : r) v -= lse;
  }
  return out;
}

inline Var row_log_softmax(const Var& a, double tau) {
  Tensor out = row_log_softmax(a.value(), tau);
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::LogSoftmax, {pa}, std::move(out), [pa, tau](Tape& tape, const TapeNode& n) {
    // dS = (g - softmax * rowsum(g)) / tau
    Tensor g = n.grad;
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gi = g.row(i);
      auto li = n.value.row(i);
      double total = 0.0;
      for (double v : gi) total += v;
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = (gi[j] - std::exp(li[j]) * total) / tau;
    }
    tape.accumulate(pa, std::move(g));
  });
}

/// D[j][k] = |a_j - a_k|^2 over the rows of a.
inline Var pairwise_sq_dist(const Var& a) {
  const Tensor& x = a.value();
  const std::size_t c = x.rows();
  Tensor d = Tensor::zeros(c, c);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t k = j + 1; k < c; ++k) {
      double s = 0.0;
      for (std::size_t p = 0; p < x.cols(); ++p) {
        const double diff = x(j, p) - x(k, p);
        s += diff * diff;
      }
      d(j, k) = s;
      d(k, j) = s;
    }
  const std::size_t pa = a.id();
  return a.tape()->push(OpKind::PairwiseSqDist, {pa}, std::move(d), [pa](Tape& tape, const TapeNode& n) {
    const Tensor& xv = tape.node(pa).value;
    Tensor g = Tensor::zeros_like(xv);
    for (std::size_t j = 0; j < xv.rows(); ++j)
      for (std::size_t k = 0; k < xv.rows(); ++k) {
        if (j == k) continue;
        const double w = 2.0 * (n.grad(j, k) + n.grad(k, j));
        for (std::size_t p = 0; p < xv.cols(); ++p) g(j, p) += w * (xv(j, p) - xv(k, p));
      }
    tape.accumulate(pa, std::move(g));
  });
}

/// out[i] = a[i][cols[i]], an n x 1 column.
inline Var gather_cols(const Var& a, std::span<const std::size_t> cols) {
  const Tensor& x = a.value();
  if (cols.size() != x.rows()) throw Error(ErrorCode::ShapeMismatch, "gather_cols index count");
  Tensor out = Tensor::zeros(x.rows(), 1);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= x.cols()) {
      throw Error(ErrorCode::LabelOutOfRange, "column " + std::to_string(cols[i]) + " of " + std::to_string(x.cols()));
    }
    out(i, 0) = x(i, cols[i]);
  }
  const std::size_t pa = a.id();
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return a.tape()->push(OpKind::GatherCols, {pa}, std::move(out), [pa, idx = std::move(idx)](Tape& tape, const TapeNode& n) {
    Tensor g = Tensor::zeros_like(tape.node(pa).value);
    for (std::size_t i = 0; i < idx.size(); ++i) g(i, idx[i]) = n.grad(i, 0);
    tape.accumulate(pa, std::move(g));
  });
}

/// Central-difference gradient of a scalar function; the test oracle for
/// every backward rule above.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error(ErrorCode::RangeError, "finite difference step must be positive");
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace tima
