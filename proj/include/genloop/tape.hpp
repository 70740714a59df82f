#pragma once

// Reverse-mode autodiff over dense Eigen matrices. The op set is fixed and
// coarse-grained: every node holds a full matrix so Eigen does the inner
// loops. Templated on scalar so the same graph code runs in float for
// training and in double for finite-difference oracles.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "genloop/common.hpp"

namespace genloop::nn {

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

using Mat = MatX<float>;

template <class T>
class Tape;

// Lightweight node handle; valid as long as its tape is alive.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const MatX<T>& value() const;
  const MatX<T>& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const {
    if (value().size() != 1) throw DataError("Var::scalar on non-scalar node");
    return value()(0, 0);
  }
};

template <class T>
class Tape {
 public:
  enum class Op {
    Leaf,
    MatMul,        // flags: transpose lhs / rhs
    Add,
    Sub,
    AddRowVec,     // rhs is [1, c], broadcast over rows
    AddConst,      // constant matrix, no gradient into it
    Scale,         // by scalar constant
    CMul,          // hadamard with constant matrix
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
    SoftmaxRows,   // optional additive constant mask
    LogSoftmaxRows,
    GatherRows,    // constant row indices; backward scatter-adds
    ConcatRows,    // vertical stack of n inputs
    RowSum,        // [r,c] -> [r,1]
    RmsNormRows,   // per-row x / sqrt(mean(x^2) + eps)
    Sum,           // [r,c] -> [1,1], accumulated in double
    Mean,          // [r,c] -> [1,1], accumulated in double
  };

  struct Node {
    Op op = Op::Leaf;
    MatX<T> value;
    MatX<T> grad;            // sized lazily during backward
    std::vector<int> inputs;
    std::string name;        // parameter leaves only
    bool needs_grad = false;
    // op payloads
    bool ta = false, tb = false;
    T c = T(0);
    MatX<T> cmat;            // CMul / AddConst / softmax mask
    std::vector<int> rows;   // GatherRows
  };

  Var<T> leaf(const MatX<T>& v, std::string name = {}, bool needs_grad = true) {
    Node n;
    n.op = Op::Leaf;
    n.value = v;
    n.name = std::move(name);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  Var<T> constant(const MatX<T>& v) { return leaf(v, {}, false); }

  const Node& node(int i) const { return nodes_[i]; }
  Node& node(int i) { return nodes_[i]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var<T> push(Node&& n) {
    if (!n.needs_grad) {
      for (int i : n.inputs) {
        if (nodes_[i].needs_grad) {
          n.needs_grad = true;
          break;
        }
      }
    }
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  // Backward pass from a scalar loss node. Gradients accumulate into each
  // node's grad matrix; parameter leaves are read back via grad_of().
  void backward(Var<T> loss) {
    if (loss.tape != this) throw DataError("backward: node from another tape");
    Node& ln = nodes_[loss.idx];
    if (ln.value.size() != 1)
      throw DataError("backward: loss must be scalar, got " +
                      std::to_string(ln.value.rows()) + "x" +
                      std::to_string(ln.value.cols()));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    ln.grad = MatX<T>::Constant(1, 1, T(1));
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      step_backward(n);
    }
  }

  // Named-leaf gradients, zero-filled when a leaf was not reached. A name
  // bound to several leaf nodes gets the sum of their gradients.
  std::map<std::string, MatX<T>> named_grads() const {
    std::map<std::string, MatX<T>> out;
    for (const auto& n : nodes_) {
      if (n.op != Op::Leaf || n.name.empty()) continue;
      MatX<T> g = n.grad.size() ? n.grad
                                : MatX<T>::Zero(n.value.rows(), n.value.cols());
      auto [it, fresh] = out.emplace(n.name, std::move(g));
      if (!fresh) it->second += n.grad.size()
                                    ? n.grad
                                    : MatX<T>::Zero(n.value.rows(), n.value.cols());
    }
    return out;
  }

 private:
  std::vector<Node> nodes_;

  MatX<T>& grad_buf(int i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) n.grad = MatX<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void step_backward(Node& n) {
    const MatX<T>& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::MatMul: {
        const MatX<T>& a = nodes_[n.inputs[0]].value;
        const MatX<T>& b = nodes_[n.inputs[1]].value;
        if (nodes_[n.inputs[0]].needs_grad) {
          MatX<T>& ga = grad_buf(n.inputs[0]);
          if (!n.ta && !n.tb) ga.noalias() += g * b.transpose();
          else if (!n.ta && n.tb) ga.noalias() += g * b;
          else if (n.ta && !n.tb) ga.noalias() += b * g.transpose();
          else ga.noalias() += (g * b).transpose();
        }
        if (nodes_[n.inputs[1]].needs_grad) {
          MatX<T>& gb = grad_buf(n.inputs[1]);
          if (!n.ta && !n.tb) gb.noalias() += a.transpose() * g;
          else if (!n.ta && n.tb) gb.noalias() += g.transpose() * a;
          else if (n.ta && !n.tb) gb.noalias() += a * g;
          else gb.noalias() += (a * g).transpose();
        }
        break;
      }
      case Op::Add:
        if (nodes_[n.inputs[0]].needs_grad) grad_buf(n.inputs[0]) += g;
        if (nodes_[n.inputs[1]].needs_grad) grad_buf(n.inputs[1]) += g;
        break;
      case Op::Sub:
        if (nodes_[n.inputs[0]].needs_grad) grad_buf(n.inputs[0]) += g;
        if (nodes_[n.inputs[1]].needs_grad) grad_buf(n.inputs[1]) -= g;
        break;
      case Op::AddRowVec:
        if (nodes_[n.inputs[0]].needs_grad) grad_buf(n.inputs[0]) += g;
        if (nodes_[n.inputs[1]].needs_grad)
          grad_buf(n.inputs[1]) += g.colwise().sum();
        break;
      case Op::AddConst:
        if (nodes_[n.inputs[0]].needs_grad) grad_buf(n.inputs[0]) += g;
        break;
      case Op::Scale:
        if (nodes_[n.inputs[0]].needs_grad) grad_buf(n.inputs[0]) += g * n.c;
        break;
      case Op::CMul:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() += g.array() * n.cmat.array();
        break;
      case Op::Tanh:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() +=
              g.array() * (T(1) - n.value.array().square());
        break;
      case Op::Sigmoid:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() +=
              g.array() * n.value.array() * (T(1) - n.value.array());
        break;
      case Op::Exp:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() += g.array() * n.value.array();
        break;
      case Op::Log:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() +=
              g.array() / nodes_[n.inputs[0]].value.array();
        break;
      case Op::Square:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() +=
              g.array() * T(2) * nodes_[n.inputs[0]].value.array();
        break;
      case Op::SoftmaxRows: {
        if (!nodes_[n.inputs[0]].needs_grad) break;
        MatX<T>& gx = grad_buf(n.inputs[0]);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          T dot = (g.row(r).array() * n.value.row(r).array()).sum();
          gx.row(r).array() +=
              n.value.row(r).array() * (g.row(r).array() - dot);
        }
        break;
      }
      case Op::LogSoftmaxRows: {
        if (!nodes_[n.inputs[0]].needs_grad) break;
        MatX<T>& gx = grad_buf(n.inputs[0]);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          T gsum = g.row(r).sum();
          gx.row(r).array() +=
              g.row(r).array() - n.value.row(r).array().exp() * gsum;
        }
        break;
      }
      case Op::GatherRows: {
        if (!nodes_[n.inputs[0]].needs_grad) break;
        MatX<T>& gx = grad_buf(n.inputs[0]);
        for (size_t r = 0; r < n.rows.size(); ++r)
          gx.row(n.rows[r]) += g.row(static_cast<Eigen::Index>(r));
        break;
      }
      case Op::ConcatRows: {
        Eigen::Index off = 0;
        for (int in : n.inputs) {
          Eigen::Index r = nodes_[in].value.rows();
          if (nodes_[in].needs_grad)
            grad_buf(in) += g.middleRows(off, r);
          off += r;
        }
        break;
      }
      case Op::RowSum:
        if (nodes_[n.inputs[0]].needs_grad) {
          MatX<T>& gx = grad_buf(n.inputs[0]);
          gx.colwise() += g.col(0);
        }
        break;
      case Op::RmsNormRows: {
        if (!nodes_[n.inputs[0]].needs_grad) break;
        const MatX<T>& x = nodes_[n.inputs[0]].value;
        MatX<T>& gx = grad_buf(n.inputs[0]);
        const T eps = n.c;
        const T cols = static_cast<T>(x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          T ms = x.row(r).array().square().sum() / cols + eps;
          T inv = T(1) / std::sqrt(ms);
          T xg = (x.row(r).array() * g.row(r).array()).sum();
          gx.row(r).array() +=
              inv * g.row(r).array() - inv * inv * inv * xg / cols * x.row(r).array();
        }
        break;
      }
      case Op::Sum:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() += g(0, 0);
        break;
      case Op::Mean:
        if (nodes_[n.inputs[0]].needs_grad)
          grad_buf(n.inputs[0]).array() +=
              g(0, 0) / static_cast<T>(nodes_[n.inputs[0]].value.size());
        break;
    }
  }
};

template <class T>
const MatX<T>& Var<T>::value() const {
  return tape->node(idx).value;
}
template <class T>
const MatX<T>& Var<T>::grad() const {
  return tape->node(idx).grad;
}

namespace detail {
template <class T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw DataError("op: nodes from different tapes");
}
}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
  detail::check_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Eigen::Index inner_a = ta ? av.rows() : av.cols();
  Eigen::Index inner_b = tb ? bv.cols() : bv.rows();
  if (inner_a != inner_b)
    throw ConfigError("matmul: inner dimensions disagree (" +
                      std::to_string(inner_a) + " vs " + std::to_string(inner_b) + ")");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::MatMul;
  n.inputs = {a.idx, b.idx};
  n.ta = ta;
  n.tb = tb;
  if (!ta && !tb) n.value.noalias() = av * bv;
  else if (!ta && tb) n.value.noalias() = av * bv.transpose();
  else if (ta && !tb) n.value.noalias() = av.transpose() * bv;
  else n.value.noalias() = av.transpose() * bv.transpose();
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError("add: shape mismatch");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::Add;
  n.inputs = {a.idx, b.idx};
  n.value = a.value() + b.value();
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError("sub: shape mismatch");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::Sub;
  n.inputs = {a.idx, b.idx};
  n.value = a.value() - b.value();
  return a.tape->push(std::move(n));
}

// Broadcast a [1, c] bias over every row of a.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> bias) {
  detail::check_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw ConfigError("add_rowvec: bias must be [1, cols]");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::AddRowVec;
  n.inputs = {a.idx, bias.idx};
  n.value = a.value().rowwise() + bias.value().row(0);
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> add_const(Var<T> a, const MatX<T>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols())
    throw ConfigError("add_const: shape mismatch");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::AddConst;
  n.inputs = {a.idx};
  n.value = a.value() + c;
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::Scale;
  n.inputs = {a.idx};
  n.c = c;
  n.value = a.value() * c;
  return a.tape->push(std::move(n));
}

// Hadamard with a constant matrix (gradient passes through a only).
template <class T>
Var<T> cmul(Var<T> a, const MatX<T>& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols())
    throw ConfigError("cmul: shape mismatch");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::CMul;
  n.inputs = {a.idx};
  n.cmat = m;
  n.value = a.value().array() * m.array();
  return a.tape->push(std::move(n));
}

#define GENLOOP_UNARY(fn, OP, expr)                  \
  template <class T>                                 \
  Var<T> fn(Var<T> a) {                              \
    typename Tape<T>::Node n;                        \
    n.op = Tape<T>::Op::OP;                          \
    n.inputs = {a.idx};                              \
    n.value = expr;                                  \
    return a.tape->push(std::move(n));               \
  }

GENLOOP_UNARY(tanh, Tanh, a.value().array().tanh())
GENLOOP_UNARY(sigmoid, Sigmoid,
              (T(1) / (T(1) + (-a.value().array()).exp())))
GENLOOP_UNARY(exp, Exp, a.value().array().exp())
GENLOOP_UNARY(log, Log, a.value().array().log())
GENLOOP_UNARY(square, Square, a.value().array().square())
#undef GENLOOP_UNARY

namespace detail {
// Row-wise softmax with the max subtracted first; optional additive mask.
template <class T>
MatX<T> softmax_rows_value(const MatX<T>& x, const MatX<T>* mask, bool log_out) {
  MatX<T> z = x;
  if (mask) z += *mask;
  MatX<T> out(z.rows(), z.cols());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    T m = z.row(r).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> e = (z.row(r).array() - m).exp();
    T s = e.sum();
    if (log_out)
      out.row(r) = z.row(r).array() - m - std::log(s);
    else
      out.row(r) = e / s;
  }
  return out;
}
}  // namespace detail

template <class T>
Var<T> softmax_rows(Var<T> a) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::SoftmaxRows;
  n.inputs = {a.idx};
  n.value = detail::softmax_rows_value<T>(a.value(), nullptr, false);
  return a.tape->push(std::move(n));
}

// Additive mask applied before normalizing (large negative to block a slot).
template <class T>
Var<T> softmax_rows(Var<T> a, const MatX<T>& addmask) {
  if (a.rows() != addmask.rows() || a.cols() != addmask.cols())
    throw ConfigError("softmax_rows: mask shape mismatch");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::SoftmaxRows;
  n.inputs = {a.idx};
  n.value = detail::softmax_rows_value<T>(a.value(), &addmask, false);
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::LogSoftmaxRows;
  n.inputs = {a.idx};
  n.value = detail::softmax_rows_value<T>(a.value(), nullptr, true);
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> gather_rows(Var<T> a, std::vector<int> rows) {
  for (int r : rows)
    if (r < 0 || r >= a.rows()) throw DataError("gather_rows: index out of range");
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::GatherRows;
  n.inputs = {a.idx};
  n.value.resize(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (size_t r = 0; r < rows.size(); ++r)
    n.value.row(static_cast<Eigen::Index>(r)) = a.value().row(rows[r]);
  n.rows = std::move(rows);
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  Tape<T>* tape = parts[0].tape;
  Eigen::Index total = 0;
  Eigen::Index cols = parts[0].cols();
  for (auto p : parts) {
    if (p.tape != tape) throw DataError("concat_rows: mixed tapes");
    if (p.cols() != cols) throw ConfigError("concat_rows: column mismatch");
    total += p.rows();
  }
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::ConcatRows;
  n.value.resize(total, cols);
  Eigen::Index off = 0;
  for (auto p : parts) {
    n.inputs.push_back(p.idx);
    n.value.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return tape->push(std::move(n));
}

// Per-row RMS normalization (no learned gain).
template <class T>
Var<T> rms_norm_rows(Var<T> a, T eps = static_cast<T>(1e-6)) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::RmsNormRows;
  n.inputs = {a.idx};
  n.c = eps;
  n.value.resizeLike(a.value());
  const T cols = static_cast<T>(a.value().cols());
  for (Eigen::Index r = 0; r < a.value().rows(); ++r) {
    T ms = a.value().row(r).array().square().sum() / cols + eps;
    n.value.row(r) = a.value().row(r) / std::sqrt(ms);
  }
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> row_sum(Var<T> a) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::RowSum;
  n.inputs = {a.idx};
  n.value = a.value().rowwise().sum();
  return a.tape->push(std::move(n));
}

// Reductions accumulate in double regardless of the tape scalar.
template <class T>
Var<T> sum(Var<T> a) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::Sum;
  n.inputs = {a.idx};
  double acc = a.value().template cast<double>().sum();
  n.value = MatX<T>::Constant(1, 1, static_cast<T>(acc));
  return a.tape->push(std::move(n));
}

template <class T>
Var<T> mean(Var<T> a) {
  typename Tape<T>::Node n;
  n.op = Tape<T>::Op::Mean;
  n.inputs = {a.idx};
  double acc = a.value().template cast<double>().sum() /
               static_cast<double>(a.value().size());
  n.value = MatX<T>::Constant(1, 1, static_cast<T>(acc));
  return a.tape->push(std::move(n));
}

template <class T>
bool all_finite(const MatX<T>& m) {
  return m.allFinite();
}

}  // namespace genloop::nn
