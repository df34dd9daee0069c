// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moep/error.hpp"
#include "moep/numerics.hpp"

namespace moep {

/// Operation vocabulary understood by the tape.
enum class OpKind {
  kLeaf,
  kMatmul,        // a * b, or a * b^T when transpose_b is set
  kAdd,
  kMul,           // elementwise
  kSilu,
  kRowSoftmax,
  kGatherRows,    // embedding lookup / token selection
  kCrossEntropy,  // mean over rows, natural log
  kMse,           // mean over all entries
  kScale,
  kMaskedAssign,  // keep where mask==1, else constant fill
  kScatterRows,   // adjoint of kGatherRows
  kStackRows,
  kRowScale,      // row t multiplied by s[t]
  kRmsNorm,
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Accumulated gradient; zeros if backward never reached this node.
  Matrix grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Matrix value;
    Matrix grad;  // allocated lazily during backward
    bool needs_grad = false;
    bool transpose_b = false;
    double scalar = 0.0;
    std::vector<std::size_t> index;   // gather/scatter rows, CE targets
    std::vector<std::uint8_t> mask;   // masked-assign
    Matrix cache;                     // softmax probabilities for CE
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    return push(std::move(n));
  }
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  /// Appends a computed node. Used by the op functions below.
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  bool needs_grad(std::span<const Var> vs) const {
    for (const Var& v : vs)
      if (nodes_[v.id()].needs_grad) return true;
    return false;
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Matrix();
  }

  /// Reverse sweep from a scalar loss. Gradients accumulate (+=).
  void backward(const Var& loss);

 private:
  friend class Var;
  Matrix& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }
  void backward_node(std::size_t id);

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->node(id_).value; }

inline Matrix Var::grad() const {
  const auto& n = tape_->node(id_);
  if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace ad {

namespace detail {

inline Tape& same_tape(std::initializer_list<Var> vs) {
  Tape* t = vs.begin()->tape();
  for (const Var& v : vs)
    if (v.tape() != t) throw ContractError("operands recorded on different tapes");
  return *t;
}

inline Tape::Node make(OpKind kind, std::initializer_list<Var> in, Matrix value) {
  Tape::Node n;
  n.kind = kind;
  bool ng = false;
  for (const Var& v : in) {
    n.inputs.push_back(v.id());
    ng = ng || v.tape()->node(v.id()).needs_grad;
  }
  n.needs_grad = ng;
  n.value = std::move(value);
  return n;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b, bool transpose_b = false) {
  Tape& t = detail::same_tape({a, b});
  Matrix v = transpose_b ? moep::matmul_nt(a.value(), b.value()) : moep::matmul(a.value(), b.value());
  auto n = detail::make(OpKind::kMatmul, {a, b}, std::move(v));
  n.transpose_b = transpose_b;
  return t.push(std::move(n));
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  return t.push(detail::make(OpKind::kAdd, {a, b}, moep::add(a.value(), b.value())));
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  return t.push(detail::make(OpKind::kMul, {a, b}, moep::hadamard(a.value(), b.value())));
}

inline Var silu(const Var& a) {
  return a.tape()->push(detail::make(OpKind::kSilu, {a}, moep::silu(a.value())));
}

inline Var row_softmax(const Var& a) {
  return a.tape()->push(detail::make(OpKind::kRowSoftmax, {a}, moep::row_softmax(a.value())));
}

inline Var rms_norm(const Var& a) {
  return a.tape()->push(detail::make(OpKind::kRmsNorm, {a}, moep::rms_norm(a.value())));
}

inline Var scale(const Var& a, double s) {
  auto n = detail::make(OpKind::kScale, {a}, moep::scale(a.value(), s));
  n.scalar = s;
  return a.tape()->push(std::move(n));
}

inline Var gather_rows(const Var& table, std::vector<std::size_t> idx) {
  auto n = detail::make(OpKind::kGatherRows, {table}, moep::gather_rows(table.value(), idx));
  n.index = std::move(idx);
  return table.tape()->push(std::move(n));
}

/// out (out_rows x cols) with src row r added into row idx[r].
inline Var scatter_rows(const Var& src, std::vector<std::size_t> idx, std::size_t out_rows) {
  const Matrix& s = src.value();
  if (idx.size() != s.rows()) throw ShapeError("scatter_rows: index count does not match source rows");
  Matrix out(out_rows, s.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= out_rows) throw ShapeError("scatter_rows: row index out of range");
    auto dst = out.row(idx[r]);
    auto from = s.row(r);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += from[j];
  }
  auto n = detail::make(OpKind::kScatterRows, {src}, std::move(out));
  n.index = std::move(idx);
  return src.tape()->push(std::move(n));
}

inline Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("stack_rows: no operands");
  Tape* t = parts.front().tape();
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.tape() != t) throw ContractError("operands recorded on different tapes");
    if (p.cols() != cols) throw ShapeError("stack_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Tape::Node n;
  n.kind = OpKind::kStackRows;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
    n.inputs.push_back(p.id());
    n.needs_grad = n.needs_grad || t->node(p.id()).needs_grad;
  }
  n.value = std::move(out);
  return t->push(std::move(n));
}

/// Multiplies row t of a by s(t, 0).
inline Var row_scale(const Var& a, const Var& s) {
  Tape& t = detail::same_tape({a, s});
  const Matrix& av = a.value();
  const Matrix& sv = s.value();
  if (sv.cols() != 1 || sv.rows() != av.rows()) {
    throw ShapeError("row_scale: scale " + sv.shape() + " does not fit " + av.shape());
  }
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= sv(r, 0);
  return t.push(detail::make(OpKind::kRowScale, {a, s}, std::move(out)));
}

/// Positions with mask==0 take the value `fill` and pass no gradient.
inline Var masked_assign(const Var& a, std::span<const std::uint8_t> mask, double fill = 0.0) {
  const Matrix& av = a.value();
  if (mask.size() != av.size()) throw ShapeError("masked_assign: mask size does not match " + av.shape());
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out.data()[i] = fill;
  auto n = detail::make(OpKind::kMaskedAssign, {a}, std::move(out));
  n.mask.assign(mask.begin(), mask.end());
  return a.tape()->push(std::move(n));
}

/// Mean next-token cross entropy; targets[r] indexes the column of row r.
inline Var cross_entropy(const Var& logits, std::vector<std::size_t> targets) {
  const Matrix& z = logits.value();
  if (targets.size() != z.rows()) throw ShapeError("cross_entropy: target count does not match logits rows");
  Matrix p = moep::row_softmax(z);
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (targets[r] >= z.cols()) throw InputError("cross_entropy: target out of vocabulary");
    auto row = z.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    loss += mx + std::log(se) - row[targets[r]];
  }
  loss /= static_cast<double>(std::max<std::size_t>(1, z.rows()));
  auto n = detail::make(OpKind::kCrossEntropy, {logits}, Matrix(1, 1, loss));
  n.index = std::move(targets);
  n.cache = std::move(p);
  return logits.tape()->push(std::move(n));
}

/// (1/N) sum (a - b)^2 over all N entries.
inline Var mse(const Var& a, const Var& b) {
  Tape& t = detail::same_tape({a, b});
  const Matrix d = moep::sub(a.value(), b.value());
  double s = 0.0;
  for (double v : d.values()) s += v * v;
  s /= static_cast<double>(std::max<std::size_t>(1, d.size()));
  return t.push(detail::make(OpKind::kMse, {a, b}, Matrix(1, 1, s)));
}

}  // namespace ad

inline void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Matrix& lv = loss.value();
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar (1x1), got " + lv.shape());
  }
  if (!nodes_[loss.id()].needs_grad) return;
  // Leaves accumulate across calls; interior adjoints restart each sweep.
  for (std::size_t i = 0; i <= loss.id(); ++i)
    if (nodes_[i].kind != OpKind::kLeaf) nodes_[i].grad = Matrix();
  grad_of(loss.id())(0, 0) = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf || !n.needs_grad || n.grad.empty()) continue;
    backward_node(i);
  }
}

inline void Tape::backward_node(std::size_t id) {
  // Reference into nodes_ stays valid: backward never appends nodes.
  const Node& n = nodes_[id];
  const Matrix& g = n.grad;
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
  auto input = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };

  switch (n.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      const Matrix& a = input(0);
      const Matrix& b = input(1);
      if (wants(0)) add_inplace(grad_of(n.inputs[0]), n.transpose_b ? moep::matmul(g, b) : moep::matmul_nt(g, b));
      if (wants(1)) add_inplace(grad_of(n.inputs[1]), n.transpose_b ? moep::matmul_tn(g, a) : moep::matmul_tn(a, g));
      break;
    }
    case OpKind::kAdd:
      if (wants(0)) add_inplace(grad_of(n.inputs[0]), g);
      if (wants(1)) add_inplace(grad_of(n.inputs[1]), g);
      break;
    case OpKind::kMul:
      if (wants(0)) add_inplace(grad_of(n.inputs[0]), moep::hadamard(g, input(1)));
      if (wants(1)) add_inplace(grad_of(n.inputs[1]), moep::hadamard(g, input(0)));
      break;
    case OpKind::kSilu: {
      const Matrix& x = input(0);
      Matrix& dx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x.data()[i]);
        dx.data()[i] += g.data()[i] * (s + x.data()[i] * s * (1.0 - s));
      }
      break;
    }
    case OpKind::kRowSoftmax: {
      const Matrix& p = n.value;
      Matrix& dx = grad_of(n.inputs[0]);
      for (std::size_t r = 0; r < p.rows(); ++r) {
        auto pr = p.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < pr.size(); ++j) dot += gr[j] * pr[j];
        auto dr = dx.row(r);
        for (std::size_t j = 0; j < pr.size(); ++j) dr[j] += pr[j] * (gr[j] - dot);
      }
      break;
    }
    case OpKind::kRmsNorm: {
      const Matrix& x = input(0);
      const Matrix& y = n.value;
      Matrix& dx = grad_of(n.inputs[0]);
      const double inv_n = 1.0 / static_cast<double>(x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        double ss = 0.0;
        for (double v : xr) ss += v * v;
        const double inv = 1.0 / std::sqrt(ss * inv_n + kRmsEps);
        auto yr = y.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
        auto dr = dx.row(r);
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += inv * (gr[j] - yr[j] * dot * inv_n);
      }
      break;
    }
    case OpKind::kScale: {
      Matrix& dx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) dx.data()[i] += n.scalar * g.data()[i];
      break;
    }
    case OpKind::kGatherRows: {
      Matrix& dt = grad_of(n.inputs[0]);
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        auto dst = dt.row(n.index[r]);
        auto src = g.row(r);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
      break;
    }
    case OpKind::kScatterRows: {
      Matrix& ds = grad_of(n.inputs[0]);
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        auto dst = ds.row(r);
        auto src = g.row(n.index[r]);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
      break;
    }
    case OpKind::kStackRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t len = input(k).size();
        if (wants(k)) {
          Matrix& d = grad_of(n.inputs[k]);
          for (std::size_t i = 0; i < len; ++i) d.data()[i] += g.data()[off + i];
        }
        off += len;
      }
      break;
    }
    case OpKind::kRowScale: {
      const Matrix& a = input(0);
      const Matrix& s = input(1);
      if (wants(0)) {
        Matrix& da = grad_of(n.inputs[0]);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          auto dr = da.row(r);
          auto gr = g.row(r);
          for (std::size_t j = 0; j < dr.size(); ++j) dr[j] += gr[j] * s(r, 0);
        }
      }
      if (wants(1)) {
        Matrix& ds = grad_of(n.inputs[1]);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          auto ar = a.row(r);
          auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t j = 0; j < ar.size(); ++j) dot += gr[j] * ar[j];
          ds(r, 0) += dot;
        }
      }
      break;
    }
    case OpKind::kMaskedAssign: {
      Matrix& dx = grad_of(n.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (n.mask[i]) dx.data()[i] += g.data()[i];
      break;
    }
    case OpKind::kCrossEntropy: {
      const Matrix& p = n.cache;
      Matrix& dz = grad_of(n.inputs[0]);
      const double coef = g(0, 0) / static_cast<double>(std::max<std::size_t>(1, p.rows()));
      for (std::size_t r = 0; r < p.rows(); ++r) {
        auto pr = p.row(r);
        auto dr = dz.row(r);
        for (std::size_t j = 0; j < pr.size(); ++j) dr[j] += coef * pr[j];
        dr[n.index[r]] -= coef;
      }
      break;
    }
    case OpKind::kMse: {
      const Matrix& a = input(0);
      const Matrix& b = input(1);
      const double coef = 2.0 * g(0, 0) / static_cast<double>(std::max<std::size_t>(1, a.size()));
      if (wants(0)) {
        Matrix& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < a.size(); ++i) da.data()[i] += coef * (a.data()[i] - b.data()[i]);
      }
      if (wants(1)) {
        Matrix& db = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < a.size(); ++i) db.data()[i] -= coef * (a.data()[i] - b.data()[i]);
      }
      break;
    }
  }
}

/// Scalar-valued differentiable function of one matrix, built on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over entries of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Matrix& x, double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ConfigError("grad_check: eps must lie in (0, 1e-2]");
  Matrix analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x);
    Var loss = f(tape, xv);
    tape.backward(loss);
    analytic = xv.grad();
  }
  auto eval = [&](const Matrix& at) {
    Tape tape;
    Var xv = tape.leaf(at, false);
    return f(tape, xv).value()(0, 0);
  };
  double worst = 0.0;
  Matrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const double up = eval(probe);
    probe.data()[i] = orig - eps;
    const double down = eval(probe);
    probe.data()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace moep
