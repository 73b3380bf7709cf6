#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cip/tensor.hpp"

namespace cip {

using Var = int;

// Reverse-mode tape over Tensor-valued nodes. Forward values are computed
// eagerly as ops are recorded; backward() accumulates adjoints in reverse
// topological order (recording order). Single-owner: a Tape is never shared
// across threads.
class Tape {
 public:
  enum class Op : std::uint8_t {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Clamp,
    MatMul,
    AddRowVec,
    MulColVec,
    SumAll,
    MeanAll,
    SumRows,
    SoftmaxRows,
    LogSoftmaxRows,
    LogSumExpRows,
    GatherCols,
    SelectK,
    StackCols,
    ConcatCols,
    GaussianKlRows,
    Min,
    Reshape,
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    std::vector<int> parents;  // variadic ops only
    std::vector<int> idx;      // gather / select payload
    double p0 = 0.0;
    double p1 = 0.0;
    Tensor val;                // owned value (empty for Leaf)
    const Tensor* ext = nullptr;  // Leaf points at external storage
    Tensor grad;               // allocated lazily during backward
    bool requires_grad = false;
  };

  // --- node creation ---------------------------------------------------

  // External parameter; gradient accumulates on the tape, value lives with
  // the caller and is never copied.
  Var leaf(const Tensor* t) {
    Node n;
    n.op = Op::Leaf;
    n.ext = t;
    n.requires_grad = true;
    return push(std::move(n));
  }

  Var constant(Tensor t) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(t);
    return push(std::move(n));
  }

  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // --- elementwise -----------------------------------------------------

  Var add(Var a, Var b) { return binary_same_shape(Op::Add, a, b); }
  Var sub(Var a, Var b) { return binary_same_shape(Op::Sub, a, b); }
  Var mul(Var a, Var b) { return binary_same_shape(Op::Mul, a, b); }
  Var minimum(Var a, Var b) { return binary_same_shape(Op::Min, a, b); }

  Var neg(Var a) { return unary(Op::Neg, a); }
  Var exp(Var a) { return unary(Op::Exp, a); }
  Var log(Var a) { return unary(Op::Log, a); }
  Var tanh(Var a) { return unary(Op::Tanh, a); }
  Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
  Var relu(Var a) { return unary(Op::Relu, a); }

  Var scale(Var a, double s) {
    Node n = make_unary(Op::Scale, a);
    n.p0 = s;
    for (double& v : n.val.data) v *= s;
    return push(std::move(n));
  }

  Var add_scalar(Var a, double s) {
    Node n = make_unary(Op::AddScalar, a);
    n.p0 = s;
    for (double& v : n.val.data) v += s;
    return push(std::move(n));
  }

  Var clamp(Var a, double lo, double hi) {
    Node n = make_unary(Op::Clamp, a);
    n.p0 = lo;
    n.p1 = hi;
    for (double& v : n.val.data) v = v < lo ? lo : (v > hi ? hi : v);
    return push(std::move(n));
  }

  // --- linear algebra --------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
      throw std::invalid_argument("matmul: shapes do not conform " + shape_str(ta.shape) +
                                  " x " + shape_str(tb.shape));
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.val = Tensor::zeros({ta.rows(), tb.cols()});
    emap(n.val).noalias() = cmap(ta) * cmap(tb);
    return push(std::move(n));
  }

  // a: {r,c}, bias: {c}; adds the bias to every row.
  Var add_rowvec(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 1 || ta.cols() != static_cast<int>(tb.size()))
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Node n;
    n.op = Op::AddRowVec;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.val = ta;
    const int r = ta.rows(), c = ta.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) n.val.data[static_cast<std::size_t>(i) * c + j] += tb.data[j];
    return push(std::move(n));
  }

  // a: {r,c}, m: {r}; scales row i by m[i].
  Var mul_colvec(Var a, Var m) {
    const Tensor& ta = val(a);
    const Tensor& tm = val(m);
    if (ta.rank() != 2 || tm.rank() != 1 || ta.rows() != static_cast<int>(tm.size()))
      throw std::invalid_argument("mul_colvec: shape mismatch");
    Node n;
    n.op = Op::MulColVec;
    n.a = a;
    n.b = m;
    n.requires_grad = needs_grad(a) || needs_grad(m);
    n.val = ta;
    const int r = ta.rows(), c = ta.cols();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) n.val.data[static_cast<std::size_t>(i) * c + j] *= tm.data[i];
    return push(std::move(n));
  }

  // --- reductions ------------------------------------------------------

  Var sum(Var a) {
    Node n;
    n.op = Op::SumAll;
    n.a = a;
    n.requires_grad = needs_grad(a);
    double s = 0.0;
    for (double v : val(a).data) s += v;
    n.val = Tensor::scalar(s);
    return push(std::move(n));
  }

  Var mean(Var a) {
    Node n;
    n.op = Op::MeanAll;
    n.a = a;
    n.requires_grad = needs_grad(a);
    const Tensor& ta = val(a);
    if (ta.size() == 0) throw std::invalid_argument("mean: empty input");
    double s = 0.0;
    for (double v : ta.data) s += v;
    n.val = Tensor::scalar(s / static_cast<double>(ta.size()));
    return push(std::move(n));
  }

  Var sum_rows(Var a) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2) throw std::invalid_argument("sum_rows: rank-2 input required");
    Node n;
    n.op = Op::SumRows;
    n.a = a;
    n.requires_grad = needs_grad(a);
    const int r = ta.rows(), c = ta.cols();
    n.val = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += ta.data[static_cast<std::size_t>(i) * c + j];
      n.val.data[i] = s;
    }
    return push(std::move(n));
  }

  // --- softmax family (all max-shifted) ---------------------------------

  Var softmax_rows(Var a) {
    const Tensor& ta = require_rank2(a, "softmax_rows");
    if (ta.cols() == 0) throw std::invalid_argument("softmax_rows: empty rows");
    Node n;
    n.op = Op::SoftmaxRows;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.val = ta;
    const int r = ta.rows(), c = ta.cols();
    for (int i = 0; i < r; ++i) {
      double* row = n.val.data.data() + static_cast<std::size_t>(i) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (int j = 0; j < c; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (int j = 0; j < c; ++j) row[j] /= s;
    }
    return push(std::move(n));
  }

  Var log_softmax_rows(Var a) {
    const Tensor& ta = require_rank2(a, "log_softmax_rows");
    if (ta.cols() == 0) throw std::invalid_argument("log_softmax_rows: empty rows");
    Node n;
    n.op = Op::LogSoftmaxRows;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.val = ta;
    const int r = ta.rows(), c = ta.cols();
    for (int i = 0; i < r; ++i) {
      double* row = n.val.data.data() + static_cast<std::size_t>(i) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      const double lse = mx + std::log(s);
      for (int j = 0; j < c; ++j) row[j] -= lse;
    }
    return push(std::move(n));
  }

  Var logsumexp_rows(Var a) {
    const Tensor& ta = require_rank2(a, "logsumexp_rows");
    if (ta.cols() == 0) throw std::invalid_argument("logsumexp_rows: empty rows");
    Node n;
    n.op = Op::LogSumExpRows;
    n.a = a;
    n.requires_grad = needs_grad(a);
    const int r = ta.rows(), c = ta.cols();
    n.val = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
      const double* row = ta.data.data() + static_cast<std::size_t>(i) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
      n.val.data[i] = mx + std::log(s);
    }
    return push(std::move(n));
  }

  // --- indexing / layout -------------------------------------------------

  // a: {r,c}, idx[i] in [0,c); out[i] = a[i, idx[i]].
  Var gather_cols(Var a, std::vector<int> idx) {
    const Tensor& ta = require_rank2(a, "gather_cols");
    if (static_cast<int>(idx.size()) != ta.rows())
      throw std::invalid_argument("gather_cols: index count != rows");
    Node n;
    n.op = Op::GatherCols;
    n.a = a;
    n.requires_grad = needs_grad(a);
    const int r = ta.rows(), c = ta.cols();
    n.val = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
      if (idx[i] < 0 || idx[i] >= c) throw std::invalid_argument("gather_cols: index out of range");
      n.val.data[i] = ta.data[static_cast<std::size_t>(i) * c + idx[i]];
    }
    n.idx = std::move(idx);
    return push(std::move(n));
  }

  // parts: K vars, each {r}; sel[i] in [0,K); out[i] = parts[sel[i]][i].
  Var select_k(const std::vector<Var>& parts, std::vector<int> sel) {
    if (parts.empty()) throw std::invalid_argument("select_k: no inputs");
    const int r = static_cast<int>(val(parts[0]).size());
    Node n;
    n.op = Op::SelectK;
    n.parents = parts;
    for (Var p : parts) {
      if (val(p).rank() != 1 || static_cast<int>(val(p).size()) != r)
        throw std::invalid_argument("select_k: inputs must be equal-length vectors");
      n.requires_grad = n.requires_grad || needs_grad(p);
    }
    if (static_cast<int>(sel.size()) != r)
      throw std::invalid_argument("select_k: selector length != rows");
    n.val = Tensor::zeros({r});
    const int k = static_cast<int>(parts.size());
    for (int i = 0; i < r; ++i) {
      if (sel[i] < 0 || sel[i] >= k) throw std::invalid_argument("select_k: selector out of range");
      n.val.data[i] = val(parts[sel[i]]).data[i];
    }
    n.idx = std::move(sel);
    return push(std::move(n));
  }

  // parts: K vars, each {r}; out {r,K} with out[i,k] = parts[k][i].
  Var stack_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_cols: no inputs");
    const int r = static_cast<int>(val(parts[0]).size());
    Node n;
    n.op = Op::StackCols;
    n.parents = parts;
    const int k = static_cast<int>(parts.size());
    for (Var p : parts) {
      if (val(p).rank() != 1 || static_cast<int>(val(p).size()) != r)
        throw std::invalid_argument("stack_cols: inputs must be equal-length vectors");
      n.requires_grad = n.requires_grad || needs_grad(p);
    }
    n.val = Tensor::zeros({r, k});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < k; ++j) n.val.data[static_cast<std::size_t>(i) * k + j] = val(parts[j]).data[i];
    return push(std::move(n));
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& ta = require_rank2(a, "concat_cols");
    const Tensor& tb = require_rank2(b, "concat_cols");
    if (ta.rows() != tb.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Node n;
    n.op = Op::ConcatCols;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    const int r = ta.rows(), ca = ta.cols(), cb = tb.cols();
    n.val = Tensor::zeros({r, ca + cb});
    for (int i = 0; i < r; ++i) {
      double* out = n.val.data.data() + static_cast<std::size_t>(i) * (ca + cb);
      const double* ra = ta.data.data() + static_cast<std::size_t>(i) * ca;
      const double* rb = tb.data.data() + static_cast<std::size_t>(i) * cb;
      for (int j = 0; j < ca; ++j) out[j] = ra[j];
      for (int j = 0; j < cb; ++j) out[ca + j] = rb[j];
    }
    return push(std::move(n));
  }

  Var reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    if (Tensor::count(shape) != ta.size()) throw std::invalid_argument("reshape: size mismatch");
    Node n;
    n.op = Op::Reshape;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.val = Tensor(std::move(shape), ta.data);
    return push(std::move(n));
  }

  // --- distribution math -------------------------------------------------

  // Per-row KL( N(mu_i, diag(exp(ls_i))^2) || N(0, I) ):
  //   0.5 * sum_j (mu^2 + exp(2 ls) - 1 - 2 ls).
  Var gaussian_kl_rows(Var mu, Var log_sigma) {
    const Tensor& tm = require_rank2(mu, "gaussian_kl_rows");
    const Tensor& ts = require_rank2(log_sigma, "gaussian_kl_rows");
    if (!tm.same_shape(ts)) throw std::invalid_argument("gaussian_kl_rows: shape mismatch");
    Node n;
    n.op = Op::GaussianKlRows;
    n.a = mu;
    n.b = log_sigma;
    n.requires_grad = needs_grad(mu) || needs_grad(log_sigma);
    const int r = tm.rows(), c = tm.cols();
    n.val = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) {
        const double m = tm.data[static_cast<std::size_t>(i) * c + j];
        const double ls = ts.data[static_cast<std::size_t>(i) * c + j];
        s += m * m + std::exp(2.0 * ls) - 1.0 - 2.0 * ls;
      }
      n.val.data[i] = 0.5 * s;
    }
    return push(std::move(n));
  }

  // --- access ------------------------------------------------------------

  const Tensor& val(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.ext ? *n.ext : n.val;
  }

  const Tensor* grad(Var v) const {
    const Node& n = nodes_[check(v)];
    return n.grad.size() ? &n.grad : nullptr;
  }

  bool needs_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Drops all nodes (keeps vector capacity) so the tape can be reused.
  void reset() { nodes_.clear(); }

  // --- backward ------------------------------------------------------------

  // Seeds d(loss)/d(loss) = 1 and accumulates adjoints into every node with
  // requires_grad on the path. loss must be scalar.
  void backward(Var loss) {
    if (val(loss).size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!needs_grad(loss)) return;
    grad_ref(loss).data[0] = 1.0;
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      propagate(i);
    }
  }

 private:
  std::vector<Node> nodes_;

  int check(Var v) const {
    if (v < 0 || v >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("Tape: invalid var");
    return v;
  }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
  }

  Node make_unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.a = a;
    n.requires_grad = needs_grad(a);
    n.val = val(a);
    return n;
  }

  Var unary(Op op, Var a) {
    Node n = make_unary(op, a);
    switch (op) {
      case Op::Neg:
        for (double& v : n.val.data) v = -v;
        break;
      case Op::Exp:
        for (double& v : n.val.data) v = std::exp(v);
        break;
      case Op::Log:
        for (double& v : n.val.data) v = std::log(v);
        break;
      case Op::Tanh:
        for (double& v : n.val.data) v = std::tanh(v);
        break;
      case Op::Sigmoid:
        for (double& v : n.val.data) v = 1.0 / (1.0 + std::exp(-v));
        break;
      case Op::Relu:
        for (double& v : n.val.data) v = v > 0.0 ? v : 0.0;
        break;
      default:
        throw std::logic_error("unary: bad op");
    }
    return push(std::move(n));
  }

  Var binary_same_shape(Op op, Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_shape(tb))
      throw std::invalid_argument("elementwise op: shape mismatch " + shape_str(ta.shape) +
                                  " vs " + shape_str(tb.shape));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.requires_grad = needs_grad(a) || needs_grad(b);
    n.val = ta;
    const std::size_t sz = ta.size();
    const double* pb = tb.data.data();
    double* po = n.val.data.data();
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < sz; ++i) po[i] += pb[i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < sz; ++i) po[i] -= pb[i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < sz; ++i) po[i] *= pb[i];
        break;
      case Op::Min:
        for (std::size_t i = 0; i < sz; ++i) po[i] = po[i] <= pb[i] ? po[i] : pb[i];
        break;
      default:
        throw std::logic_error("binary: bad op");
    }
    return push(std::move(n));
  }

  const Tensor& require_rank2(Var a, const char* who) const {
    const Tensor& t = val(a);
    if (t.rank() != 2) throw std::invalid_argument(std::string(who) + ": rank-2 input required");
    return t;
  }

  Tensor& grad_ref(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.ext ? n.ext->shape : n.val.shape);
    return n.grad;
  }

  void add_grad(Var v, const double* g, std::size_t sz) {
    if (!needs_grad(v)) return;
    Tensor& dst = grad_ref(v);
    for (std::size_t i = 0; i < sz; ++i) dst.data[i] += g[i];
  }

  using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  static Eigen::Map<const RM> cmap(const Tensor& t) {
    return Eigen::Map<const RM>(t.data.data(), t.rows(), t.cols());
  }
  static Eigen::Map<RM> emap(Tensor& t) {
    return Eigen::Map<RM>(t.data.data(), t.rows(), t.cols());
  }

  void propagate(int i) {
    Node& n = nodes_[i];
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::Add:
        add_grad(n.a, g.data.data(), g.size());
        add_grad(n.b, g.data.data(), g.size());
        break;
      case Op::Sub: {
        add_grad(n.a, g.data.data(), g.size());
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] -= g.data[j];
        }
        break;
      }
      case Op::Mul: {
        if (needs_grad(n.a)) {
          const Tensor& vb = val(n.b);
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] += g.data[j] * vb.data[j];
        }
        if (needs_grad(n.b)) {
          const Tensor& va = val(n.a);
          Tensor& dst = grad_ref(n.b);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] += g.data[j] * va.data[j];
        }
        break;
      }
      case Op::Min: {
        const Tensor& va = val(n.a);
        const Tensor& vb = val(n.b);
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j)
            if (va.data[j] <= vb.data[j]) dst.data[j] += g.data[j];
        }
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          for (std::size_t j = 0; j < g.size(); ++j)
            if (va.data[j] > vb.data[j]) dst.data[j] += g.data[j];
        }
        break;
      }
      case Op::Neg: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] -= g.data[j];
        }
        break;
      }
      case Op::Scale: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] += g.data[j] * n.p0;
        }
        break;
      }
      case Op::AddScalar:
        add_grad(n.a, g.data.data(), g.size());
        break;
      case Op::Exp: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] += g.data[j] * n.val.data[j];
        }
        break;
      }
      case Op::Log: {
        if (needs_grad(n.a)) {
          const Tensor& va = val(n.a);
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j) dst.data[j] += g.data[j] / va.data[j];
        }
        break;
      }
      case Op::Tanh: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j)
            dst.data[j] += g.data[j] * (1.0 - n.val.data[j] * n.val.data[j]);
        }
        break;
      }
      case Op::Sigmoid: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j)
            dst.data[j] += g.data[j] * n.val.data[j] * (1.0 - n.val.data[j]);
        }
        break;
      }
      case Op::Relu: {
        if (needs_grad(n.a)) {
          const Tensor& va = val(n.a);
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j)
            if (va.data[j] > 0.0) dst.data[j] += g.data[j];
        }
        break;
      }
      case Op::Clamp: {
        if (needs_grad(n.a)) {
          const Tensor& va = val(n.a);
          Tensor& dst = grad_ref(n.a);
          for (std::size_t j = 0; j < g.size(); ++j)
            if (va.data[j] >= n.p0 && va.data[j] <= n.p1) dst.data[j] += g.data[j];
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& va = val(n.a);
        const Tensor& vb = val(n.b);
        if (needs_grad(n.a)) emap(grad_ref(n.a)).noalias() += cmap(g) * cmap(vb).transpose();
        if (needs_grad(n.b)) emap(grad_ref(n.b)).noalias() += cmap(va).transpose() * cmap(g);
        break;
      }
      case Op::AddRowVec: {
        add_grad(n.a, g.data.data(), g.size());
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          const int r = g.rows(), c = g.cols();
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < c; ++j) dst.data[j] += g.data[static_cast<std::size_t>(ri) * c + j];
        }
        break;
      }
      case Op::MulColVec: {
        const Tensor& va = val(n.a);
        const Tensor& vm = val(n.b);
        const int r = g.rows(), c = g.cols();
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < c; ++j)
              dst.data[static_cast<std::size_t>(ri) * c + j] +=
                  g.data[static_cast<std::size_t>(ri) * c + j] * vm.data[ri];
        }
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          for (int ri = 0; ri < r; ++ri) {
            double s = 0.0;
            for (int j = 0; j < c; ++j)
              s += g.data[static_cast<std::size_t>(ri) * c + j] *
                   va.data[static_cast<std::size_t>(ri) * c + j];
            dst.data[ri] += s;
          }
        }
        break;
      }
      case Op::SumAll: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const double g0 = g.data[0];
          for (double& v : dst.data) v += g0;
        }
        break;
      }
      case Op::MeanAll: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const double g0 = g.data[0] / static_cast<double>(dst.size());
          for (double& v : dst.data) v += g0;
        }
        break;
      }
      case Op::SumRows: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const int r = dst.rows(), c = dst.cols();
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < c; ++j) dst.data[static_cast<std::size_t>(ri) * c + j] += g.data[ri];
        }
        break;
      }
      case Op::SoftmaxRows: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const int r = n.val.rows(), c = n.val.cols();
          for (int ri = 0; ri < r; ++ri) {
            const double* p = n.val.data.data() + static_cast<std::size_t>(ri) * c;
            const double* gr = g.data.data() + static_cast<std::size_t>(ri) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += p[j] * gr[j];
            double* d = dst.data.data() + static_cast<std::size_t>(ri) * c;
            for (int j = 0; j < c; ++j) d[j] += p[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::LogSoftmaxRows: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const int r = n.val.rows(), c = n.val.cols();
          for (int ri = 0; ri < r; ++ri) {
            const double* lp = n.val.data.data() + static_cast<std::size_t>(ri) * c;
            const double* gr = g.data.data() + static_cast<std::size_t>(ri) * c;
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += gr[j];
            double* d = dst.data.data() + static_cast<std::size_t>(ri) * c;
            for (int j = 0; j < c; ++j) d[j] += gr[j] - std::exp(lp[j]) * gsum;
          }
        }
        break;
      }
      case Op::LogSumExpRows: {
        if (needs_grad(n.a)) {
          const Tensor& va = val(n.a);
          Tensor& dst = grad_ref(n.a);
          const int r = va.rows(), c = va.cols();
          for (int ri = 0; ri < r; ++ri) {
            const double* row = va.data.data() + static_cast<std::size_t>(ri) * c;
            double* d = dst.data.data() + static_cast<std::size_t>(ri) * c;
            for (int j = 0; j < c; ++j) d[j] += g.data[ri] * std::exp(row[j] - n.val.data[ri]);
          }
        }
        break;
      }
      case Op::GatherCols: {
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          const int c = dst.cols();
          for (std::size_t ri = 0; ri < g.size(); ++ri)
            dst.data[ri * c + n.idx[ri]] += g.data[ri];
        }
        break;
      }
      case Op::SelectK: {
        for (std::size_t ri = 0; ri < g.size(); ++ri) {
          const Var p = n.parents[n.idx[ri]];
          if (needs_grad(p)) grad_ref(p).data[ri] += g.data[ri];
        }
        break;
      }
      case Op::StackCols: {
        const int k = static_cast<int>(n.parents.size());
        const int r = n.val.rows();
        for (int j = 0; j < k; ++j) {
          const Var p = n.parents[j];
          if (!needs_grad(p)) continue;
          Tensor& dst = grad_ref(p);
          for (int ri = 0; ri < r; ++ri) dst.data[ri] += g.data[static_cast<std::size_t>(ri) * k + j];
        }
        break;
      }
      case Op::ConcatCols: {
        const Tensor& va = val(n.a);
        const Tensor& vb = val(n.b);
        const int r = va.rows(), ca = va.cols(), cb = vb.cols();
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < ca; ++j)
              dst.data[static_cast<std::size_t>(ri) * ca + j] +=
                  g.data[static_cast<std::size_t>(ri) * (ca + cb) + j];
        }
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < cb; ++j)
              dst.data[static_cast<std::size_t>(ri) * cb + j] +=
                  g.data[static_cast<std::size_t>(ri) * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::GaussianKlRows: {
        const Tensor& vm = val(n.a);
        const Tensor& vs = val(n.b);
        const int r = vm.rows(), c = vm.cols();
        if (needs_grad(n.a)) {
          Tensor& dst = grad_ref(n.a);
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < c; ++j)
              dst.data[static_cast<std::size_t>(ri) * c + j] +=
                  g.data[ri] * vm.data[static_cast<std::size_t>(ri) * c + j];
        }
        if (needs_grad(n.b)) {
          Tensor& dst = grad_ref(n.b);
          for (int ri = 0; ri < r; ++ri)
            for (int j = 0; j < c; ++j)
              dst.data[static_cast<std::size_t>(ri) * c + j] +=
                  g.data[ri] * (std::exp(2.0 * vs.data[static_cast<std::size_t>(ri) * c + j]) - 1.0);
        }
        break;
      }
      case Op::Reshape: {
        add_grad(n.a, g.data.data(), g.size());
        break;
      }
    }
  }
};

// y = x W + b, recorded on the tape. x: {n, in}, W: {in, out}, b: {out}.
inline Var affine(Tape& tape, Var x, Var W, Var b) {
  return tape.add_rowvec(tape.matmul(x, W), b);
}

}  // namespace cip
