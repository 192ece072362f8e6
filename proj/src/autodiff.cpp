#include "tnet/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace tnet::ad {

std::string shape_str(const Array& a) {
  std::ostringstream os;
  os << "(" << a.rows() << "x" << a.cols() << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": shape mismatch " + detail);
}

void require_same_shape(std::string_view op, const Array& a, const Array& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(op, shape_str(a) + " vs " + shape_str(b));
}

void require_cols(std::string_view op, const Array& a, Index cols) {
  if (a.cols() != cols) shape_fail(op, shape_str(a) + ", expected " + std::to_string(cols) + " columns");
}

using RowMat3 = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using MapMat3 = Eigen::Map<RowMat3>;
using CMapMat3 = Eigen::Map<const RowMat3>;

}  // namespace

void accumulate(Array* dst, const Array& src) {
  if (dst == nullptr) return;
  if (dst->size() == 0)
    *dst = src;
  else
    *dst += src;
}

// ---------------------------------------------------------------------------
// Generic derivative rules.

Array LinearOp::jvp(ConstArrays x, const Array&, ConstArrays dx) const {
  std::vector<Array> zeros;
  zeros.reserve(x.size());
  std::vector<const Array*> tangents(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (dx[i] != nullptr) {
      tangents[i] = dx[i];
    } else {
      zeros.push_back(Array::Zero(x[i]->rows(), x[i]->cols()));
      tangents[i] = &zeros.back();
    }
  }
  return apply(tangents);
}

void LinearOp::dual_vjp(ConstArrays x, const Array&, ConstArrays, const Array& g, const Array* dg,
                        MutArrays gx, MutArrays dgx) const {
  adjoint(x, g, gx);
  if (dg != nullptr) adjoint(x, *dg, dgx);
}

Array BilinearOp::jvp(ConstArrays x, const Array& y, ConstArrays dx) const {
  Array out = Array::Zero(y.rows(), y.cols());
  if (dx[0] != nullptr) out += apply(*dx[0], *x[1]);
  if (dx[1] != nullptr) out += apply(*x[0], *dx[1]);
  return out;
}

void BilinearOp::vjp(ConstArrays x, const Array&, const Array& g, MutArrays gx) const {
  if (gx[0] != nullptr) accumulate(gx[0], adj_a(g, *x[1]));
  if (gx[1] != nullptr) accumulate(gx[1], adj_b(g, *x[0]));
}

void BilinearOp::dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g,
                          const Array* dg, MutArrays gx, MutArrays dgx) const {
  vjp(x, y, g, gx);
  if (dg == nullptr) return;
  if (gx[0] != nullptr && dx[1] != nullptr) accumulate(gx[0], adj_a(*dg, *dx[1]));
  if (gx[1] != nullptr && dx[0] != nullptr) accumulate(gx[1], adj_b(*dg, *dx[0]));
  if (dgx[0] != nullptr) accumulate(dgx[0], adj_a(*dg, *x[1]));
  if (dgx[1] != nullptr) accumulate(dgx[1], adj_b(*dg, *x[0]));
}

Array UnaryOp::jvp(ConstArrays x, const Array& y, ConstArrays dx) const {
  if (dx[0] == nullptr) return Array::Zero(y.rows(), y.cols());
  return df(*x[0], y) * *dx[0];
}

void UnaryOp::vjp(ConstArrays x, const Array& y, const Array& g, MutArrays gx) const {
  if (gx[0] != nullptr) accumulate(gx[0], g * df(*x[0], y));
}

void UnaryOp::dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g,
                       const Array* dg, MutArrays gx, MutArrays dgx) const {
  if (dg == nullptr) {
    vjp(x, y, g, gx);
    return;
  }
  const Array d1 = df(*x[0], y);
  if (gx[0] != nullptr) {
    Array total = g * d1;
    if (dx[0] != nullptr) total += d2f(*x[0], y) * *dx[0] * *dg;
    accumulate(gx[0], total);
  }
  if (dgx[0] != nullptr) accumulate(dgx[0], *dg * d1);
}

// ---------------------------------------------------------------------------
// Tape.

const Array& Var::value() const { return tape_->value(*this); }

void Tape::check_owned(Var v) const {
  if (&v.tape() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size())
    throw std::invalid_argument("autodiff: variable does not belong to this tape");
}

Var Tape::leaf(Array value, bool requires_grad) {
  if (!value.allFinite()) throw NumericError("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(std::unique_ptr<Op> op, std::initializer_list<Var> inputs) {
  return record(std::move(op), std::vector<Var>(inputs));
}

Var Tape::record(std::unique_ptr<Op> op, const std::vector<Var>& inputs) {
  std::vector<const Array*> values;
  values.reserve(inputs.size());
  Node n;
  for (const Var& v : inputs) {
    check_owned(v);
    values.push_back(&nodes_[v.id()].value);
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  n.value = op->forward(values);
  if (!n.value.allFinite()) throw NumericError(std::string(op->name()) + ": non-finite forward value");
  n.op = std::move(op);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::set_tangent(Var leaf, Array tangent) {
  check_owned(leaf);
  Node& n = nodes_[leaf.id()];
  if (n.op) throw std::invalid_argument("set_tangent: only leaves can be seeded");
  if (tangent.rows() != n.value.rows() || tangent.cols() != n.value.cols())
    shape_fail("set_tangent", shape_str(tangent) + " vs " + shape_str(n.value));
  n.tangent = std::move(tangent);
  n.has_tangent = true;
}

void Tape::propagate_tangents() {
  std::vector<const Array*> values, tangents;
  for (Node& n : nodes_) {
    if (!n.op) continue;
    values.clear();
    tangents.clear();
    bool any = false;
    for (int id : n.inputs) {
      values.push_back(&nodes_[id].value);
      const bool has = nodes_[id].has_tangent;
      tangents.push_back(has ? &nodes_[id].tangent : nullptr);
      any = any || has;
    }
    n.has_tangent = any;
    if (any)
      n.tangent = n.op->jvp(values, n.value, tangents);
    else
      n.tangent.resize(0, 0);
  }
}

const Array& Tape::tangent(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (!n.has_tangent) throw std::logic_error("tangent: node carries no tangent");
  return n.tangent;
}

void Tape::reset_grads() {
  for (Node& n : nodes_) {
    n.grad.resize(0, 0);
    n.tgrad.resize(0, 0);
  }
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (value(loss).size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss)));
  backward(loss, Array::Ones(1, 1));
}

void Tape::backward(Var root, const Array& seed) {
  check_owned(root);
  require_same_shape("backward", seed, value(root));
  reset_grads();
  nodes_[root.id()].grad = seed;
  sweep(root.id(), false);
}

void Tape::backward_dual(Var root, const Array& seed, const Array& tangent_seed) {
  check_owned(root);
  require_same_shape("backward_dual", seed, value(root));
  reset_grads();
  Node& r = nodes_[root.id()];
  r.grad = seed;
  if (tangent_seed.size() != 0) {
    require_same_shape("backward_dual", tangent_seed, r.value);
    if (r.has_tangent) r.tgrad = tangent_seed;
  }
  sweep(root.id(), true);
}

void Tape::sweep(int root_id, bool dual) {
  std::vector<const Array*> values, tangents;
  std::vector<Array*> grads, tgrads;
  for (int id = root_id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.op || !n.requires_grad) continue;
    const bool has_tg = dual && n.has_tangent && n.tgrad.size() != 0;
    if (n.grad.size() == 0 && !has_tg) continue;
    if (n.grad.size() == 0) n.grad = Array::Zero(n.value.rows(), n.value.cols());

    values.clear();
    tangents.clear();
    grads.clear();
    tgrads.clear();
    for (int in : n.inputs) {
      Node& src = nodes_[in];
      values.push_back(&src.value);
      tangents.push_back(dual && src.has_tangent ? &src.tangent : nullptr);
      grads.push_back(src.requires_grad ? &src.grad : nullptr);
      tgrads.push_back(dual && src.requires_grad && src.has_tangent ? &src.tgrad : nullptr);
    }
    if (dual && n.has_tangent)
      n.op->dual_vjp(values, n.value, tangents, n.grad, has_tg ? &n.tgrad : nullptr, grads, tgrads);
    else
      n.op->vjp(values, n.value, n.grad, grads);
  }
}

Array Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Array::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Array Tape::tangent_grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.tgrad.size() == 0) return Array::Zero(n.value.rows(), n.value.cols());
  return n.tgrad;
}

// ---------------------------------------------------------------------------
// Primitives.

namespace {

class AddOp final : public LinearOp {
 public:
  std::string_view name() const override { return "add"; }
  Array apply(ConstArrays x) const override { return *x[0] + *x[1]; }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override {
    accumulate(gx[0], g);
    accumulate(gx[1], g);
  }
};

class SubOp final : public LinearOp {
 public:
  std::string_view name() const override { return "subtract"; }
  Array apply(ConstArrays x) const override { return *x[0] - *x[1]; }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override {
    accumulate(gx[0], g);
    accumulate(gx[1], -g);
  }
};

class ScaleOp final : public LinearOp {
 public:
  explicit ScaleOp(double c) : c_(c) {}
  std::string_view name() const override { return "scale"; }
  Array apply(ConstArrays x) const override { return *x[0] * c_; }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override { accumulate(gx[0], g * c_); }

 private:
  double c_;
};

// y = x + c: derivative rules are those of the identity.
class ShiftOp final : public Op {
 public:
  explicit ShiftOp(double c) : c_(c) {}
  std::string_view name() const override { return "add_scalar"; }
  Array forward(ConstArrays x) const override { return *x[0] + c_; }
  Array jvp(ConstArrays, const Array& y, ConstArrays dx) const override {
    return dx[0] != nullptr ? *dx[0] : Array::Zero(y.rows(), y.cols());
  }
  void vjp(ConstArrays, const Array&, const Array& g, MutArrays gx) const override { accumulate(gx[0], g); }
  void dual_vjp(ConstArrays, const Array&, ConstArrays, const Array& g, const Array* dg, MutArrays gx,
                MutArrays dgx) const override {
    accumulate(gx[0], g);
    if (dg != nullptr) accumulate(dgx[0], *dg);
  }

 private:
  double c_;
};

class SumReduceOp final : public LinearOp {
 public:
  std::string_view name() const override { return "sum_reduce"; }
  Array apply(ConstArrays x) const override { return Array::Constant(1, 1, x[0]->sum()); }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], Array::Constant(x[0]->rows(), x[0]->cols(), g(0, 0)));
  }
};

class SumColsOp final : public LinearOp {
 public:
  std::string_view name() const override { return "sum_cols"; }
  Array apply(ConstArrays x) const override { return x[0]->rowwise().sum(); }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], g.replicate(1, x[0]->cols()));
  }
};

class GatherOp final : public LinearOp {
 public:
  explicit GatherOp(IndexList idx) : idx_(std::move(idx)) {}
  std::string_view name() const override { return "gather_rows"; }
  Array apply(ConstArrays x) const override {
    const Array& a = *x[0];
    Array out(static_cast<Index>(idx_.size()), a.cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) out.row(static_cast<Index>(e)) = a.row(idx_[e]);
    return out;
  }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] == nullptr) return;
    Array out = Array::Zero(x[0]->rows(), x[0]->cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) out.row(idx_[e]) += g.row(static_cast<Index>(e));
    accumulate(gx[0], out);
  }

 private:
  IndexList idx_;
};

class ScatterOp final : public LinearOp {
 public:
  ScatterOp(IndexList idx, Index n) : idx_(std::move(idx)), n_(n) {}
  std::string_view name() const override { return "scatter_rows"; }
  Array apply(ConstArrays x) const override {
    const Array& a = *x[0];
    Array out = Array::Zero(n_, a.cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) out.row(idx_[e]) += a.row(static_cast<Index>(e));
    return out;
  }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] == nullptr) return;
    Array out(x[0]->rows(), x[0]->cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) out.row(static_cast<Index>(e)) = g.row(idx_[e]);
    accumulate(gx[0], out);
  }

 private:
  IndexList idx_;
  Index n_;
};

class ReshapeOp final : public LinearOp {
 public:
  ReshapeOp(Index r, Index c) : rows_(r), cols_(c) {}
  std::string_view name() const override { return "reshape"; }
  Array apply(ConstArrays x) const override { return Eigen::Map<const Array>(x[0]->data(), rows_, cols_); }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], Eigen::Map<const Array>(g.data(), x[0]->rows(), x[0]->cols()));
  }

 private:
  Index rows_, cols_;
};

class ConcatColsOp final : public LinearOp {
 public:
  std::string_view name() const override { return "concat_cols"; }
  Array apply(ConstArrays x) const override {
    Index cols = 0;
    for (const Array* a : x) cols += a->cols();
    Array out(x[0]->rows(), cols);
    Index at = 0;
    for (const Array* a : x) {
      out.middleCols(at, a->cols()) = *a;
      at += a->cols();
    }
    return out;
  }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    Index at = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (gx[i] != nullptr) accumulate(gx[i], g.middleCols(at, x[i]->cols()));
      at += x[i]->cols();
    }
  }
};

class SliceColsOp final : public LinearOp {
 public:
  SliceColsOp(Index start, Index count) : start_(start), count_(count) {}
  std::string_view name() const override { return "slice_cols"; }
  Array apply(ConstArrays x) const override { return x[0]->middleCols(start_, count_); }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] == nullptr) return;
    Array out = Array::Zero(x[0]->rows(), x[0]->cols());
    out.middleCols(start_, count_) = g;
    accumulate(gx[0], out);
  }

 private:
  Index start_, count_;
};

class AddBiasOp final : public LinearOp {
 public:
  std::string_view name() const override { return "add_bias"; }
  Array apply(ConstArrays x) const override { return x[0]->rowwise() + x[1]->row(0); }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override {
    accumulate(gx[0], g);
    if (gx[1] != nullptr) accumulate(gx[1], g.colwise().sum());
  }
};

enum class Irrep { scalar, vector, traceless };

// Orthogonal projections onto the irreducible subspaces; each is self-adjoint.
class ProjectOp final : public LinearOp {
 public:
  explicit ProjectOp(Irrep kind) : kind_(kind) {}
  std::string_view name() const override {
    switch (kind_) {
      case Irrep::scalar: return "project_scalar";
      case Irrep::vector: return "project_vector";
      default: return "project_traceless";
    }
  }
  Array apply(ConstArrays x) const override { return project(*x[0]); }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], project(g));
  }

 private:
  Array project(const Array& a) const {
    Array out(a.rows(), 9);
    for (Index r = 0; r < a.rows(); ++r) {
      CMapMat3 m(a.row(r).data());
      MapMat3 o(out.row(r).data());
      const double t = m.trace() / 3.0;
      switch (kind_) {
        case Irrep::scalar: o = t * RowMat3::Identity(); break;
        case Irrep::vector: o = 0.5 * (m - m.transpose()); break;
        case Irrep::traceless: o = 0.5 * (m + m.transpose()) - t * RowMat3::Identity(); break;
      }
    }
    return out;
  }
  Irrep kind_;
};

class SkewOp final : public LinearOp {
 public:
  std::string_view name() const override { return "skew_rows"; }
  Array apply(ConstArrays x) const override {
    const Array& v = *x[0];
    Array out(v.rows(), 9);
    for (Index r = 0; r < v.rows(); ++r) {
      const double a = v(r, 0), b = v(r, 1), c = v(r, 2);
      out.row(r) << 0.0, -c, b, c, 0.0, -a, -b, a, 0.0;
    }
    return out;
  }
  void adjoint(ConstArrays x, const Array& g, MutArrays gx) const override {
    if (gx[0] == nullptr) return;
    Array out(x[0]->rows(), 3);
    for (Index r = 0; r < g.rows(); ++r) {
      out(r, 0) = g(r, 7) - g(r, 5);
      out(r, 1) = g(r, 2) - g(r, 6);
      out(r, 2) = g(r, 3) - g(r, 1);
    }
    accumulate(gx[0], out);
  }
};

class IdentityRowsOp final : public LinearOp {
 public:
  std::string_view name() const override { return "identity_rows"; }
  Array apply(ConstArrays x) const override {
    const Array& s = *x[0];
    Array out = Array::Zero(s.rows(), 9);
    out.col(0) = s.col(0);
    out.col(4) = s.col(0);
    out.col(8) = s.col(0);
    return out;
  }
  void adjoint(ConstArrays, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], g.col(0) + g.col(4) + g.col(8));
  }
};

// --- bilinear --------------------------------------------------------------

class MulOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "elementwise_multiply"; }
  Array apply(const Array& a, const Array& b) const override { return a * b; }
  Array adj_a(const Array& g, const Array& b) const override { return g * b; }
  Array adj_b(const Array& g, const Array& a) const override { return g * a; }
};

class MulRowsOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "mul_rows"; }
  Array apply(const Array& a, const Array& s) const override { return a.colwise() * s.col(0); }
  Array adj_a(const Array& g, const Array& s) const override { return g.colwise() * s.col(0); }
  Array adj_b(const Array& g, const Array& a) const override { return (g * a).rowwise().sum(); }
};

class MatMul3Op final : public BilinearOp {
 public:
  std::string_view name() const override { return "matmul3"; }
  Array apply(const Array& a, const Array& b) const override {
    Array out(a.rows(), 9);
    for (Index r = 0; r < a.rows(); ++r)
      MapMat3(out.row(r).data()).noalias() = CMapMat3(a.row(r).data()) * CMapMat3(b.row(r).data());
    return out;
  }
  Array adj_a(const Array& g, const Array& b) const override {
    Array out(g.rows(), 9);
    for (Index r = 0; r < g.rows(); ++r)
      MapMat3(out.row(r).data()).noalias() = CMapMat3(g.row(r).data()) * CMapMat3(b.row(r).data()).transpose();
    return out;
  }
  Array adj_b(const Array& g, const Array& a) const override {
    Array out(g.rows(), 9);
    for (Index r = 0; r < g.rows(); ++r)
      MapMat3(out.row(r).data()).noalias() = CMapMat3(a.row(r).data()).transpose() * CMapMat3(g.row(r).data());
    return out;
  }
};

class LinearMapOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "linear"; }
  // Row by row, so each output row is computed the same way wherever it sits.
  Array apply(const Array& x, const Array& w) const override {
    Array out(x.rows(), w.rows());
    for (Index r = 0; r < x.rows(); ++r)
      out.row(r).matrix().noalias() = x.row(r).matrix() * w.matrix().transpose();
    return out;
  }
  Array adj_a(const Array& g, const Array& w) const override {
    Array out(g.rows(), w.cols());
    for (Index r = 0; r < g.rows(); ++r) out.row(r).matrix().noalias() = g.row(r).matrix() * w.matrix();
    return out;
  }
  Array adj_b(const Array& g, const Array& x) const override {
    return (g.matrix().transpose() * x.matrix()).array();
  }
};

// Per atom block of C rows: Y_n = W X_n.
class ChannelMixOp final : public BilinearOp {
 public:
  explicit ChannelMixOp(Index channels) : c_(channels) {}
  std::string_view name() const override { return "channel_mix"; }
  Array apply(const Array& w, const Array& x) const override {
    Array out(x.rows(), x.cols());
    for (Index n = 0; n < x.rows() / c_; ++n)
      out.middleRows(n * c_, c_).matrix().noalias() = w.matrix() * x.middleRows(n * c_, c_).matrix();
    return out;
  }
  Array adj_a(const Array& g, const Array& x) const override {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c_, c_);
    for (Index n = 0; n < x.rows() / c_; ++n)
      out.noalias() += g.middleRows(n * c_, c_).matrix() * x.middleRows(n * c_, c_).matrix().transpose();
    return out.array();
  }
  Array adj_b(const Array& g, const Array& w) const override {
    Array out(g.rows(), g.cols());
    for (Index n = 0; n < g.rows() / c_; ++n)
      out.middleRows(n * c_, c_).matrix().noalias() = w.matrix().transpose() * g.middleRows(n * c_, c_).matrix();
    return out;
  }

 private:
  Index c_;
};

class ChannelScaleOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "channel_scale"; }
  Array apply(const Array& w, const Array& t) const override {
    const Index c = w.cols(), k = t.cols();
    Array out(w.rows() * c, k);
    for (Index e = 0; e < w.rows(); ++e)
      for (Index ch = 0; ch < c; ++ch) out.row(e * c + ch) = w(e, ch) * t.row(e);
    return out;
  }
  Array adj_a(const Array& g, const Array& t) const override {
    const Index c = g.rows() / t.rows();
    Array out(t.rows(), c);
    for (Index e = 0; e < t.rows(); ++e)
      for (Index ch = 0; ch < c; ++ch) out(e, ch) = (g.row(e * c + ch) * t.row(e)).sum();
    return out;
  }
  Array adj_b(const Array& g, const Array& w) const override {
    const Index c = w.cols();
    Array out = Array::Zero(w.rows(), g.cols());
    for (Index e = 0; e < w.rows(); ++e)
      for (Index ch = 0; ch < c; ++ch) out.row(e) += w(e, ch) * g.row(e * c + ch);
    return out;
  }
};

class ScatterScaledOp final : public BilinearOp {
 public:
  ScatterScaledOp(IndexList idx, Index n) : idx_(std::move(idx)), n_(n) {}
  std::string_view name() const override { return "scatter_scaled"; }
  Array apply(const Array& w, const Array& t) const override {
    const Index c = w.cols();
    Array out = Array::Zero(n_ * c, t.cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch) out.row(idx_[e] * c + ch) += w(ei, ch) * t.row(ei);
    }
    return out;
  }
  Array adj_a(const Array& g, const Array& t) const override {
    const Index c = g.rows() / n_;
    Array out(t.rows(), c);
    for (std::size_t e = 0; e < idx_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch) out(ei, ch) = (g.row(idx_[e] * c + ch) * t.row(ei)).sum();
    }
    return out;
  }
  Array adj_b(const Array& g, const Array& w) const override {
    const Index c = w.cols();
    Array out = Array::Zero(w.rows(), g.cols());
    for (std::size_t e = 0; e < idx_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch) out.row(ei) += w(ei, ch) * g.row(idx_[e] * c + ch);
    }
    return out;
  }

 private:
  IndexList idx_;
  Index n_;
};

class MessageOp final : public BilinearOp {
 public:
  MessageOp(IndexList centers, IndexList neighbors, Index channels)
      : centers_(std::move(centers)), neighbors_(std::move(neighbors)), c_(channels) {}
  std::string_view name() const override { return "message"; }
  Array apply(const Array& y, const Array& f) const override {
    const Index c = f.cols();
    Array out = Array::Zero(y.rows(), y.cols());
    for (std::size_t e = 0; e < centers_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch) out.row(centers_[e] * c + ch) += f(ei, ch) * y.row(neighbors_[e] * c + ch);
    }
    return out;
  }
  Array adj_a(const Array& g, const Array& f) const override {
    const Index c = f.cols();
    Array out = Array::Zero(g.rows(), g.cols());
    for (std::size_t e = 0; e < centers_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch) out.row(neighbors_[e] * c + ch) += f(ei, ch) * g.row(centers_[e] * c + ch);
    }
    return out;
  }
  Array adj_b(const Array& g, const Array& y) const override {
    const Index c = c_;
    Array out(static_cast<Index>(centers_.size()), c);
    for (std::size_t e = 0; e < centers_.size(); ++e) {
      const auto ei = static_cast<Index>(e);
      for (Index ch = 0; ch < c; ++ch)
        out(ei, ch) = (g.row(centers_[e] * c + ch) * y.row(neighbors_[e] * c + ch)).sum();
    }
    return out;
  }

 private:
  IndexList centers_;
  IndexList neighbors_;
  Index c_;
};

class CrossOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "cross_rows"; }
  Array apply(const Array& a, const Array& b) const override { return cross(a, b); }
  Array adj_a(const Array& g, const Array& b) const override { return cross(b, g); }
  Array adj_b(const Array& g, const Array& a) const override { return cross(g, a); }

 private:
  static Array cross(const Array& a, const Array& b) {
    Array out(a.rows(), 3);
    for (Index r = 0; r < a.rows(); ++r) {
      out(r, 0) = a(r, 1) * b(r, 2) - a(r, 2) * b(r, 1);
      out(r, 1) = a(r, 2) * b(r, 0) - a(r, 0) * b(r, 2);
      out(r, 2) = a(r, 0) * b(r, 1) - a(r, 1) * b(r, 0);
    }
    return out;
  }
};

class OuterOp final : public BilinearOp {
 public:
  std::string_view name() const override { return "outer_rows"; }
  Array apply(const Array& a, const Array& b) const override {
    Array out(a.rows(), 9);
    for (Index r = 0; r < a.rows(); ++r)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out(r, 3 * i + j) = a(r, i) * b(r, j);
    return out;
  }
  Array adj_a(const Array& g, const Array& b) const override {
    Array out(g.rows(), 3);
    for (Index r = 0; r < g.rows(); ++r)
      out.row(r) = (CMapMat3(g.row(r).data()) * b.row(r).matrix().transpose()).transpose().array();
    return out;
  }
  Array adj_b(const Array& g, const Array& a) const override {
    Array out(g.rows(), 3);
    for (Index r = 0; r < g.rows(); ++r)
      out.row(r) = (CMapMat3(g.row(r).data()).transpose() * a.row(r).matrix().transpose()).transpose().array();
    return out;
  }
};

// --- elementwise -----------------------------------------------------------

class SiluOp final : public UnaryOp {
 public:
  std::string_view name() const override { return "silu"; }
  Array f(const Array& x) const override { return x * sigmoid(x); }
  Array df(const Array& x, const Array&) const override {
    const Array s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
  }
  Array d2f(const Array& x, const Array&) const override {
    const Array s = sigmoid(x);
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
  }

 private:
  static Array sigmoid(const Array& x) { return 1.0 / (1.0 + (-x).exp()); }
};

class SqrtOp final : public UnaryOp {
 public:
  std::string_view name() const override { return "sqrt"; }
  Array f(const Array& x) const override {
    if ((x < 0.0).any()) throw NumericError("sqrt: negative input");
    return x.sqrt();
  }
  Array df(const Array&, const Array& y) const override {
    return (y > 0.0).select(0.5 / y, 0.0);
  }
  Array d2f(const Array&, const Array& y) const override {
    return (y > 0.0).select(-0.25 / (y * y * y), 0.0);
  }
};

class ReciprocalOp final : public UnaryOp {
 public:
  std::string_view name() const override { return "reciprocal"; }
  Array f(const Array& x) const override { return x.inverse(); }
  Array df(const Array&, const Array& y) const override { return -y * y; }
  Array d2f(const Array&, const Array& y) const override { return 2.0 * y * y * y; }
};

class ExpOp final : public UnaryOp {
 public:
  std::string_view name() const override { return "exp"; }
  Array f(const Array& x) const override { return x.exp(); }
  Array df(const Array&, const Array& y) const override { return y; }
  Array d2f(const Array&, const Array& y) const override { return y; }
};

class CosineCutoffOp final : public UnaryOp {
 public:
  CosineCutoffOp(double lo, double hi) : lo_(lo), hi_(hi), k_(std::numbers::pi / (hi - lo)) {}
  std::string_view name() const override { return "cosine_cutoff"; }
  Array f(const Array& r) const override {
    return r.unaryExpr([this](double v) {
      if (v < lo_) return 1.0;
      if (v >= hi_) return 0.0;
      return 0.5 * (std::cos(k_ * (v - lo_)) + 1.0);
    });
  }
  Array df(const Array& r, const Array&) const override {
    return r.unaryExpr([this](double v) {
      if (v < lo_ || v >= hi_) return 0.0;
      return -0.5 * k_ * std::sin(k_ * (v - lo_));
    });
  }
  Array d2f(const Array& r, const Array&) const override {
    return r.unaryExpr([this](double v) {
      if (v < lo_ || v >= hi_) return 0.0;
      return -0.5 * k_ * k_ * std::cos(k_ * (v - lo_));
    });
  }

 private:
  double lo_, hi_, k_;
};

// Exponential-normal radial basis: g_k(r) = exp(-beta (exp(alpha (lo - r)) - mu_k)^2)
// with centres mu_k spread uniformly over [exp(lo - hi), 1].
class ExpNormRbfOp final : public Op {
 public:
  ExpNormRbfOp(double lo, double hi, int count) : lo_(lo), alpha_(5.0 / (hi - lo)), mu_(count) {
    const double start = std::exp(lo - hi);
    for (int k = 0; k < count; ++k)
      mu_[k] = count == 1 ? start : start + (1.0 - start) * k / (count - 1);
    const double w = 2.0 / count * (1.0 - start);
    beta_ = 1.0 / (w * w);
  }
  std::string_view name() const override { return "expnorm_rbf"; }

  Array forward(ConstArrays x) const override {
    const Array& r = *x[0];
    Array out(r.rows(), static_cast<Index>(mu_.size()));
    for (Index i = 0; i < r.rows(); ++i) {
      const double t = std::exp(alpha_ * (lo_ - r(i, 0)));
      for (std::size_t k = 0; k < mu_.size(); ++k) {
        const double u = t - mu_[k];
        out(i, static_cast<Index>(k)) = std::exp(-beta_ * u * u);
      }
    }
    return out;
  }

  Array jvp(ConstArrays x, const Array& y, ConstArrays dx) const override {
    if (dx[0] == nullptr) return Array::Zero(y.rows(), y.cols());
    return derivatives(*x[0], y, 1).colwise() * dx[0]->col(0);
  }

  void vjp(ConstArrays x, const Array& y, const Array& g, MutArrays gx) const override {
    if (gx[0] != nullptr) accumulate(gx[0], (g * derivatives(*x[0], y, 1)).rowwise().sum());
  }

  void dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g, const Array* dg,
                MutArrays gx, MutArrays dgx) const override {
    if (dg == nullptr) {
      vjp(x, y, g, gx);
      return;
    }
    const Array d1 = derivatives(*x[0], y, 1);
    if (gx[0] != nullptr) {
      Array total = (g * d1).rowwise().sum();
      if (dx[0] != nullptr) total += (*dg * derivatives(*x[0], y, 2)).rowwise().sum() * dx[0]->col(0);
      accumulate(gx[0], total);
    }
    if (dgx[0] != nullptr) accumulate(dgx[0], (*dg * d1).rowwise().sum());
  }

 private:
  // First or second derivative of every basis function with respect to r.
  Array derivatives(const Array& r, const Array& y, int order) const {
    Array out(y.rows(), y.cols());
    for (Index i = 0; i < r.rows(); ++i) {
      const double t = std::exp(alpha_ * (lo_ - r(i, 0)));
      for (std::size_t k = 0; k < mu_.size(); ++k) {
        const double u = t - mu_[k];
        const double g = y(i, static_cast<Index>(k));
        out(i, static_cast<Index>(k)) =
            order == 1 ? 2.0 * alpha_ * beta_ * u * t * g
                       : 2.0 * alpha_ * alpha_ * beta_ * g * t * (-t - u + 2.0 * beta_ * u * u * t);
      }
    }
    return out;
  }

  double lo_, alpha_, beta_ = 0.0;
  std::vector<double> mu_;
};

template <typename T, typename... Args>
Var emit(std::initializer_list<Var> inputs, Args&&... args) {
  Tape& tape = inputs.begin()->tape();
  return tape.record(std::make_unique<T>(std::forward<Args>(args)...), inputs);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  return emit<AddOp>({a, b});
}
Var subtract(Var a, Var b) {
  require_same_shape("subtract", a.value(), b.value());
  return emit<SubOp>({a, b});
}
Var scale(Var a, double c) { return emit<ScaleOp>({a}, c); }
Var add_scalar(Var a, double c) { return emit<ShiftOp>({a}, c); }
Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return subtract(a, b); }
Var operator*(Var a, double c) { return scale(a, c); }
Var operator*(double c, Var a) { return scale(a, c); }
Var operator-(Var a) { return scale(a, -1.0); }

Var mul(Var a, Var b) {
  require_same_shape("elementwise_multiply", a.value(), b.value());
  return emit<MulOp>({a, b});
}

Var mul_rows(Var a, Var s) {
  if (s.cols() != 1 || s.rows() != a.rows())
    shape_fail("mul_rows", shape_str(a.value()) + " vs " + shape_str(s.value()));
  return emit<MulRowsOp>({a, s});
}

Var matmul3(Var a, Var b) {
  require_cols("matmul3", a.value(), 9);
  require_same_shape("matmul3", a.value(), b.value());
  return emit<MatMul3Op>({a, b});
}

Var linear(Var x, Var w) {
  if (x.cols() != w.cols()) shape_fail("linear", shape_str(x.value()) + " vs weights " + shape_str(w.value()));
  return emit<LinearMapOp>({x, w});
}

Var add_bias(Var x, Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols())
    shape_fail("add_bias", shape_str(x.value()) + " vs bias " + shape_str(bias.value()));
  return emit<AddBiasOp>({x, bias});
}

Var linear(Var x, Var w, Var bias) { return add_bias(linear(x, w), bias); }

Var channel_mix(Var w, Var x) {
  if (w.rows() != w.cols() || w.rows() == 0 || x.rows() % w.rows() != 0)
    shape_fail("channel_mix", "weights " + shape_str(w.value()) + " vs " + shape_str(x.value()));
  return emit<ChannelMixOp>({w, x}, w.rows());
}

Var channel_scale(Var w, Var t) {
  if (w.rows() != t.rows()) shape_fail("channel_scale", shape_str(w.value()) + " vs " + shape_str(t.value()));
  return emit<ChannelScaleOp>({w, t});
}

Var scatter_scaled(Var w, Var t, IndexList index, Index n_out) {
  if (w.rows() != t.rows() || static_cast<Index>(index.size()) != w.rows())
    shape_fail("scatter_scaled", shape_str(w.value()) + " vs " + shape_str(t.value()) + " with " +
                                     std::to_string(index.size()) + " indices");
  for (Index i : index)
    if (i < 0 || i >= n_out) shape_fail("scatter_scaled", "index " + std::to_string(i) + " out of range");
  return emit<ScatterScaledOp>({w, t}, std::move(index), n_out);
}

Var message(Var y, Var f, IndexList centers, IndexList neighbors) {
  const Index c = f.cols();
  if (c == 0 || y.rows() % c != 0 || f.rows() != static_cast<Index>(centers.size()) ||
      centers.size() != neighbors.size())
    shape_fail("message", shape_str(y.value()) + " vs " + shape_str(f.value()) + " with " +
                              std::to_string(centers.size()) + " edges");
  const Index n = y.rows() / c;
  for (std::size_t e = 0; e < centers.size(); ++e)
    if (centers[e] < 0 || centers[e] >= n || neighbors[e] < 0 || neighbors[e] >= n)
      shape_fail("message", "edge " + std::to_string(e) + " out of range");
  return emit<MessageOp>({y, f}, std::move(centers), std::move(neighbors), c);
}

Var cross_rows(Var a, Var b) {
  require_cols("cross_rows", a.value(), 3);
  require_same_shape("cross_rows", a.value(), b.value());
  return emit<CrossOp>({a, b});
}

Var outer_rows(Var a, Var b) {
  require_cols("outer_rows", a.value(), 3);
  require_same_shape("outer_rows", a.value(), b.value());
  return emit<OuterOp>({a, b});
}

Var sum_reduce(Var a) { return emit<SumReduceOp>({a}); }
Var sum_cols(Var a) { return emit<SumColsOp>({a}); }

Var gather_rows(Var a, IndexList index) {
  for (Index i : index)
    if (i < 0 || i >= a.rows())
      shape_fail("gather_rows", "index " + std::to_string(i) + " out of range for " + shape_str(a.value()));
  return emit<GatherOp>({a}, std::move(index));
}

Var scatter_rows(Var a, IndexList index, Index n_out) {
  if (static_cast<Index>(index.size()) != a.rows())
    shape_fail("scatter_rows", shape_str(a.value()) + " with " + std::to_string(index.size()) + " indices");
  for (Index i : index)
    if (i < 0 || i >= n_out) shape_fail("scatter_rows", "index " + std::to_string(i) + " out of range");
  return emit<ScatterOp>({a}, std::move(index), n_out);
}

Var reshape(Var a, Index rows, Index cols) {
  if (rows * cols != a.value().size())
    shape_fail("reshape", shape_str(a.value()) + " to (" + std::to_string(rows) + "x" + std::to_string(cols) + ")");
  return emit<ReshapeOp>({a}, rows, cols);
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  for (const Var& p : parts)
    if (p.rows() != parts.front().rows())
      shape_fail("concat_cols", shape_str(p.value()) + " vs " + shape_str(parts.front().value()));
  return parts.front().tape().record(std::make_unique<ConcatColsOp>(), parts);
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols())
    shape_fail("slice_cols", shape_str(a.value()) + " [" + std::to_string(start) + ", +" + std::to_string(count) + ")");
  return emit<SliceColsOp>({a}, start, count);
}

Var project_scalar(Var x) {
  require_cols("project_scalar", x.value(), 9);
  return emit<ProjectOp>({x}, Irrep::scalar);
}
Var project_vector(Var x) {
  require_cols("project_vector", x.value(), 9);
  return emit<ProjectOp>({x}, Irrep::vector);
}
Var project_traceless(Var x) {
  require_cols("project_traceless", x.value(), 9);
  return emit<ProjectOp>({x}, Irrep::traceless);
}

Var skew_rows(Var v) {
  require_cols("skew_rows", v.value(), 3);
  return emit<SkewOp>({v});
}

Var identity_rows(Var s) {
  require_cols("identity_rows", s.value(), 1);
  return emit<IdentityRowsOp>({s});
}

Var silu(Var x) { return emit<SiluOp>({x}); }
Var sqrt(Var x) { return emit<SqrtOp>({x}); }
Var reciprocal(Var x) { return emit<ReciprocalOp>({x}); }
Var exp(Var x) { return emit<ExpOp>({x}); }

Var cosine_cutoff(Var r, double lower, double upper) {
  require_cols("cosine_cutoff", r.value(), 1);
  if (!(upper > lower)) throw std::invalid_argument("cosine_cutoff: upper must exceed lower");
  return emit<CosineCutoffOp>({r}, lower, upper);
}

Var expnorm_rbf(Var r, double lower, double upper, int count) {
  require_cols("expnorm_rbf", r.value(), 1);
  if (count < 1) throw std::invalid_argument("expnorm_rbf: need at least one basis function");
  return emit<ExpNormRbfOp>({r}, lower, upper, count);
}

// ---------------------------------------------------------------------------

bool GradCheckReport::within(double abs_tol, double rel_tol) const {
  for (Index i = 0; i < analytic.size(); ++i) {
    const double err = std::abs(analytic(i) - numeric(i));
    if (err > std::max(abs_tol, rel_tol * std::abs(numeric(i)))) return false;
  }
  return true;
}

GradCheckReport gradcheck(const ScalarFn& f, const Array& point, double h) {
  GradCheckReport report;
  {
    Tape tape;
    Var x = tape.leaf(point, true);
    Var y = f(tape, x);
    tape.backward(y);
    report.analytic = tape.grad(x);
  }
  auto eval = [&](const Array& p) {
    Tape tape;
    Var x = tape.leaf(p, true);
    return f(tape, x).value()(0, 0);
  };
  report.numeric = Array::Zero(point.rows(), point.cols());
  Array p = point;
  for (Index i = 0; i < point.size(); ++i) {
    const double x0 = p(i);
    p(i) = x0 + h;
    const double up = eval(p);
    p(i) = x0 - h;
    const double down = eval(p);
    p(i) = x0;
    report.numeric(i) = (up - down) / (2.0 * h);
  }
  const Array diff = (report.analytic - report.numeric).abs();
  report.max_abs_error = diff.size() ? diff.maxCoeff() : 0.0;
  const double scale = report.numeric.size() ? report.numeric.abs().maxCoeff() : 0.0;
  report.max_rel_error = scale > 0.0 ? report.max_abs_error / scale : report.max_abs_error;
  return report;
}

}  // namespace tnet::ad
