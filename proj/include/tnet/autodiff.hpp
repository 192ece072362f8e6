#pragma once

// Tape-based reverse-mode differentiation over dense row-major arrays.
//
// Every node stores its forward value. Two reverse sweeps are supported:
//
//   backward(root, seed)         ordinary vector-Jacobian product.
//   backward_dual(root, s, t)    reverse sweep over the tangent-extended
//                                computation (value, d value / d eps) after
//                                propagate_tangents(); gives gradients of
//                                <s, y> + <t, dy/d eps> with respect to every
//                                leaf. This is what force matching needs:
//                                with the tangent seeded on positions along v,
//                                dy/d eps = dE/dr . v, so parameter gradients of
//                                force losses come out of a single extra sweep.
//
// Accumulation always runs in descending node id, so repeated sweeps over the
// same tape are bitwise reproducible.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tnet::ad {

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Array& a);

using ConstArrays = std::span<const Array* const>;
using MutArrays = std::span<Array* const>;

/// A differentiable primitive. Input tangents and gradient slots may be null,
/// meaning "identically zero" and "not needed" respectively.
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  virtual Array forward(ConstArrays x) const = 0;
  virtual Array jvp(ConstArrays x, const Array& y, ConstArrays dx) const = 0;
  virtual void vjp(ConstArrays x, const Array& y, const Array& g, MutArrays gx) const = 0;
  virtual void dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g,
                        const Array* dg, MutArrays gx, MutArrays dgx) const = 0;
};

/// Adds src into *dst, treating an empty destination as zero.
void accumulate(Array* dst, const Array& src);

/// Op linear in all of its inputs jointly.
class LinearOp : public Op {
 public:
  virtual Array apply(ConstArrays x) const = 0;
  virtual void adjoint(ConstArrays x, const Array& g, MutArrays gx) const = 0;

  Array forward(ConstArrays x) const override { return apply(x); }
  Array jvp(ConstArrays x, const Array& y, ConstArrays dx) const override;
  void vjp(ConstArrays x, const Array&, const Array& g, MutArrays gx) const override {
    adjoint(x, g, gx);
  }
  void dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g, const Array* dg,
                MutArrays gx, MutArrays dgx) const override;
};

/// Op of two inputs, linear in each separately.
class BilinearOp : public Op {
 public:
  virtual Array apply(const Array& a, const Array& b) const = 0;
  virtual Array adj_a(const Array& g, const Array& b) const = 0;
  virtual Array adj_b(const Array& g, const Array& a) const = 0;

  Array forward(ConstArrays x) const override { return apply(*x[0], *x[1]); }
  Array jvp(ConstArrays x, const Array& y, ConstArrays dx) const override;
  void vjp(ConstArrays x, const Array& y, const Array& g, MutArrays gx) const override;
  void dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g, const Array* dg,
                MutArrays gx, MutArrays dgx) const override;
};

/// Elementwise scalar function with first and second derivatives.
class UnaryOp : public Op {
 public:
  virtual Array f(const Array& x) const = 0;
  virtual Array df(const Array& x, const Array& y) const = 0;
  virtual Array d2f(const Array& x, const Array& y) const = 0;

  Array forward(ConstArrays x) const override { return f(*x[0]); }
  Array jvp(ConstArrays x, const Array& y, ConstArrays dx) const override;
  void vjp(ConstArrays x, const Array& y, const Array& g, MutArrays gx) const override;
  void dual_vjp(ConstArrays x, const Array& y, ConstArrays dx, const Array& g, const Array* dg,
                MutArrays gx, MutArrays dgx) const override;
};

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }
  const Array& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value, bool requires_grad = true);
  Var constant(Array value) { return leaf(std::move(value), false); }
  Var record(std::unique_ptr<Op> op, std::initializer_list<Var> inputs);
  Var record(std::unique_ptr<Op> op, const std::vector<Var>& inputs);

  std::size_t size() const { return nodes_.size(); }
  const Array& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  /// Reverse sweep from a (1,1) node with unit seed.
  void backward(Var loss);
  /// Reverse sweep with an explicit seed shaped like root.
  void backward(Var root, const Array& seed);

  /// Seeds the tangent of a leaf; call propagate_tangents() afterwards.
  void set_tangent(Var leaf, Array tangent);
  void propagate_tangents();
  bool has_tangent(Var v) const { return nodes_.at(v.id()).has_tangent; }
  const Array& tangent(Var v) const;

  /// Reverse sweep through the tangent-extended computation. tangent_seed may be
  /// empty (size 0), in which case this reduces to backward(root, seed).
  void backward_dual(Var root, const Array& seed, const Array& tangent_seed);

  /// Gradient of the last sweep with respect to v; zeros if v was not reached.
  Array grad(Var v) const;
  /// Gradient with respect to v's tangent after backward_dual.
  Array tangent_grad(Var v) const;

 private:
  struct Node {
    std::unique_ptr<Op> op;
    std::vector<int> inputs;
    Array value;
    Array tangent;
    Array grad;
    Array tgrad;
    bool requires_grad = false;
    bool has_tangent = false;
  };

  void check_owned(Var v) const;
  void reset_grads();
  void sweep(int root_id, bool dual);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive set. Shapes are (rows, cols); "per-row 3x3" means a (R, 9) array
// whose rows are row-major 3x3 matrices.

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator-(Var a);

Var add(Var a, Var b);
Var subtract(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var mul(Var a, Var b);                  // elementwise, equal shapes
Var mul_rows(Var a, Var s);             // (R,K) * (R,1)
Var matmul3(Var a, Var b);              // per-row 3x3 product
Var linear(Var x, Var w);               // (R,Din) x (Dout,Din)^T
Var linear(Var x, Var w, Var bias);     // + (1,Dout)
Var add_bias(Var x, Var bias);          // (R,K) + (1,K)
Var channel_mix(Var w, Var x);          // per atom block: (C,C) * (C,K)
Var channel_scale(Var w, Var t);        // (E,C) (x) (E,K) -> (E*C,K)
Var scatter_scaled(Var w, Var t, IndexList index, Index n_out);   // (E,C),(E,K) -> (n_out*C,K)
Var message(Var y, Var f, IndexList centers, IndexList neighbors);  // (N*C,K),(E,C) -> (N*C,K)
Var cross_rows(Var a, Var b);           // (R,3) x (R,3)
Var outer_rows(Var a, Var b);           // (R,3) (R,3) -> (R,9)
Var sum_reduce(Var a);                  // -> (1,1)
Var sum_cols(Var a);                    // (R,K) -> (R,1)
Var gather_rows(Var a, IndexList index);                 // (N,K) -> (|index|,K)
Var scatter_rows(Var a, IndexList index, Index n_out);   // (E,K) -> (n_out,K), summing
Var reshape(Var a, Index rows, Index cols);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, Index start, Index count);
Var project_scalar(Var x);              // per-row (tr/3) Id
Var project_vector(Var x);              // per-row antisymmetric part
Var project_traceless(Var x);           // per-row symmetric traceless part
Var skew_rows(Var v);                   // (R,3) -> (R,9) cross-product matrices
Var identity_rows(Var s);               // (R,1) -> (R,9) s * Id
Var silu(Var x);
Var sqrt(Var x);                        // derivative at 0 taken as 0
Var reciprocal(Var x);
Var exp(Var x);
Var cosine_cutoff(Var r, double lower, double upper);
Var expnorm_rbf(Var r, double lower, double upper, int count);

// ---------------------------------------------------------------------------

struct GradCheckReport {
  Array analytic;
  Array numeric;
  double max_abs_error = 0.0;
  /// ||analytic - numeric||_inf / ||numeric||_inf.
  double max_rel_error = 0.0;

  /// Every coordinate within max(abs_tol, rel_tol * |numeric|).
  bool within(double abs_tol, double rel_tol) const;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares the reverse-mode gradient of f at point with central differences.
GradCheckReport gradcheck(const ScalarFn& f, const Array& point, double h);

}  // namespace tnet::ad
