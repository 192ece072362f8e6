#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tnet/autodiff.hpp"

#include <random>

using namespace tnet::ad;

namespace {

Array random_array(Index r, Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(r, c);
  for (Index i = 0; i < a.size(); ++i) a(i) = u(rng);
  return a;
}

double dot(const Array& a, const Array& b) { return (a * b).sum(); }

// Checks a two-leaf function y = f(x, p) in three ways against central
// differences: reverse gradients, forward tangents, and the dual sweep that
// gives d/dp of <t, dy/dx . v>.
struct Harness {
  using Fn = std::function<Var(Var x, Var p)>;
  Fn f;
  Array x0, p0;
  double h = 1e-6;

  Array value(const Array& x, const Array& p) const {
    Tape t;
    return f(t.leaf(x), t.leaf(p)).value();
  }

  void check(double tol) const {
    const Array probe = random_array(value(x0, p0).rows(), value(x0, p0).cols(), 99);
    const Array v = random_array(x0.rows(), x0.cols(), 98);
    const Array tseed = random_array(probe.rows(), probe.cols(), 97);

    Tape tape;
    Var x = tape.leaf(x0), p = tape.leaf(p0);
    Var y = f(x, p);
    tape.backward(y, probe);
    const Array gx = tape.grad(x), gp = tape.grad(p);

    auto fd = [&](const Array& base, auto&& eval) {
      Array out(base.rows(), base.cols());
      Array b = base;
      for (Index i = 0; i < b.size(); ++i) {
        const double keep = b(i);
        b(i) = keep + h;
        const double up = eval(b);
        b(i) = keep - h;
        const double down = eval(b);
        b(i) = keep;
        out(i) = (up - down) / (2 * h);
      }
      return out;
    };
    const Array nx = fd(x0, [&](const Array& xx) { return dot(probe, value(xx, p0)); });
    const Array np = fd(p0, [&](const Array& pp) { return dot(probe, value(x0, pp)); });
    CHECK((gx - nx).abs().maxCoeff() <= tol * std::max(1.0, nx.abs().maxCoeff()));
    CHECK((gp - np).abs().maxCoeff() <= tol * std::max(1.0, np.abs().maxCoeff()));

    // Forward tangent along v.
    tape.set_tangent(x, v);
    tape.propagate_tangents();
    const Array jv = (value(x0 + h * v, p0) - value(x0 - h * v, p0)) / (2 * h);
    CHECK((tape.tangent(y) - jv).abs().maxCoeff() <= tol * std::max(1.0, jv.abs().maxCoeff()));

    // Dual sweep: gradient of <probe, y> + <tseed, J v> with respect to p and x.
    tape.backward_dual(y, probe, tseed);
    const Array dgp = tape.grad(p), dgx = tape.grad(x);
    auto objective = [&](const Array& xx, const Array& pp) {
      Tape t;
      Var a = t.leaf(xx), b = t.leaf(pp);
      Var out = f(a, b);
      t.set_tangent(a, v);
      t.propagate_tangents();
      return dot(probe, out.value()) + dot(tseed, t.tangent(out));
    };
    const Array ndp = fd(p0, [&](const Array& pp) { return objective(x0, pp); });
    const Array ndx = fd(x0, [&](const Array& xx) { return objective(xx, p0); });
    CHECK((dgp - ndp).abs().maxCoeff() <= tol * std::max(1.0, ndp.abs().maxCoeff()));
    CHECK((dgx - ndx).abs().maxCoeff() <= tol * std::max(1.0, ndx.abs().maxCoeff()));
    // Tangent gradient equals the ordinary gradient of <tseed, y>.
    Tape t2;
    Var x2 = t2.leaf(x0), p2 = t2.leaf(p0);
    Var y2 = f(x2, p2);
    t2.backward(y2, tseed);
    CHECK((tape.tangent_grad(x) - t2.grad(x2)).abs().maxCoeff() <= 1e-12);
  }
};

}  // namespace

TEST_CASE("silu closed forms") {
  Tape t;
  Var x = t.leaf(Array::Zero(1, 1));
  Var y = silu(x);
  CHECK(y.value()(0, 0) == 0.0);
  t.backward(y);
  CHECK(t.grad(x)(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("sum_reduce of copies") {
  Tape t;
  Var c = t.leaf(Array::Constant(1, 1, 2.5));
  std::vector<Var> parts(4, c);
  Var y = sum_reduce(concat_cols(parts));
  CHECK(y.value()(0, 0) == 10.0);
  t.backward(y);
  CHECK(t.grad(c)(0, 0) == 4.0);

  Tape t2;
  Var a = t2.leaf(Array::Constant(3, 2, 1.5));
  Var s = sum_reduce(a);
  t2.backward(s);
  CHECK((t2.grad(a) == 1.0).all());
}

TEST_CASE("x squared and frobenius norm") {
  Tape t;
  Var x = t.leaf(Array::Constant(1, 1, 3.0));
  Var y = mul(x, x);
  t.backward(y);
  CHECK(t.grad(x)(0, 0) == 6.0);

  Tape t2;
  const Array m = random_array(2, 9, 4);
  Var X = t2.leaf(m);
  t2.backward(sum_reduce(mul(X, X)));
  CHECK((t2.grad(X) - 2 * m).abs().maxCoeff() == 0.0);
}

TEST_CASE("matmul3 adjoint closed form") {
  const Array a = random_array(1, 9, 1), b = random_array(1, 9, 2), g = random_array(1, 9, 3);
  Tape t;
  Var A = t.leaf(a), B = t.leaf(b);
  Var C = matmul3(A, B);
  t.backward(C, g);
  using M = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
  const M ma = Eigen::Map<const M>(a.data()), mb = Eigen::Map<const M>(b.data()), mg = Eigen::Map<const M>(g.data());
  const M ga = mg * mb.transpose(), gb = ma.transpose() * mg;
  CHECK((Eigen::Map<const M>(t.grad(A).data()) - ga).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((Eigen::Map<const M>(t.grad(B).data()) - gb).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("shape errors name the op and shapes") {
  Tape t;
  Var a = t.leaf(Array::Zero(2, 3)), b = t.leaf(Array::Zero(3, 2));
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("3x2") != std::string::npos);
  }
  CHECK_THROWS_AS(t.backward(a), ShapeError);
  CHECK_THROWS_AS(matmul3(a, a), ShapeError);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape t;
  Var a = t.leaf(Array::Zero(1, 1));
  CHECK_THROWS_AS(reciprocal(a), NumericError);
}

TEST_CASE("scatter conserves mass") {
  const Array e = random_array(6, 2, 5);
  Tape t;
  Var a = t.leaf(e);
  Var s = scatter_rows(a, {0, 2, 2, 1, 0, 2}, 3);
  CHECK(std::abs(s.value().sum() - e.sum()) <= 1e-14);
  t.backward(sum_reduce(s));
  CHECK((t.grad(a) == 1.0).all());
}

TEST_CASE("fused edge ops match gather, scale and scatter") {
  const IndexList centers{0, 1, 1, 2, 2}, neighbors{1, 0, 2, 1, 0};
  const Index c = 2;
  IndexList crows, nrows;
  for (std::size_t e = 0; e < centers.size(); ++e)
    for (Index ch = 0; ch < c; ++ch) {
      crows.push_back(centers[e] * c + ch);
      nrows.push_back(neighbors[e] * c + ch);
    }
  Tape t;
  Var y = t.leaf(random_array(6, 9, 29)), f = t.leaf(random_array(5, 2, 30)), r = t.leaf(random_array(5, 3, 31));
  const Array fused = message(y, f, centers, neighbors).value();
  const Array plain = scatter_rows(mul_rows(gather_rows(y, nrows), reshape(f, 10, 1)), crows, 6).value();
  CHECK((fused - plain).abs().maxCoeff() <= 1e-14);
  const Array fs = scatter_scaled(f, r, centers, 3).value();
  const Array ps = scatter_rows(channel_scale(f, r), crows, 6).value();
  CHECK((fs - ps).abs().maxCoeff() <= 1e-14);
  CHECK_THROWS_AS(message(y, f, {0, 1}, {1, 0}), ShapeError);
  CHECK_THROWS_AS(scatter_scaled(f, r, {0, 1, 1, 2, 3}, 3), ShapeError);
}

TEST_CASE("primitive rules against central differences") {
  const double tol = 1e-6;
  SUBCASE("arithmetic") {
    Harness{[](Var x, Var p) { return add(mul(x, p), subtract(scale(x, 2.0), add_scalar(p, 0.5))); },
            random_array(3, 4, 1), random_array(3, 4, 2)}
        .check(tol);
  }
  SUBCASE("elementwise nonlinear") {
    Harness{[](Var x, Var p) { return mul(silu(mul(x, p)), exp(scale(p, 0.3))); }, random_array(2, 5, 3),
            random_array(2, 5, 4)}
        .check(tol);
    Harness{[](Var x, Var p) { return mul(sqrt(mul(x, x)), reciprocal(add_scalar(mul(p, p), 1.0))); },
            random_array(2, 3, 5, 0.5, 2.0), random_array(2, 3, 6)}
        .check(tol);
  }
  SUBCASE("linear and bias") {
    Harness{[](Var x, Var p) { return linear(silu(x), p, p.tape().leaf(Array::Constant(1, 2, 0.1))); },
            random_array(4, 3, 7), random_array(2, 3, 8)}
        .check(tol);
    Harness{[](Var x, Var p) { return add_bias(mul(x, x), p); }, random_array(4, 3, 7), random_array(1, 3, 8)}
        .check(tol);
  }
  SUBCASE("matmul3 and projections") {
    Harness{[](Var x, Var p) {
              Var m = matmul3(x, p);
              return add(project_traceless(matmul3(m, x)), add(project_vector(m), project_scalar(mul(m, m))));
            },
            random_array(3, 9, 9), random_array(3, 9, 10)}
        .check(tol);
  }
  SUBCASE("channel ops") {
    // 2 atoms x 3 channels.
    Harness{[](Var x, Var p) { return matmul3(channel_mix(p, x), x); }, random_array(6, 9, 11),
            random_array(3, 3, 12)}
        .check(tol);
    Harness{[](Var x, Var p) { return mul(channel_scale(p, x), channel_scale(p, x)); }, random_array(4, 9, 13),
            random_array(4, 3, 14)}
        .check(tol);
    // 3 atoms x 2 channels, 4 edges.
    Harness{[](Var x, Var p) {
              Var m = message(x, p, {0, 1, 1, 2}, {1, 0, 2, 1});
              return matmul3(m, x);
            },
            random_array(6, 9, 25), random_array(4, 2, 26)}
        .check(tol);
    Harness{[](Var x, Var p) {
              Var s = scatter_scaled(p, x, {2, 0, 2, 1}, 3);
              return mul(s, s);
            },
            random_array(4, 3, 27), random_array(4, 2, 28)}
        .check(tol);
  }
  SUBCASE("vector ops") {
    Harness{[](Var x, Var p) {
              Var c = cross_rows(x, p);
              return add(outer_rows(c, x), skew_rows(mul(c, p)));
            },
            random_array(4, 3, 15), random_array(4, 3, 16)}
        .check(tol);
    Harness{[](Var x, Var p) { return mul(identity_rows(sum_cols(mul(x, x))), p); }, random_array(4, 3, 17),
            random_array(4, 9, 18)}
        .check(tol);
  }
  SUBCASE("indexing") {
    Harness{[](Var x, Var p) {
              Var g = gather_rows(x, {2, 0, 1, 2});
              Var s = scatter_rows(mul(g, gather_rows(p, {0, 0, 1, 1})), {1, 1, 0, 2}, 3);
              return reshape(concat_cols({slice_cols(s, 1, 2), mul(s, s)}), 7, 3);
            },
            random_array(3, 5, 19), random_array(2, 5, 20)}
        .check(tol);
  }
  SUBCASE("radial functions") {
    Harness{[](Var x, Var p) {
              Var r = sqrt(sum_cols(mul(x, x)));
              Var f = mul_rows(expnorm_rbf(r, 0.0, 5.0, 6), cosine_cutoff(r, 0.0, 5.0));
              return linear(f, p);
            },
            random_array(5, 3, 21, 0.3, 2.0), random_array(4, 6, 22)}
        .check(tol);
    Harness{[](Var x, Var p) {
              Var r = sqrt(sum_cols(mul(x, x)));
              return mul_rows(p, cosine_cutoff(r, 0.5, 2.5));
            },
            random_array(5, 3, 23, 0.2, 1.2), random_array(5, 2, 24)}
        .check(tol);
  }
}

TEST_CASE("cosine cutoff values") {
  Tape t;
  Array r(4, 1);
  r << 0.0, 5.0, 2.5, 7.0;
  Var c = cosine_cutoff(t.leaf(r), 0.0, 5.0);
  CHECK(c.value()(0, 0) == 1.0);
  CHECK(c.value()(1, 0) == 0.0);
  CHECK(c.value()(2, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.value()(3, 0) == 0.0);
}

TEST_CASE("gradcheck reports") {
  const Array point = random_array(3, 2, 30);
  const auto rep = gradcheck([](Tape&, Var x) { return sum_reduce(mul(x, x)); }, point, 1e-5);
  CHECK(rep.max_rel_error <= 1e-9);
  CHECK(rep.within(1e-9, 1e-9));
}

namespace {

// silu with a deliberately wrong derivative.
class BrokenSilu final : public UnaryOp {
 public:
  std::string_view name() const override { return "broken_silu"; }
  Array f(const Array& x) const override { return x / (1.0 + (-x).exp()); }
  Array df(const Array& x, const Array&) const override { return 1.0 / (1.0 + (-x).exp()); }
  Array d2f(const Array& x, const Array&) const override { return Array::Zero(x.rows(), x.cols()); }
};

}  // namespace

TEST_CASE("gradcheck flags a corrupted rule") {
  const Array point = random_array(4, 1, 31, 0.5, 2.0);
  const auto rep =
      gradcheck([](Tape& t, Var x) { return sum_reduce(t.record(std::make_unique<BrokenSilu>(), {x})); }, point, 1e-5);
  CHECK(rep.max_rel_error > 1e-3);
  CHECK_FALSE(rep.within(1e-6, 1e-5));
}

TEST_CASE("repeated sweeps are bitwise reproducible") {
  auto run = [] {
    Tape t;
    Var x = t.leaf(random_array(6, 9, 40));
    Var w = t.leaf(random_array(3, 3, 41));
    Var y = sum_reduce(mul(matmul3(channel_mix(w, x), x), silu(x)));
    t.backward(y);
    return std::make_pair(t.grad(x), t.grad(w));
  };
  const auto a = run(), b = run();
  CHECK((a.first == b.first).all());
  CHECK((a.second == b.second).all());

  Tape t;
  Var x = t.leaf(random_array(6, 9, 40));
  Var y = sum_reduce(mul(silu(x), x));
  t.backward(y);
  const Array g1 = t.grad(x);
  t.backward(y);
  CHECK((g1 == t.grad(x)).all());
}
