#pragma once

// Rank-2 Cartesian tensor algebra for per-atom 3x3 features.
//
// Everything here is a free function over small fixed-size Eigen types, templated
// on the scalar so the same code serves double-precision model code and tests.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace tnet {

template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3, Eigen::RowMajor>;

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

using Mat3d = Mat3<double>;
using Vec3d = Vec3<double>;

/// Irreducible O(3) split of a 3x3 tensor: X = scalar + vector + traceless.
///
/// scalar_part is (tr X / 3) * Id, vector_part the antisymmetric half and
/// traceless_part the symmetric trace-free remainder.
template <typename Scalar>
struct IrrepDecomposition {
  Mat3<Scalar> scalar_part;
  Mat3<Scalar> vector_part;
  Mat3<Scalar> traceless_part;

  Mat3<Scalar> sum() const { return scalar_part + vector_part + traceless_part; }
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.derived().array().isFinite().all();
}

template <typename Scalar>
void require_finite(const Mat3<Scalar>& x, const char* where) {
  if (!all_finite(x)) throw std::domain_error(std::string(where) + ": non-finite tensor entry");
}

template <typename Scalar>
IrrepDecomposition<Scalar> decompose(const Mat3<Scalar>& x) {
  require_finite(x, "decompose");
  const Scalar third_trace = x.trace() / Scalar(3);
  IrrepDecomposition<Scalar> out;
  out.scalar_part = third_trace * Mat3<Scalar>::Identity();
  out.vector_part = Scalar(0.5) * (x - x.transpose());
  out.traceless_part = Scalar(0.5) * (x + x.transpose()) - out.scalar_part;
  return out;
}

template <typename Scalar>
Scalar frobenius_norm_sq(const Mat3<Scalar>& x) {
  require_finite(x, "frobenius_norm_sq");
  return x.squaredNorm();
}

template <typename Scalar>
Mat3<Scalar> matmul(const Mat3<Scalar>& a, const Mat3<Scalar>& b) {
  return a * b;
}

/// Cross-product matrix: skew(v) * w == v x w.
template <typename Scalar>
Mat3<Scalar> skew(const Vec3<Scalar>& v) {
  Mat3<Scalar> m;
  m << Scalar(0), -v.z(), v.y(),
       v.z(), Scalar(0), -v.x(),
       -v.y(), v.x(), Scalar(0);
  return m;
}

/// Per-channel X / (||X||_F + 1). Every output channel has norm strictly below 1.
template <typename Scalar>
void normalize_feature(std::span<const Mat3<Scalar>> in, std::span<Mat3<Scalar>> out) {
  if (in.size() != out.size()) throw std::invalid_argument("normalize_feature: channel count mismatch");
  for (std::size_t c = 0; c < in.size(); ++c) {
    require_finite(in[c], "normalize_feature");
    out[c] = in[c] / (in[c].norm() + Scalar(1));
  }
}

/// Haar-ish random orthogonal matrix from a QR factorisation of a Gaussian matrix.
/// With allow_reflection the determinant sign is drawn uniformly.
template <typename Scalar = double>
Mat3<Scalar> random_orthogonal(std::uint64_t seed, bool allow_reflection) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Matrix3d g;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(g);
  Eigen::Matrix3d q = qr.householderQ();
  // Fix the column signs so the distribution does not depend on Householder conventions.
  const Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < 3; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  if (q.determinant() < 0) q.col(0) *= -1.0;
  if (allow_reflection && std::uniform_int_distribution<int>(0, 1)(rng) == 1) q = -q;
  return q.cast<Scalar>();
}

}  // namespace tnet
