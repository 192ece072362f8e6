#pragma once

#include "tnet/model.hpp"

#include <random>

namespace tnet::testing {

/// Random molecule with atoms at least min_dist apart inside a cube.
inline AtomicSystem random_molecule(int n, std::uint64_t seed, double box = 3.0, double min_dist = 0.9) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, box);
  const int elems[] = {1, 6, 7, 8};
  std::uniform_int_distribution<int> pick(0, 3);
  AtomicSystem s;
  s.positions.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    while (true) {
      Eigen::RowVector3d p(u(rng), u(rng), u(rng));
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) ok = (s.positions.row(j) - p).norm() >= min_dist;
      if (ok) {
        s.positions.row(i) = p;
        break;
      }
    }
    s.numbers.push_back(elems[pick(rng)]);
  }
  return s;
}

inline ModelConfig small_config(AttributeMode mode = AttributeMode::none) {
  ModelConfig c;
  c.num_channels = 8;
  c.num_layers = 2;
  c.num_rbf = 12;
  c.cutoff_upper = 5.0;
  c.attribute_mode = mode;
  c.set_shared_lambda(0.1, 0.1);
  return c;
}

inline ad::Array conjugate(const ad::Array& x, const Mat3d& r) {
  ad::Array out(x.rows(), 9);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Mat3d m = Eigen::Map<const Mat3d>(x.row(i).data());
    const Mat3d t = r * m * r.transpose();
    Eigen::Map<Mat3d>(out.row(i).data()) = t;
  }
  return out;
}

}  // namespace tnet::testing
