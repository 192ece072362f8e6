#include "tnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace tnet {

namespace {

struct Candidate {
  Eigen::Index center;
  Eigen::Index neighbor;
  double distance;
};

// Shared by both builders so that inclusion decisions agree bit for bit.
inline double pair_distance(const Positions& p, Eigen::Index i, Eigen::Index j) {
  const double dx = p(j, 0) - p(i, 0);
  const double dy = p(j, 1) - p(i, 1);
  const double dz = p(j, 2) - p(i, 2);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

NeighborList finalize(const Positions& p, std::vector<Candidate> pairs) {
  std::sort(pairs.begin(), pairs.end(), [](const Candidate& a, const Candidate& b) {
    if (a.center != b.center) return a.center < b.center;
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.neighbor < b.neighbor;
  });
  NeighborList out;
  out.centers.reserve(pairs.size());
  out.neighbors.reserve(pairs.size());
  out.distances.reserve(pairs.size());
  out.unit_vectors.reserve(pairs.size());
  for (const Candidate& c : pairs) {
    out.centers.push_back(c.center);
    out.neighbors.push_back(c.neighbor);
    out.distances.push_back(c.distance);
    out.unit_vectors.push_back((p.row(c.neighbor) - p.row(c.center)).transpose() / c.distance);
  }
  return out;
}

std::vector<Candidate> brute_force(const Positions& p, double cutoff) {
  std::vector<Candidate> pairs;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
      if (i == j) continue;
      const double r = pair_distance(p, i, j);
      if (r <= cutoff) pairs.push_back({i, j, r});
    }
  return pairs;
}

std::vector<Candidate> cell_list(const Positions& p, double cutoff) {
  using Key = std::int64_t;
  const Eigen::RowVector3d lo = p.colwise().minCoeff();
  auto cell_of = [&](Eigen::Index i) {
    return Eigen::Vector3<std::int64_t>(static_cast<std::int64_t>(std::floor((p(i, 0) - lo(0)) / cutoff)),
                                        static_cast<std::int64_t>(std::floor((p(i, 1) - lo(1)) / cutoff)),
                                        static_cast<std::int64_t>(std::floor((p(i, 2) - lo(2)) / cutoff)));
  };
  auto key = [](std::int64_t x, std::int64_t y, std::int64_t z) -> Key {
    return (x * 73856093LL) ^ (y * 19349663LL) ^ (z * 83492791LL);
  };
  std::unordered_map<Key, std::vector<Eigen::Index>> cells;
  std::vector<Eigen::Vector3<std::int64_t>> where(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    where[static_cast<std::size_t>(i)] = cell_of(i);
    const auto& c = where[static_cast<std::size_t>(i)];
    cells[key(c.x(), c.y(), c.z())].push_back(i);
  }
  std::vector<Candidate> pairs;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto& c = where[static_cast<std::size_t>(i)];
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells.find(key(c.x() + dx, c.y() + dy, c.z() + dz));
          if (it == cells.end()) continue;
          for (Eigen::Index j : it->second) {
            if (j == i) continue;
            // Hash collisions can put far cells in the same bucket; check the real cell.
            const auto& cj = where[static_cast<std::size_t>(j)];
            if (cj.x() != c.x() + dx || cj.y() != c.y() + dy || cj.z() != c.z() + dz) continue;
            const double r = pair_distance(p, i, j);
            if (r <= cutoff) pairs.push_back({i, j, r});
          }
        }
  }
  return pairs;
}

}  // namespace

NeighborList build_neighbor_list(const Positions& positions, double cutoff, NeighborMethod method) {
  if (!(cutoff > 0.0)) throw DataError("neighbor list cutoff must be positive");
  if (method == NeighborMethod::automatic)
    method = positions.rows() > 64 ? NeighborMethod::cell_list : NeighborMethod::brute_force;
  if (method == NeighborMethod::brute_force) return finalize(positions, brute_force(positions, cutoff));
  return finalize(positions, cell_list(positions, cutoff));
}

}  // namespace tnet
