#pragma once

#include "tnet/model.hpp"

#include <vector>

namespace tnet {

/// Random molecule inside a cube, pairwise distances >= min_dist. Elements are drawn
/// uniformly from `elements` (H/C/N/O when empty).
AtomicSystem random_system(int atoms, std::uint64_t seed, double box = 3.0, double min_dist = 0.9,
                           const std::vector<int>& elements = {});

/// Random system with `atoms` atoms at number density `density` (atoms per cubic Angstrom).
AtomicSystem random_system_at_density(int atoms, double density, std::uint64_t seed, double min_dist = 0.9,
                                      const std::vector<int>& elements = {});

struct EquivarianceOptions {
  int trials = 100;
  std::uint64_t seed = 1;
  int min_atoms = 3;
  int max_atoms = 12;
  bool allow_reflections = true;
  double feature_tol = 1e-10;  // absolute
  double energy_tol = 1e-9;    // relative
  double force_tol = 1e-9;     // relative to max |F|
  ForwardOptions forward;
};

struct EquivarianceReport {
  int trials = 0;
  double max_feature_dev = 0.0;
  double max_energy_rel_dev = 0.0;
  double max_force_rel_dev = 0.0;
  int worst_trial = -1;
  bool passed = true;
};

/// Random systems under random orthogonal maps: features must transform as
/// R X R^T, energies stay fixed, forces rotate.
EquivarianceReport check_equivariance(const Model& model, const EquivarianceOptions& options);

struct ForceCheckOptions {
  int systems = 20;
  int min_atoms = 5;
  int max_atoms = 15;
  double step = 1e-4;
  double tolerance = 1e-5;      // max |F - F_fd| / max |F|
  double net_force_tol = 1e-10; // |sum F|
  std::uint64_t seed = 1;
};

struct ForceCheckReport {
  int systems = 0;
  double max_rel_error = 0.0;
  double max_net_force = 0.0;
  bool passed = true;
};

/// Forces against central differences of the energy.
ForceCheckReport check_forces(const Model& model, const ForceCheckOptions& options);

struct ScalingOptions {
  std::vector<int> sizes = {64, 128, 256, 512, 1024};
  double density = 0.03;
  int repeats = 5;
  std::uint64_t seed = 1;
  double max_ratio = 2.5;
};

struct ScalingPoint {
  int atoms = 0;
  double mean_seconds = 0.0;
  double stddev_seconds = 0.0;
  double median_seconds = 0.0;
};

struct ScalingReport {
  std::vector<ScalingPoint> points;
  std::vector<double> ratios;  // median(2N) / median(N) for consecutive sizes
  double median_ratio = 0.0;
  bool passed = true;
};

/// Wall time of one energy+forces evaluation per size.
ScalingReport bench_scaling(const Model& model, const ScalingOptions& options);

}  // namespace tnet
