#include "tnet/data.hpp"

#include <cmath>

namespace tnet {

std::map<int, double> OracleParams::default_charge_offsets() {
  return {{1, 0.1}, {6, -0.4}, {7, -0.3}, {8, -0.2}, {9, -0.1}};
}

// Bondi van der Waals radii, Angstrom.
std::map<int, double> OracleParams::default_radii() {
  return {{1, 1.20}, {6, 1.70}, {7, 1.55}, {8, 1.52}, {9, 1.47}, {11, 2.27}, {17, 1.75}, {47, 1.72}};
}

double OracleParams::charge_offset(int z) const {
  const auto it = charge_offsets.find(z);
  return it == charge_offsets.end() ? 0.0 : it->second;
}

double OracleParams::sigma(int zi, int zj) const {
  auto radius = [&](int z) {
    const auto it = radii.find(z);
    if (it == radii.end()) throw DataError("oracle has no radius for element " + std::string(element_symbol(z)));
    return it->second;
  };
  return (radius(zi) + radius(zj)) / std::pow(2.0, 1.0 / 6.0);
}

std::vector<double> oracle_charges(const AtomicSystem& s, const OracleParams& p) {
  std::vector<double> q(s.size());
  const double share = s.total_charge / static_cast<double>(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) q[i] = p.charge_offset(s.numbers[i]) + share;
  return q;
}

OracleResult oracle_energy_forces(const AtomicSystem& s, const OracleParams& p) {
  const auto n = static_cast<Eigen::Index>(s.size());
  const std::vector<double> q = oracle_charges(s, p);
  const double gamma2 = p.softening * p.softening;
  const double spin_j = static_cast<double>(s.spin) * p.spin_coupling;

  OracleResult out;
  out.forces = Positions::Zero(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Eigen::RowVector3d d = s.positions.row(i) - s.positions.row(j);
      const double r2 = d.squaredNorm();
      const double r = std::sqrt(r2);
      const double sig = p.sigma(s.numbers[static_cast<std::size_t>(i)], s.numbers[static_cast<std::size_t>(j)]);
      const double s2 = sig * sig / r2;
      const double s6 = s2 * s2 * s2;
      const double s12 = s6 * s6;
      const double qq = p.coulomb_k * q[static_cast<std::size_t>(i)] * q[static_cast<std::size_t>(j)];
      const double soft = std::sqrt(r2 + gamma2);
      const double decay = spin_j * std::exp(-r / p.spin_range);

      out.energy += 4.0 * p.epsilon * (s12 - s6) + qq / soft + decay;
      // dE/dr divided by r, so that the gradient on i is dEdr_over_r * d.
      const double de_over_r = 4.0 * p.epsilon * (-12.0 * s12 + 6.0 * s6) / r2 - qq / (soft * soft * soft) -
                               decay / (p.spin_range * r);
      out.forces.row(i) -= de_over_r * d;
      out.forces.row(j) += de_over_r * d;
    }
  }
  return out;
}

Positions minimize_geometry(AtomicSystem system, const OracleParams& params, const MinimizeOptions& options) {
  constexpr double armijo = 1e-4;
  double step = 1e-2;
  OracleResult cur = oracle_energy_forces(system, params);
  for (int it = 0; it < options.max_iterations; ++it) {
    if (cur.forces.rowwise().norm().maxCoeff() < options.force_tolerance) return system.positions;
    const double f2 = cur.forces.squaredNorm();
    const Positions start = system.positions;
    while (true) {
      system.positions = start + step * cur.forces;
      OracleResult trial = oracle_energy_forces(system, params);
      if (std::isfinite(trial.energy) && trial.energy <= cur.energy - armijo * step * f2) {
        cur = std::move(trial);
        step = std::min(step * 1.5, 1.0);
        break;
      }
      step *= 0.5;
      if (step < 1e-14) throw DataError("geometry minimization stalled in line search");
    }
  }
  if (cur.forces.rowwise().norm().maxCoeff() < options.force_tolerance) return system.positions;
  throw DataError("geometry minimization did not converge in " + std::to_string(options.max_iterations) +
                  " iterations");
}

}  // namespace tnet
