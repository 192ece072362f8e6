#include "tnet/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace tnet {

using ad::Array;

namespace {

Array conjugate(const Array& x, const Mat3d& r) {
  Array out(x.rows(), 9);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Mat3d m = Eigen::Map<const Mat3d>(x.row(i).data());
    Eigen::Map<Mat3d>(out.row(i).data()) = r * m * r.transpose();
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const std::vector<int> kDefaultElements{1, 6, 7, 8};

std::vector<int> model_elements(const Model& model) {
  if (model.trained_elements.empty()) return kDefaultElements;
  return {model.trained_elements.begin(), model.trained_elements.end()};
}

AtomicSystem place_atoms(int atoms, double box, double min_dist, const std::vector<int>& elements,
                         std::mt19937_64& rng) {
  const std::vector<int>& elems = elements.empty() ? kDefaultElements : elements;
  std::uniform_real_distribution<double> u(0.0, box);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(elems.size()) - 1);
  AtomicSystem s;
  s.positions.resize(atoms, 3);
  const double d2 = min_dist * min_dist;
  for (int i = 0; i < atoms; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100000) throw DataError("random_system: cannot place atoms at this density");
      const Eigen::RowVector3d p(u(rng), u(rng), u(rng));
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) ok = (s.positions.row(j) - p).squaredNorm() >= d2;
      if (ok) {
        s.positions.row(i) = p;
        break;
      }
    }
    s.numbers.push_back(elems[pick(rng)]);
  }
  return s;
}

}  // namespace

AtomicSystem random_system(int atoms, std::uint64_t seed, double box, double min_dist,
                           const std::vector<int>& elements) {
  std::mt19937_64 rng(seed);
  return place_atoms(atoms, box, min_dist, elements, rng);
}

AtomicSystem random_system_at_density(int atoms, double density, std::uint64_t seed, double min_dist,
                                      const std::vector<int>& elements) {
  if (!(density > 0.0)) throw std::invalid_argument("density must be positive");
  std::mt19937_64 rng(seed);
  return place_atoms(atoms, std::cbrt(static_cast<double>(atoms) / density), min_dist, elements, rng);
}

EquivarianceReport check_equivariance(const Model& model, const EquivarianceOptions& o) {
  EquivarianceReport rep;
  const std::vector<int> elems = model_elements(model);
  std::mt19937_64 rng(o.seed);
  std::uniform_int_distribution<int> size(o.min_atoms, o.max_atoms);
  for (int trial = 0; trial < o.trials; ++trial) {
    const int n = size(rng);
    const double box = 1.2 * std::cbrt(static_cast<double>(n)) + 1.0;
    AtomicSystem s = random_system(n, rng(), box, 0.9, elems);
    switch (model.config.attribute_mode) {
      case AttributeMode::total_charge: s.total_charge = static_cast<double>(static_cast<int>(rng() % 3) - 1); break;
      case AttributeMode::spin: s.spin = static_cast<int>(rng() % 2); break;
      case AttributeMode::per_atom_charge:
        s.per_atom_charges = std::vector<double>(static_cast<std::size_t>(n), 0.1);
        break;
      case AttributeMode::none: break;
    }
    const Mat3d r = random_orthogonal(rng(), o.allow_reflections);
    AtomicSystem t = s;
    t.positions = s.positions * r.transpose();

    const auto fs = features(model, s, o.forward), ft = features(model, t, o.forward);
    double fdev = 0.0;
    for (std::size_t k = 0; k < fs.size(); ++k) fdev = std::max(fdev, (ft[k] - conjugate(fs[k], r)).abs().maxCoeff());

    const Prediction ps = predict(model, {s}, 1, o.forward), pt = predict(model, {t}, 1, o.forward);
    const double e = ps.energies[0];
    const double edev = std::abs(pt.energies[0] - e) / std::max(std::abs(e), 1e-300);
    const Positions rotated = ps.forces[0] * r.transpose();
    const double fmax = rotated.cwiseAbs().maxCoeff();
    const double frel = (pt.forces[0] - rotated).cwiseAbs().maxCoeff() / std::max(fmax, 1e-300);

    const bool worse = fdev > rep.max_feature_dev || edev > rep.max_energy_rel_dev || frel > rep.max_force_rel_dev;
    rep.max_feature_dev = std::max(rep.max_feature_dev, fdev);
    rep.max_energy_rel_dev = std::max(rep.max_energy_rel_dev, edev);
    rep.max_force_rel_dev = std::max(rep.max_force_rel_dev, frel);
    if (worse) rep.worst_trial = trial;
    ++rep.trials;
  }
  rep.passed = rep.max_feature_dev <= o.feature_tol && rep.max_energy_rel_dev <= o.energy_tol &&
               rep.max_force_rel_dev <= o.force_tol;
  return rep;
}

ForceCheckReport check_forces(const Model& model, const ForceCheckOptions& o) {
  ForceCheckReport rep;
  const std::vector<int> elems = model_elements(model);
  std::mt19937_64 rng(o.seed);
  std::uniform_int_distribution<int> size(o.min_atoms, o.max_atoms);
  for (int k = 0; k < o.systems; ++k) {
    const int n = size(rng);
    const double box = 1.2 * std::cbrt(static_cast<double>(n)) + 1.0;
    AtomicSystem s = random_system(n, rng(), box, 0.9, elems);
    if (model.config.attribute_mode == AttributeMode::total_charge) s.total_charge = 1.0;
    if (model.config.attribute_mode == AttributeMode::spin) s.spin = 1;
    if (model.config.attribute_mode == AttributeMode::per_atom_charge)
      s.per_atom_charges = std::vector<double>(static_cast<std::size_t>(n), 0.2);

    const Positions f = predict(model, {s}).forces[0];
    // all displaced copies go through one batched evaluation
    std::vector<AtomicSystem> shifted;
    shifted.reserve(static_cast<std::size_t>(6 * n));
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d)
        for (double sign : {1.0, -1.0}) {
          AtomicSystem t = s;
          t.positions(i, d) += sign * o.step;
          shifted.push_back(std::move(t));
        }
    const Prediction p = predict(model, shifted, 6);
    Positions fd(n, 3);
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < 3; ++d) {
        const std::size_t at = static_cast<std::size_t>(6 * i + 2 * d);
        fd(i, d) = -(p.energies[at] - p.energies[at + 1]) / (2.0 * o.step);
      }
    const double scale = std::max(f.cwiseAbs().maxCoeff(), 1e-300);
    rep.max_rel_error = std::max(rep.max_rel_error, (f - fd).cwiseAbs().maxCoeff() / scale);
    rep.max_net_force = std::max(rep.max_net_force, f.colwise().sum().norm());
    ++rep.systems;
  }
  rep.passed = rep.max_rel_error <= o.tolerance && rep.max_net_force <= o.net_force_tol;
  return rep;
}

ScalingReport bench_scaling(const Model& model, const ScalingOptions& o) {
  using clock = std::chrono::steady_clock;
  ScalingReport rep;
  for (std::size_t k = 0; k < o.sizes.size(); ++k) {
    const AtomicSystem s = random_system_at_density(o.sizes[k], o.density, o.seed + k, 0.9, model_elements(model));
    const std::vector<AtomicSystem> one{s};
    predict(model, one);  // warm-up
    std::vector<double> t;
    for (int r = 0; r < std::max(o.repeats, 1); ++r) {
      const auto start = clock::now();
      const Prediction p = predict(model, one);
      t.push_back(std::chrono::duration<double>(clock::now() - start).count());
      if (!std::isfinite(p.energies[0])) throw ad::NumericError("bench_scaling: non-finite energy");
    }
    ScalingPoint pt;
    pt.atoms = o.sizes[k];
    double sum = 0.0, sq = 0.0;
    for (double x : t) sum += x;
    pt.mean_seconds = sum / static_cast<double>(t.size());
    for (double x : t) sq += (x - pt.mean_seconds) * (x - pt.mean_seconds);
    pt.stddev_seconds = t.size() > 1 ? std::sqrt(sq / static_cast<double>(t.size() - 1)) : 0.0;
    pt.median_seconds = median(t);
    rep.points.push_back(pt);
  }
  for (std::size_t k = 1; k < rep.points.size(); ++k)
    rep.ratios.push_back(rep.points[k].median_seconds / rep.points[k - 1].median_seconds);
  rep.median_ratio = median(rep.ratios);
  rep.passed = rep.ratios.empty() || rep.median_ratio <= o.max_ratio;
  return rep;
}

}  // namespace tnet
