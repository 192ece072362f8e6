#include "tnet/data.hpp"
#include "tnet/parallel.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace tnet {

const std::vector<ToyMolecule>& toy_molecules() {
  static const std::vector<ToyMolecule> mols = {
      {"CH4", {6, 1, 1, 1, 1}},
      {"NH3", {7, 1, 1, 1}},
      {"H2O", {8, 1, 1}},
      {"HF", {9, 1}},
      {"NH4F", {7, 1, 1, 1, 1, 9}},
  };
  return mols;
}

namespace {

// Atom 0 at the origin, the rest on a Fibonacci sphere at their pair-minimum distance.
Positions initial_guess(const std::vector<int>& numbers, const OracleParams& oracle) {
  const auto n = static_cast<Eigen::Index>(numbers.size());
  Positions p = Positions::Zero(n, 3);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  const auto m = static_cast<double>(n - 1);
  for (Eigen::Index k = 1; k < n; ++k) {
    const double idx = static_cast<double>(k - 1);
    const double y = m > 1 ? 1.0 - 2.0 * (idx + 0.5) / m : 0.0;
    const double rad = std::sqrt(1.0 - y * y);
    const double phi = golden * idx;
    const double r = std::pow(2.0, 1.0 / 6.0) * oracle.sigma(numbers[0], numbers[static_cast<std::size_t>(k)]);
    p.row(k) << r * rad * std::cos(phi), r * y, r * rad * std::sin(phi);
  }
  return p;
}

AtomicSystem labelled(const std::vector<int>& numbers, const Positions& pos, StateAttribute attr, double value,
                      const OracleParams& oracle) {
  AtomicSystem s;
  s.numbers = numbers;
  s.positions = pos;
  if (attr == StateAttribute::total_charge) s.total_charge = value;
  else s.spin = static_cast<int>(value);
  const OracleResult r = oracle_energy_forces(s, oracle);
  s.energy = r.energy;
  s.forces = r.forces;
  return s;
}

double max_force(const AtomicSystem& s) { return s.forces->rowwise().norm().maxCoeff(); }

}  // namespace

PairedConformers generate_paired_conformers(const PairedConformerConfig& cfg) {
  if (cfg.numbers.empty()) throw DataError("paired conformers need at least one atom");
  if (cfg.frames < 0) throw DataError("frame count must be non-negative");
  if (cfg.attribute == StateAttribute::spin)
    for (double s : {cfg.state_a, cfg.state_b})
      if (s != 0.0 && s != 1.0) throw DataError("spin states must be 0 or 1");

  PairedConformers out;
  if (cfg.reference) {
    out.reference = *cfg.reference;
  } else {
    AtomicSystem guess;
    guess.numbers = cfg.numbers;
    guess.positions = initial_guess(cfg.numbers, cfg.oracle);
    if (cfg.attribute == StateAttribute::total_charge) guess.total_charge = cfg.state_a;
    else guess.spin = static_cast<int>(cfg.state_a);
    out.reference = minimize_geometry(guess, cfg.oracle, cfg.minimize);
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.displacement);
  const auto n = static_cast<Eigen::Index>(cfg.numbers.size());
  out.state_a.reserve(static_cast<std::size_t>(cfg.frames));
  out.state_b.reserve(static_cast<std::size_t>(cfg.frames));
  while (static_cast<int>(out.state_a.size()) < cfg.frames) {
    Positions pos = out.reference;
    for (Eigen::Index i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) pos(i, k) += noise(rng);
    bool ok = true;
    for (Eigen::Index i = 0; i < n && ok; ++i)
      for (Eigen::Index j = i + 1; j < n && ok; ++j)
        ok = (pos.row(i) - pos.row(j)).norm() > kMinPairDistance;
    if (!ok) {
      ++out.rejected;
      continue;
    }
    AtomicSystem a = labelled(cfg.numbers, pos, cfg.attribute, cfg.state_a, cfg.oracle);
    AtomicSystem b = labelled(cfg.numbers, pos, cfg.attribute, cfg.state_b, cfg.oracle);
    if (!(max_force(a) < cfg.max_force) || !(max_force(b) < cfg.max_force)) {
      ++out.rejected;
      continue;
    }
    out.state_a.push_back(std::move(a));
    out.state_b.push_back(std::move(b));
  }
  return out;
}

ToyDatasets generate_toy_datasets(const ToyConfig& cfg) {
  const auto& mols = toy_molecules();
  if (cfg.pairs < 1 || cfg.pairs > static_cast<int>(mols.size()))
    throw DataError("pairs must be between 1 and " + std::to_string(mols.size()));
  std::vector<PairedConformers> pairs(static_cast<std::size_t>(cfg.pairs));
  parallel_for(pairs.size(), max_threads(), [&](std::size_t k) {
    PairedConformerConfig pc;
    pc.numbers = mols[k].numbers;
    pc.attribute = StateAttribute::total_charge;
    pc.state_a = cfg.charge_a;
    pc.state_b = cfg.charge_b;
    pc.frames = cfg.frames;
    pc.displacement = cfg.displacement;
    pc.max_force = cfg.max_force;
    pc.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(k);
    pc.oracle = cfg.oracle;
    pairs[k] = generate_paired_conformers(pc);
  });
  ToyDatasets out;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    out.molecule_names.push_back(mols[k].name);
    out.references.push_back(pairs[k].reference);
    out.rejected += pairs[k].rejected;
    for (auto& s : pairs[k].state_a) out.a.push_back(std::move(s));
    for (auto& s : pairs[k].state_b) out.b.push_back(std::move(s));
  }
  return out;
}

std::vector<AtomicSystem> ToyDatasets::merged() const {
  std::vector<AtomicSystem> all = a;
  all.insert(all.end(), b.begin(), b.end());
  return all;
}

}  // namespace tnet
