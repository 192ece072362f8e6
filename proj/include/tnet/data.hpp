#pragma once

#include "tnet/tensor.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tnet {

using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Smallest admissible interatomic distance, in Angstrom.
inline constexpr double kMinPairDistance = 1e-6;

/// One configuration: numbers, positions (Angstrom), attributes and optional labels.
struct AtomicSystem {
  std::vector<int> numbers;
  Positions positions;
  double total_charge = 0.0;  // elementary charges
  int spin = 0;               // 0 singlet, 1 triplet
  std::optional<std::vector<double>> per_atom_charges;
  std::optional<double> energy;      // eV
  std::optional<Positions> forces;   // eV/Angstrom

  std::size_t size() const { return numbers.size(); }
};

/// Throws DataError on empty systems, non-finite or coincident positions,
/// bad spin values and per-atom arrays of the wrong length.
void validate(const AtomicSystem& system);

int atomic_number(std::string_view symbol);
std::string_view element_symbol(int z);

// ---------------------------------------------------------------------------
// Neighbour lists

/// Directed pairs (center, neighbor) with r <= cutoff, both directions present.
/// Edges are grouped by center; within a center they are ordered by distance,
/// then by neighbor index, so the order does not depend on atom numbering.
struct NeighborList {
  std::vector<Eigen::Index> centers;
  std::vector<Eigen::Index> neighbors;
  std::vector<double> distances;
  std::vector<Vec3d> unit_vectors;  // (r_neighbor - r_center) / r

  std::size_t size() const { return centers.size(); }
};

enum class NeighborMethod { automatic, brute_force, cell_list };

NeighborList build_neighbor_list(const Positions& positions, double cutoff,
                                 NeighborMethod method = NeighborMethod::automatic);

// ---------------------------------------------------------------------------
// Extended XYZ

/// Parses frames of the form
///   N
///   energy=<eV> total_charge=<Q> spin=<S> Properties=species:S:1:pos:R:3[:forces:R:3][:charges:R:1]
///   N atom lines
/// Errors name the zero-based frame index.
std::vector<AtomicSystem> parse_extxyz(std::string_view text);
std::vector<AtomicSystem> read_extxyz(const std::string& path);

/// Floats are written with 17 significant digits, so parse(write(x)) == x.
void write_extxyz(std::ostream& out, const std::vector<AtomicSystem>& systems);
std::string write_extxyz(const std::vector<AtomicSystem>& systems);
void save_extxyz(const std::string& path, const std::vector<AtomicSystem>& systems);

// ---------------------------------------------------------------------------
// Synthetic label oracle: Lennard-Jones plus soft Coulomb with q_i = chi(Z_i) + Q/N,
// plus an optional spin-dependent pair term S * J * exp(-r / rho).

struct OracleParams {
  double epsilon = 0.1;        // eV
  double coulomb_k = 14.4;     // eV Angstrom
  double softening = 1.0;      // Angstrom
  double spin_coupling = 0.0;  // eV
  double spin_range = 2.0;     // Angstrom
  std::map<int, double> charge_offsets = default_charge_offsets();
  std::map<int, double> radii = default_radii();

  static std::map<int, double> default_charge_offsets();
  static std::map<int, double> default_radii();
  double sigma(int zi, int zj) const;
  double charge_offset(int z) const;
};

struct OracleResult {
  double energy = 0.0;
  Positions forces;
};

/// Charges the oracle assigns: chi(Z_i) + Q / N.
std::vector<double> oracle_charges(const AtomicSystem& system, const OracleParams& params);
OracleResult oracle_energy_forces(const AtomicSystem& system, const OracleParams& params);

struct MinimizeOptions {
  double force_tolerance = 1e-3;  // eV/Angstrom, max |F| component norm
  int max_iterations = 10000;
};

/// Gradient descent with backtracking line search; throws DataError on non-convergence.
Positions minimize_geometry(AtomicSystem system, const OracleParams& params, const MinimizeOptions& options = {});

// ---------------------------------------------------------------------------
// Degenerate-pair generation

/// Molecules available to the toy generator, in order.
struct ToyMolecule {
  std::string name;
  std::vector<int> numbers;
};
const std::vector<ToyMolecule>& toy_molecules();

enum class StateAttribute { total_charge, spin };

/// Conformers of one composition evaluated in two electronic states at
/// identical geometries. Output is interleaved: frame k in state A, then state B.
struct PairedConformerConfig {
  std::vector<int> numbers;
  StateAttribute attribute = StateAttribute::total_charge;
  double state_a = 0.0;
  double state_b = 1.0;
  int frames = 500;
  double displacement = 0.2;  // Angstrom, Gaussian standard deviation per coordinate
  double max_force = 100.0;   // eV/Angstrom, frames at or above are redrawn
  std::uint64_t seed = 1;
  OracleParams oracle;
  MinimizeOptions minimize;
  /// Optional fixed reference geometry; minimised from a seeded guess otherwise.
  std::optional<Positions> reference;
};

struct PairedConformers {
  Positions reference;                   // minimised geometry
  std::vector<AtomicSystem> state_a;
  std::vector<AtomicSystem> state_b;
  long long rejected = 0;
};

PairedConformers generate_paired_conformers(const PairedConformerConfig& config);

struct ToyConfig {
  int pairs = 3;
  int frames = 500;
  double displacement = 0.2;
  double max_force = 100.0;
  double charge_a = 0.0;
  double charge_b = 1.0;
  std::uint64_t seed = 1;
  OracleParams oracle;
};

/// Dataset A' holds the charge_a member of every pair, B' the charge_b member,
/// with identical geometries frame by frame.
struct ToyDatasets {
  std::vector<AtomicSystem> a;
  std::vector<AtomicSystem> b;
  std::vector<std::string> molecule_names;
  std::vector<Positions> references;
  long long rejected = 0;

  std::vector<AtomicSystem> merged() const;
};

ToyDatasets generate_toy_datasets(const ToyConfig& config);

// ---------------------------------------------------------------------------
// Reference energies and splits

using ReferenceEnergies = std::map<int, double>;

/// Least-squares E ~ sum_Z count_Z e_Z. Throws DataError naming confounded
/// elements when the composition matrix is rank deficient, unless min_norm
/// asks for the minimum-norm solution instead.
ReferenceEnergies fit_reference_energies(const std::vector<AtomicSystem>& systems, bool min_norm = false);
double reference_energy(const AtomicSystem& system, const ReferenceEnergies& refs);

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

/// Sizes <= 1 are fractions of n (floored), larger integral values are counts;
/// test gets the remainder.
DatasetSplit make_split(std::size_t n, double train_size, double val_size, std::uint64_t seed);

std::vector<AtomicSystem> select(const std::vector<AtomicSystem>& systems, const std::vector<std::size_t>& indices);

// ---------------------------------------------------------------------------
// Flat key-value files (manifests, configs). Lines are "key value", "key=value"
// or "key: value"; '#' starts a comment.

using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::string& path);
void write_key_values(const std::string& path, const KeyValues& values);

}  // namespace tnet
