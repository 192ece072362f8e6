#include "tnet/data.hpp"

#include <array>
#include <cmath>

namespace tnet {

namespace {

constexpr std::array<std::string_view, 119> kSymbols = {
    "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",
    "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho",
    "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
    "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md",
    "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

}  // namespace

int atomic_number(std::string_view symbol) {
  for (std::size_t z = 1; z < kSymbols.size(); ++z)
    if (kSymbols[z] == symbol) return static_cast<int>(z);
  throw DataError("unknown element symbol '" + std::string(symbol) + "'");
}

std::string_view element_symbol(int z) {
  if (z < 1 || z >= static_cast<int>(kSymbols.size())) throw DataError("atomic number out of range: " + std::to_string(z));
  return kSymbols[static_cast<std::size_t>(z)];
}

void validate(const AtomicSystem& s) {
  const auto n = static_cast<Eigen::Index>(s.numbers.size());
  if (n < 1) throw DataError("system has no atoms");
  if (s.positions.rows() != n)
    throw DataError("positions have " + std::to_string(s.positions.rows()) + " rows for " + std::to_string(n) + " atoms");
  for (int z : s.numbers) element_symbol(z);
  if (!s.positions.allFinite()) throw DataError("non-finite position");
  if (s.spin != 0 && s.spin != 1) throw DataError("spin must be 0 or 1, got " + std::to_string(s.spin));
  if (!std::isfinite(s.total_charge)) throw DataError("non-finite total charge");
  if (s.per_atom_charges && static_cast<Eigen::Index>(s.per_atom_charges->size()) != n)
    throw DataError("per-atom charges have length " + std::to_string(s.per_atom_charges->size()) + " for " +
                    std::to_string(n) + " atoms");
  if (s.forces && s.forces->rows() != n) throw DataError("force labels do not match atom count");
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if ((s.positions.row(i) - s.positions.row(j)).norm() <= kMinPairDistance)
        throw DataError("atoms " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
}

}  // namespace tnet
