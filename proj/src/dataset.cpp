#include "tnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace tnet {

ReferenceEnergies fit_reference_energies(const std::vector<AtomicSystem>& systems, bool min_norm) {
  std::set<int> elements;
  for (const auto& s : systems) {
    if (!s.energy) throw DataError("reference fit needs energy labels on every system");
    elements.insert(s.numbers.begin(), s.numbers.end());
  }
  if (elements.empty()) throw DataError("reference fit needs at least one system");
  const std::vector<int> cols(elements.begin(), elements.end());
  const auto m = static_cast<Eigen::Index>(systems.size());
  const auto k = static_cast<Eigen::Index>(cols.size());

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, k);
  Eigen::VectorXd y(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& s = systems[static_cast<std::size_t>(r)];
    for (int z : s.numbers) {
      const auto c = std::lower_bound(cols.begin(), cols.end(), z) - cols.begin();
      a(r, c) += 1.0;
    }
    y(r) = *s.energy;
  }

  if (min_norm) {
    const Eigen::VectorXd e = a.completeOrthogonalDecomposition().solve(y);
    ReferenceEnergies out;
    for (Eigen::Index c = 0; c < k; ++c) out[cols[static_cast<std::size_t>(c)]] = e(c);
    return out;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (lu.rank() < k) {
    const Eigen::MatrixXd null = lu.kernel();
    std::string names;
    for (Eigen::Index c = 0; c < k; ++c) {
      if (null.row(c).cwiseAbs().maxCoeff() <= 1e-9) continue;
      if (!names.empty()) names += ", ";
      names += element_symbol(cols[static_cast<std::size_t>(c)]);
    }
    throw DataError("reference energies are not identifiable; confounded elements: " + names);
  }
  const Eigen::VectorXd e = a.colPivHouseholderQr().solve(y);
  ReferenceEnergies out;
  for (Eigen::Index c = 0; c < k; ++c) out[cols[static_cast<std::size_t>(c)]] = e(c);
  return out;
}

double reference_energy(const AtomicSystem& system, const ReferenceEnergies& refs) {
  double e = 0.0;
  for (int z : system.numbers) {
    const auto it = refs.find(z);
    if (it == refs.end()) throw DataError("no reference energy for element " + std::string(element_symbol(z)));
    e += it->second;
  }
  return e;
}

namespace {

std::size_t resolve_size(std::size_t n, double size, const char* what) {
  if (!(size >= 0.0) || !std::isfinite(size)) throw DataError(std::string(what) + " must be non-negative");
  if (size <= 1.0) return static_cast<std::size_t>(std::floor(static_cast<double>(n) * size + 1e-9));
  if (size != std::floor(size)) throw DataError(std::string(what) + " above 1 must be an integer count");
  return static_cast<std::size_t>(size);
}

}  // namespace

DatasetSplit make_split(std::size_t n, double train_size, double val_size, std::uint64_t seed) {
  const std::size_t n_train = resolve_size(n, train_size, "train_size");
  const std::size_t n_val = resolve_size(n, val_size, "val_size");
  if (n_train + n_val > n)
    throw DataError("split over-allocates: " + std::to_string(n_train) + " + " + std::to_string(n_val) + " > " +
                    std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit out;
  out.seed = seed;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return out;
}

std::vector<AtomicSystem> select(const std::vector<AtomicSystem>& systems, const std::vector<std::size_t>& indices) {
  std::vector<AtomicSystem> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(systems.at(i));
  return out;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    std::size_t sep = body.find_first_of("=:");
    const std::size_t ws = body.find_first_of(" \t");
    if (sep == std::string::npos || (ws != std::string::npos && ws < sep)) sep = ws;
    if (sep == std::string::npos) throw DataError("line " + std::to_string(line_no) + ": expected 'key value'");
    const std::string key = trim(std::string_view(body).substr(0, sep));
    std::string value = trim(std::string_view(body).substr(sep + 1));
    if (!value.empty() && (value[0] == '=' || value[0] == ':')) value = trim(std::string_view(value).substr(1));
    if (key.empty()) throw DataError("line " + std::to_string(line_no) + ": empty key");
    if (!out.emplace(key, value).second)
      throw DataError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  return out;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void write_key_values(const std::string& path, const KeyValues& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& [k, v] : values) out << k << ' ' << v << '\n';
}

}  // namespace tnet
