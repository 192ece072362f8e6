#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tnet/data.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace tnet;

namespace {

AtomicSystem random_system(int n, double box, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, box);
  std::uniform_int_distribution<int> pick(0, 3);
  const int elems[] = {1, 6, 7, 8};
  AtomicSystem s;
  s.positions.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    s.numbers.push_back(elems[pick(rng)]);
    for (int k = 0; k < 3; ++k) s.positions(i, k) = u(rng);
  }
  return s;
}

std::set<std::pair<Eigen::Index, Eigen::Index>> as_set(const NeighborList& nl) {
  std::set<std::pair<Eigen::Index, Eigen::Index>> out;
  for (std::size_t e = 0; e < nl.size(); ++e) out.insert({nl.centers[e], nl.neighbors[e]});
  return out;
}

}  // namespace

TEST_CASE("validation") {
  AtomicSystem s;
  CHECK_THROWS_AS(validate(s), DataError);
  s.numbers = {1, 1};
  s.positions = Positions::Zero(2, 3);
  CHECK_THROWS_AS(validate(s), DataError);
  s.positions(1, 0) = 1.0;
  CHECK_NOTHROW(validate(s));
  s.per_atom_charges = std::vector<double>{0.1};
  CHECK_THROWS_AS(validate(s), DataError);
  s.per_atom_charges.reset();
  s.spin = 2;
  CHECK_THROWS_AS(validate(s), DataError);
}

TEST_CASE("neighbor list basics") {
  Positions p(2, 3);
  p << 0, 0, 0, 6, 0, 0;
  CHECK(build_neighbor_list(p, 5.0).size() == 0);
  p(1, 0) = 3.0;
  const auto nl = build_neighbor_list(p, 5.0);
  REQUIRE(nl.size() == 2);
  CHECK(nl.centers[0] == 0);
  CHECK(nl.neighbors[0] == 1);
  CHECK(nl.centers[1] == 1);
  CHECK(nl.neighbors[1] == 0);
  CHECK(nl.distances[0] == 3.0);
  CHECK(nl.unit_vectors[0].isApprox(Vec3d(1, 0, 0)));
}

TEST_CASE("cell list agrees with brute force") {
  for (int n : {2, 17, 64, 200, 300}) {
    const AtomicSystem s = random_system(n, std::cbrt(n) * 2.0, static_cast<std::uint64_t>(n));
    const auto bf = build_neighbor_list(s.positions, 5.0, NeighborMethod::brute_force);
    const auto cl = build_neighbor_list(s.positions, 5.0, NeighborMethod::cell_list);
    CHECK(as_set(bf) == as_set(cl));
    CHECK(bf.centers == cl.centers);
    CHECK(bf.neighbors == cl.neighbors);
    CHECK(bf.distances == cl.distances);
    // symmetric and within cutoff
    const auto pairs = as_set(bf);
    for (auto [i, j] : pairs) CHECK(pairs.count({j, i}) == 1);
    for (double d : bf.distances) CHECK(d <= 5.0 + 1e-12);
    std::size_t expected = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && (s.positions.row(i) - s.positions.row(j)).norm() <= 5.0) ++expected;
    CHECK(bf.size() == expected);
  }
}

TEST_CASE("extxyz parsing") {
  const auto one = parse_extxyz("1\nenergy=0\nH 0 0 0\n");
  REQUIRE(one.size() == 1);
  CHECK(one[0].size() == 1);
  CHECK(*one[0].energy == 0.0);

  const std::string bad = "1\nenergy=0\nH 0 0 0\n3\nenergy=1\nH 0 0 0\nH 1 0 0\n";
  try {
    parse_extxyz(bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("frame 1") != std::string::npos);
  }
  const std::string bad_mid = "3\nenergy=1\nH 0 0 0\nH 1 0 0\n2\nenergy=0\nH 0 0 0\nH 2 0 0\n";
  try {
    parse_extxyz(bad_mid);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("frame 0") != std::string::npos);
  }

  const auto withcols = parse_extxyz(
      "2\nenergy=-1.5 total_charge=1 spin=1 Properties=species:S:1:pos:R:3:forces:R:3:charges:R:1\n"
      "O 0 0 0 0.1 0.2 0.3 -0.5\nH 1 0 0 -0.1 -0.2 -0.3 0.5\n");
  REQUIRE(withcols.size() == 1);
  CHECK(withcols[0].total_charge == 1.0);
  CHECK(withcols[0].spin == 1);
  CHECK((*withcols[0].forces)(1, 2) == -0.3);
  CHECK((*withcols[0].per_atom_charges)[0] == -0.5);
}

TEST_CASE("extxyz write-parse-write fixpoint") {
  std::vector<AtomicSystem> frames;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int f = 0; f < 100; ++f) {
    AtomicSystem s = random_system(1 + f % 7, 4.0, 1000 + static_cast<std::uint64_t>(f));
    s.energy = g(rng) * 1e3 / 7.0;
    s.total_charge = (f % 3) - 1;
    s.spin = f % 2;
    if (f % 2 == 0) {
      s.forces = Positions(s.size(), 3);
      for (Eigen::Index i = 0; i < s.forces->size(); ++i) s.forces->data()[i] = g(rng) / 3.0;
    }
    if (f % 5 == 0) {
      s.per_atom_charges = std::vector<double>(s.size());
      for (auto& q : *s.per_atom_charges) q = g(rng) * 0.1;
    }
    frames.push_back(s);
  }
  const std::string first = write_extxyz(frames);
  const auto parsed = parse_extxyz(first);
  REQUIRE(parsed.size() == frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f) {
    CHECK(parsed[f].positions == frames[f].positions);
    CHECK(*parsed[f].energy == *frames[f].energy);
  }
  CHECK(write_extxyz(parsed) == first);
}

TEST_CASE("oracle closed forms") {
  OracleParams p;
  AtomicSystem s;
  s.numbers = {18, 18};  // no charge offsets
  p.radii[18] = 1.88;
  const double rmin = std::pow(2.0, 1.0 / 6.0) * p.sigma(18, 18);
  s.positions = Positions::Zero(2, 3);
  s.positions(1, 0) = rmin;
  auto r = oracle_energy_forces(s, p);
  CHECK(r.forces.cwiseAbs().maxCoeff() <= 1e-14);
  CHECK(r.energy == doctest::Approx(-p.epsilon).epsilon(1e-14));

  OracleParams q;
  q.epsilon = 0.0;
  q.coulomb_k = 1.0;
  q.softening = 1.0;
  q.charge_offsets = {{18, 0.1}};
  q.radii[18] = 1.88;
  s.positions(1, 0) = 1.0;
  r = oracle_energy_forces(s, q);
  CHECK(r.energy == doctest::Approx(0.01 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("oracle forces match central differences and symmetries") {
  OracleParams p;
  p.spin_coupling = 0.7;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    AtomicSystem s = random_system(6, 5.0, seed + 50);
    s.total_charge = 1.0;
    s.spin = 1;
    const auto r = oracle_energy_forces(s, p);
    const double h = 1e-6;
    Positions numeric(s.size(), 3);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(s.size()); ++i)
      for (int k = 0; k < 3; ++k) {
        AtomicSystem a = s, b = s;
        a.positions(i, k) += h;
        b.positions(i, k) -= h;
        numeric(i, k) = -(oracle_energy_forces(a, p).energy - oracle_energy_forces(b, p).energy) / (2 * h);
      }
    CHECK((r.forces - numeric).cwiseAbs().maxCoeff() <= 1e-7 * numeric.cwiseAbs().maxCoeff());
    CHECK(r.forces.colwise().sum().cwiseAbs().maxCoeff() <= 1e-10);

    const Mat3d rot = random_orthogonal(seed, true);
    AtomicSystem t = s;
    t.positions = (s.positions * rot.transpose()).rowwise() + Eigen::RowVector3d(1.0, -2.0, 0.5);
    const auto rt = oracle_energy_forces(t, p);
    CHECK(rt.energy == doctest::Approx(r.energy).epsilon(1e-12));
    CHECK((rt.forces - r.forces * rot.transpose()).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("minimizer converges") {
  AtomicSystem s;
  s.numbers = {8, 1, 1};
  s.positions.resize(3, 3);
  s.positions << 0, 0, 0, 2.8, 0, 0, -1, 2.5, 0;
  const Positions m = minimize_geometry(s, OracleParams{});
  s.positions = m;
  CHECK(oracle_energy_forces(s, OracleParams{}).forces.rowwise().norm().maxCoeff() < 1e-3);
}

TEST_CASE("paired conformers") {
  PairedConformerConfig cfg;
  cfg.numbers = {6, 1, 1, 1, 1};
  cfg.frames = 20;
  cfg.seed = 3;
  const auto a = generate_paired_conformers(cfg);
  const auto b = generate_paired_conformers(cfg);
  CHECK(write_extxyz(a.state_a) == write_extxyz(b.state_a));
  REQUIRE(a.state_a.size() == 20);
  for (std::size_t f = 0; f < 20; ++f) {
    CHECK(a.state_a[f].positions == a.state_b[f].positions);
    CHECK(std::abs(*a.state_a[f].energy - *a.state_b[f].energy) > 0.1);
    CHECK(a.state_a[f].forces->rowwise().norm().maxCoeff() < 100.0);
  }
}

TEST_CASE("reference energies") {
  std::vector<AtomicSystem> sys;
  for (int n = 1; n <= 4; ++n) {
    AtomicSystem s = random_system(n, 5.0, static_cast<std::uint64_t>(n));
    std::fill(s.numbers.begin(), s.numbers.end(), 1);
    s.energy = 2.0 * n;
    sys.push_back(s);
  }
  const auto refs = fit_reference_energies(sys);
  CHECK(refs.at(1) == doctest::Approx(2.0).epsilon(1e-14));

  // Mixed compositions vs normal equations.
  std::vector<AtomicSystem> mixed;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int k = 0; k < 30; ++k) {
    AtomicSystem s = random_system(3 + k % 5, 5.0, 200 + static_cast<std::uint64_t>(k));
    s.energy = g(rng);
    mixed.push_back(s);
  }
  const auto fit = fit_reference_energies(mixed);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(30, 4);
  Eigen::VectorXd y(30), e(4);
  const int els[] = {1, 6, 7, 8};
  for (int r = 0; r < 30; ++r) {
    for (int z : mixed[static_cast<std::size_t>(r)].numbers)
      a(r, std::find(std::begin(els), std::end(els), z) - std::begin(els)) += 1;
    y(r) = *mixed[static_cast<std::size_t>(r)].energy;
  }
  for (int c = 0; c < 4; ++c) e(c) = fit.at(els[c]);
  const Eigen::VectorXd normal = (a.transpose() * a).ldlt().solve(a.transpose() * y);
  CHECK((e - normal).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((a * e - y).norm() <= (a * normal - y).norm() + 1e-12);

  // Held-out application.
  AtomicSystem val = mixed[0];
  CHECK_NOTHROW(reference_energy(val, fit));
  val.numbers[0] = 9;
  CHECK_THROWS_AS(reference_energy(val, fit), DataError);

  // CH4 and NH3 together never separate H from the heavy atom counts: fine; a
  // single composition with two elements is confounded.
  std::vector<AtomicSystem> conf;
  for (int k = 0; k < 3; ++k) {
    AtomicSystem s = random_system(2, 5.0, 300 + static_cast<std::uint64_t>(k));
    s.numbers = {6, 1};
    s.energy = k;
    conf.push_back(s);
  }
  try {
    fit_reference_energies(conf);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("H") != std::string::npos);
    CHECK(msg.find("C") != std::string::npos);
  }
}

TEST_CASE("splits") {
  const auto s = make_split(10, 0.5, 0.1, 42);
  CHECK(s.train.size() == 5);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 4);
  const auto t = make_split(10, 0.5, 0.1, 42);
  CHECK(s.train == t.train);
  CHECK(s.val == t.val);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 10);
  const auto c = make_split(10, 3, 2, 1);
  CHECK(c.train.size() == 3);
  CHECK(c.val.size() == 2);
  CHECK_THROWS_AS(make_split(10, 0.8, 0.3, 1), DataError);
  CHECK_THROWS_AS(make_split(10, 8, 3, 1), DataError);
}

TEST_CASE("key-value files") {
  const auto kv = parse_key_values("# comment\nlr 1e-3\nbatch_size: 16\nseed=1 # trailing\n\n");
  CHECK(kv.at("lr") == "1e-3");
  CHECK(kv.at("batch_size") == "16");
  CHECK(kv.at("seed") == "1");
  CHECK_THROWS_AS(parse_key_values("a 1\na 2\n"), DataError);
}
