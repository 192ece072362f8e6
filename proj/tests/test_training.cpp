#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "model_fixtures.hpp"
#include "tnet/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace tnet;
using ad::Array;
namespace fs = std::filesystem;

namespace {

std::vector<AtomicSystem> paired_frames(int frames, std::uint64_t seed, int molecule = 0) {
  PairedConformerConfig c;
  c.numbers = toy_molecules().at(static_cast<std::size_t>(molecule)).numbers;
  c.frames = frames;
  c.seed = seed;
  c.state_a = 0.0;
  c.state_b = 1.0;
  PairedConformers p = generate_paired_conformers(c);
  std::vector<AtomicSystem> out;
  for (int k = 0; k < frames; ++k) {
    out.push_back(p.state_a[static_cast<std::size_t>(k)]);
    out.push_back(p.state_b[static_cast<std::size_t>(k)]);
  }
  return out;
}

TrainConfig quick_config() {
  TrainConfig t;
  t.batch_size = 4;
  t.lr = 5e-3;
  t.lr_warmup_steps = 3;
  t.max_epochs = 3;
  t.seed = 11;
  t.neg_dy_weight = 1.0;
  t.reference_energies = ReferenceMode::mean;
  return t;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tnet_test_training_" + name);
  fs::remove_all(p);
  return p;
}

bool same_params(const Model& a, const Model& b) {
  std::vector<const Array*> pa, pb;
  a.params.for_each([&](const std::string&, const Array& x) { pa.push_back(&x); });
  b.params.for_each([&](const std::string&, const Array& x) { pb.push_back(&x); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->rows() != pb[i]->rows() || pa[i]->cols() != pb[i]->cols() || !(*pa[i] == *pb[i]).all()) return false;
  return true;
}

double batch_loss(const Model& m, const std::vector<const AtomicSystem*>& batch, const TrainConfig& t) {
  std::vector<AtomicSystem> sys;
  for (const auto* s : batch) sys.push_back(*s);
  const Prediction p = predict(m, sys);
  return compute_loss(p.energies, sys, p.forces, t).total;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults and roundtrip") {
    ExperimentConfig c = parse_experiment_config({});
    CHECK(c.train.lr_patience == 15);
    CHECK(c.train.lr_factor == 0.5);
    c.train.lr = 3e-4;
    c.model.num_channels = 16;
    c.model.attribute_mode = AttributeMode::total_charge;
    const ExperimentConfig d = parse_experiment_config(to_key_values(c));
    CHECK(to_key_values(d) == to_key_values(c));
    CHECK(d.train.lr == 3e-4);
  }
  SUBCASE("unknown key lists valid keys") {
    try {
      parse_experiment_config({{"learning_rate", "1e-3"}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("learning_rate") != std::string::npos);
      CHECK(msg.find("neg_dy_weight") != std::string::npos);
      CHECK(msg.find("lambda_tilde") != std::string::npos);
    }
  }
  SUBCASE("bad values") {
    CHECK_THROWS_AS(parse_experiment_config({{"activation", "tanh"}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"equivariance_invariance_group", "SO(3)"}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"batch_size", "0"}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"lr", "abc"}}), ConfigError);
    CHECK_THROWS_AS(parse_experiment_config({{"reference_energies", "median"}}), ConfigError);
  }
  SUBCASE("overrides") {
    KeyValues kv;
    apply_overrides(kv, {"lr=0.01", "attribute_mode=spin"});
    const ExperimentConfig c = parse_experiment_config(kv);
    CHECK(c.train.lr == 0.01);
    CHECK(c.model.attribute_mode == AttributeMode::spin);
    CHECK_THROWS_AS(apply_overrides(kv, {"nope=1"}), ConfigError);
    CHECK_THROWS_AS(apply_overrides(kv, {"lr"}), ConfigError);
  }
}

TEST_CASE("loss terms") {
  AtomicSystem s;
  s.numbers = {1, 1};
  s.positions = Positions::Zero(2, 3);
  s.positions(1, 0) = 1.0;
  s.energy = 2.0;
  s.forces = Positions::Zero(2, 3);
  Positions f = Positions::Constant(2, 3, 1.0);
  TrainConfig t;
  t.y_weight = 2.0;
  t.neg_dy_weight = 3.0;
  LossTerms l = compute_loss({3.0}, {s}, {f}, t);
  CHECK(l.energy_mse == doctest::Approx(1.0));
  CHECK(l.force_mse == doctest::Approx(1.0));
  CHECK(l.total == doctest::Approx(5.0));

  t.derivative = false;
  l = compute_loss({3.0}, {s}, {}, t);
  CHECK(l.total == doctest::Approx(2.0));
  CHECK(l.force_mse == 0.0);

  t.derivative = true;
  s.forces.reset();
  CHECK_THROWS_AS(compute_loss({3.0}, {s}, {f}, t), DataError);
}

TEST_CASE("adam first step") {
  Array p = Array::Constant(2, 2, 1.0);
  AdamState s;
  adam_step({&p}, {Array::Ones(2, 2)}, s, 1e-3);
  CHECK(std::abs(p(0, 0) - (1.0 - 1e-3)) < 1e-10);
  CHECK(s.t == 1);

  Array q = Array::Zero(1, 1);
  AdamState s2;
  Array bad(1, 1);
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(adam_step({&q}, {bad}, s2, 1e-3), ad::NumericError);
}

TEST_CASE("gradient clipping") {
  std::vector<Array> g = {Array::Constant(1, 3, 3.0), Array::Constant(1, 1, 4.0)};
  // norm sqrt(27 + 16) = sqrt(43)
  const double n = clip_gradients(g, 1.0);
  CHECK(n == doctest::Approx(std::sqrt(43.0)));
  double after = 0.0;
  for (const auto& a : g) after += a.square().sum();
  CHECK(std::sqrt(after) == doctest::Approx(1.0));

  std::vector<Array> small = {Array::Constant(1, 2, 0.1)};
  const Array before = small[0];
  clip_gradients(small, 1.0);
  CHECK((small[0] == before).all());
}

TEST_CASE("learning rate schedule") {
  TrainConfig t;
  t.lr = 1e-3;
  t.lr_warmup_steps = 100;
  TrainState s;
  s.base_lr = t.lr;
  s.step = 49;
  CHECK(lr_for_step(s, t) == doctest::Approx(5e-4));
  s.step = 100;
  CHECK(lr_for_step(s, t) == 1e-3);

  SUBCASE("plateau halves after patience") {
    t.lr_patience = 15;
    t.early_stopping_patience = 1000;
    CHECK(lr_schedule(s, 1.0, t));
    for (int k = 0; k < 14; ++k) CHECK_FALSE(lr_schedule(s, 1.0, t));
    CHECK(s.base_lr == 1e-3);
    lr_schedule(s, 2.0, t);
    CHECK(s.base_lr == doctest::Approx(5e-4));
    t.lr_min = 4e-4;
    for (int k = 0; k < 15; ++k) lr_schedule(s, 2.0, t);
    CHECK(s.base_lr == doctest::Approx(4e-4));
  }
  SUBCASE("early stopping") {
    t.early_stopping_patience = 5;
    lr_schedule(s, 1.0, t);
    for (int k = 0; k < 4; ++k) lr_schedule(s, 1.5, t);
    CHECK_FALSE(s.stopped);
    lr_schedule(s, 1.5, t);
    CHECK(s.stopped);
  }
}

TEST_CASE("train state serialisation") {
  TrainState s;
  s.epoch = 3;
  s.step = 17;
  s.base_lr = 2.5e-4;
  s.best_val = 0.125;
  s.adam.t = 17;
  s.adam.m = {Array::Constant(2, 3, 0.5)};
  s.adam.v = {Array::Constant(2, 3, 0.25)};
  s.rng = "12345 678";
  const TrainState r = TrainState::deserialize(s.serialize());
  CHECK(r.serialize() == s.serialize());
  CHECK(r.epoch == 3);
  CHECK((r.adam.v[0] == 0.25).all());
  CHECK_THROWS_AS(TrainState::deserialize("abc"), DataError);
}

TEST_CASE("batch gradient matches finite differences of the loss") {
  const auto data = paired_frames(3, 5);
  std::vector<const AtomicSystem*> batch;
  for (const auto& s : data) batch.push_back(&s);
  for (bool derivative : {true, false}) {
    CAPTURE(derivative);
    ModelConfig mc = testing::small_config(AttributeMode::total_charge);
    mc.lambdas_learnable = true;
    Model m = make_model(mc, 3);
    m.reference = reference_energies_for(data, ReferenceMode::mean);
    TrainConfig t;
    t.derivative = derivative;
    t.neg_dy_weight = 2.0;
    const BatchGradient g = batch_gradient(m, batch, t);
    CHECK(g.loss.total == doctest::Approx(batch_loss(m, batch, t)).epsilon(1e-12));

    std::vector<Array*> slots;
    m.params.for_each([&](const std::string&, Array& a) { slots.push_back(&a); });
    std::vector<std::string> names;
    m.params.for_each([&](const std::string& n, const Array&) { names.push_back(n); });
    const double h = 1e-5;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (names[i] == "embedding") continue;  // only a handful of rows are used
      Array& a = *slots[i];
      for (Eigen::Index k = 0; k < std::min<Eigen::Index>(a.size(), 3); ++k) {
        const double keep = a.data()[k];
        a.data()[k] = keep + h;
        const double lp = batch_loss(m, batch, t);
        a.data()[k] = keep - h;
        const double lm = batch_loss(m, batch, t);
        a.data()[k] = keep;
        const double fd = (lp - lm) / (2 * h);
        const double an = g.grads[i].data()[k];
        CAPTURE(names[i]);
        CAPTURE(k);
        CHECK(std::abs(fd - an) <= 1e-5 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("training is deterministic and resumable") {
  const auto data = paired_frames(8, 21);
  const std::vector<AtomicSystem> tr(data.begin(), data.begin() + 12), va(data.begin() + 12, data.end());
  const ModelConfig mc = testing::small_config(AttributeMode::total_charge);
  TrainConfig t = quick_config();
  t.max_epochs = 4;

  const fs::path d1 = scratch("full"), d2 = scratch("split");
  const TrainResult full = train(mc, t, tr, va, {d1.string(), false, {}});
  const TrainResult again = train(mc, t, tr, va, {});
  CHECK(same_params(full.last, again.last));
  REQUIRE(full.history.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(format_record(full.history[k]) == format_record(again.history[k]));

  TrainConfig half = t;
  half.max_epochs = 2;
  train(mc, half, tr, va, {d2.string(), false, {}});
  const TrainResult rest = train(mc, t, tr, va, {d2.string(), true, {}});
  CHECK(rest.history.size() == 2);
  CHECK(same_params(full.last, rest.last));
  CHECK(same_params(full.best, rest.best));
  CHECK(slurp(d1 / "metrics.tsv") == slurp(d2 / "metrics.tsv"));
  CHECK(slurp(d1 / "last.ckpt") == slurp(d2 / "last.ckpt"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("zero epochs writes the initial checkpoint") {
  const auto data = paired_frames(3, 2);
  const std::vector<AtomicSystem> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
  TrainConfig t = quick_config();
  t.max_epochs = 0;
  const ModelConfig mc = testing::small_config();
  const fs::path d = scratch("zero");
  const TrainResult r = train(mc, t, tr, va, {d.string(), false, {}});
  CHECK(r.history.empty());
  REQUIRE(fs::exists(d / "best.ckpt"));
  REQUIRE(fs::exists(d / "last.ckpt"));
  Model init = make_model(mc, t.seed);
  CHECK(same_params(load_model((d / "last.ckpt").string()), init));
  fs::remove_all(d);
}

TEST_CASE("training lowers the loss") {
  const auto data = paired_frames(20, 9);
  const std::vector<AtomicSystem> tr(data.begin(), data.begin() + 32), va(data.begin() + 32, data.end());
  TrainConfig t = quick_config();
  t.max_epochs = 15;
  const TrainResult r = train(testing::small_config(AttributeMode::total_charge), t, tr, va);
  REQUIRE(r.history.size() == 15);
  CHECK(r.state.best_val < r.history.front().val_loss);
  CHECK(r.history.back().train_loss < r.history.front().train_loss);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto data = paired_frames(3, 4);
  data[1].energy = std::nan("");
  const std::vector<AtomicSystem> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
  TrainConfig t = quick_config();
  t.reference_energies = ReferenceMode::none;
  try {
    train(testing::small_config(), t, tr, va);
    FAIL("expected NumericError");
  } catch (const ad::NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("batch indices") != std::string::npos);
    CHECK(msg.find("gradient norm") != std::string::npos);
  }
}

TEST_CASE("evaluation") {
  const auto data = paired_frames(4, 13);
  Model m = make_model(testing::small_config(AttributeMode::total_charge), 1);
  m.reference = reference_energies_for(data, ReferenceMode::mean);
  for (const auto& s : data) m.trained_elements.insert(s.numbers.begin(), s.numbers.end());

  const Evaluation ev = evaluate(m, data, GroupBy::total_charge);
  REQUIRE(ev.groups.size() == 2);
  CHECK(ev.groups.count("Q=0") == 1);
  CHECK(ev.groups.count("Q=+1") == 1);
  double mse = 0.0, fmse = 0.0;
  std::size_t n = 0, nf = 0;
  for (const auto& [label, g] : ev.groups) {
    mse += g.energy_mse * static_cast<double>(g.systems);
    fmse += g.force_mse * static_cast<double>(g.force_components);
    n += g.systems;
    nf += g.force_components;
  }
  CHECK(n == data.size());
  CHECK(mse / static_cast<double>(n) == doctest::Approx(ev.overall.energy_mse).epsilon(1e-12));
  CHECK(fmse / static_cast<double>(nf) == doctest::Approx(ev.overall.force_mse).epsilon(1e-12));
  CHECK(ev.overall.energy_rmse >= ev.overall.energy_mae);
  CHECK(ev.overall.force_vector_mae >= ev.overall.force_mae);

  AtomicSystem other = data[0];
  other.numbers[0] = 9;  // fluorine, unseen
  CHECK_THROWS_AS(evaluate(m, {other}), DataError);
  CHECK_THROWS_AS(parse_group_by("colour"), ConfigError);
  CHECK(group_label(data[1], GroupBy::spin) == "S=0");
}

TEST_CASE("reference energy modes") {
  const auto data = paired_frames(2, 3);
  const ReferenceEnergies none = reference_energies_for(data, ReferenceMode::none);
  CHECK(none.at(6) == 0.0);
  const ReferenceEnergies mean = reference_energies_for(data, ReferenceMode::mean);
  CHECK(mean.at(1) == mean.at(6));
  // a single composition cannot separate carbon from hydrogen
  CHECK_THROWS_AS(reference_energies_for(data, ReferenceMode::fit), DataError);
}

TEST_CASE("minimum-norm reference fit accepts confounded compositions") {
  auto data = paired_frames(3, 3, 0);
  const auto more = paired_frames(3, 4, 1);
  data.insert(data.end(), more.begin(), more.end());
  const ReferenceEnergies r = reference_energies_for(data, ReferenceMode::lstsq);
  REQUIRE(r.size() == 3);
  // the fit reproduces each composition's mean energy
  for (int mol = 0; mol < 2; ++mol) {
    double mean = 0.0, ref = 0.0;
    for (int k = 0; k < 6; ++k) mean += *data[static_cast<std::size_t>(6 * mol + k)].energy / 6.0;
    ref = reference_energy(data[static_cast<std::size_t>(6 * mol)], r);
    CHECK(ref == doctest::Approx(mean).epsilon(1e-10));
  }
}
