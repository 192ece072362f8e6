// tnet: dataset generation, training, evaluation and model checks.

#include "tnet/checks.hpp"
#include "tnet/parallel.hpp"
#include "tnet/training.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace tnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kValidation = 2, kNumeric = 3 };

struct Global {
  int threads = 0;
  std::string out_dir = ".";
  bool force = false;
};

struct ModelSource {
  std::string checkpoint;
  std::string config;
  std::vector<std::string> overrides;
};

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

fs::path in_out_dir(const Global& g, const std::string& name) { return fs::path(g.out_dir) / name; }

/// Creates out_dir, refusing a non-empty one unless forced.
void prepare_out_dir(const Global& g, bool allow_existing = false) {
  const fs::path d(g.out_dir);
  if (fs::exists(d) && !fs::is_directory(d)) throw ConfigError("--out-dir " + g.out_dir + " is not a directory");
  if (fs::exists(d) && !fs::is_empty(d) && !g.force && !allow_existing)
    throw ConfigError("--out-dir " + g.out_dir + " is not empty; pass --force to write into it");
  fs::create_directories(d);
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValues kv;
  if (!path.empty()) kv = read_key_values(path);
  apply_overrides(kv, overrides);
  return parse_experiment_config(kv);
}

Model resolve_model(const ModelSource& src) {
  if (!src.checkpoint.empty()) {
    if (!src.config.empty() || !src.overrides.empty())
      throw ConfigError("--model cannot be combined with --config or --set");
    return load_model(src.checkpoint);
  }
  const ExperimentConfig c = load_config(src.config, src.overrides);
  spdlog::info("using random parameters (seed {})", c.train.seed);
  return make_model(c.model, c.train.seed);
}

void add_model_source(CLI::App* cmd, ModelSource& src) {
  cmd->add_option("--model", src.checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  cmd->add_option("--config", src.config, "Config file for random parameters")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.overrides, "Config override key=value");
}

// ---------------------------------------------------------------------------
// gen-toy

struct GenToyArgs {
  ToyConfig toy;
  std::vector<std::string> oracle;
  std::string from_manifest;
};

void apply_oracle_override(OracleParams& o, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos) throw ConfigError("oracle override '" + item + "' is not key=value");
  const std::string k = item.substr(0, eq);
  double v = 0.0;
  try {
    std::size_t used = 0;
    v = std::stod(item.substr(eq + 1), &used);
    if (used != item.size() - eq - 1) throw std::invalid_argument(item);
  } catch (const std::exception&) {
    throw ConfigError("bad number in oracle override '" + item + "'");
  }
  if (k == "epsilon") o.epsilon = v;
  else if (k == "coulomb_k") o.coulomb_k = v;
  else if (k == "softening") o.softening = v;
  else if (k == "spin_coupling") o.spin_coupling = v;
  else if (k == "spin_range") o.spin_range = v;
  else if (k.rfind("chi_", 0) == 0) o.charge_offsets[atomic_number(k.substr(4))] = v;
  else if (k.rfind("radius_", 0) == 0) o.radii[atomic_number(k.substr(7))] = v;
  else
    throw ConfigError("unknown oracle key '" + k +
                      "'; valid keys: epsilon, coulomb_k, softening, spin_coupling, spin_range, chi_<El>, radius_<El>");
}

KeyValues toy_manifest(const ToyConfig& t, const ToyDatasets& d) {
  KeyValues kv;
  kv["seed"] = std::to_string(t.seed);
  kv["pairs"] = std::to_string(t.pairs);
  kv["frames"] = std::to_string(t.frames);
  kv["displacement"] = fmt17(t.displacement);
  kv["max_force"] = fmt17(t.max_force);
  kv["charge_a"] = fmt17(t.charge_a);
  kv["charge_b"] = fmt17(t.charge_b);
  std::string mols;
  for (const auto& m : d.molecule_names) mols += (mols.empty() ? "" : ",") + m;
  kv["molecules"] = mols;
  kv["oracle.epsilon"] = fmt17(t.oracle.epsilon);
  kv["oracle.coulomb_k"] = fmt17(t.oracle.coulomb_k);
  kv["oracle.softening"] = fmt17(t.oracle.softening);
  kv["oracle.spin_coupling"] = fmt17(t.oracle.spin_coupling);
  kv["oracle.spin_range"] = fmt17(t.oracle.spin_range);
  for (const auto& [z, v] : t.oracle.charge_offsets) kv["oracle.chi_" + std::string(element_symbol(z))] = fmt17(v);
  for (const auto& [z, v] : t.oracle.radii) kv["oracle.radius_" + std::string(element_symbol(z))] = fmt17(v);
  kv["path_a"] = "a_prime.extxyz";
  kv["path_b"] = "b_prime.extxyz";
  kv["path_merged"] = "merged.extxyz";
  kv["count_a"] = std::to_string(d.a.size());
  kv["count_b"] = std::to_string(d.b.size());
  kv["count_merged"] = std::to_string(d.a.size() + d.b.size());
  kv["rejected_frames"] = std::to_string(d.rejected);
  return kv;
}

ToyConfig toy_from_manifest(const KeyValues& kv) {
  ToyConfig t;
  auto num = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("manifest is missing '" + k + "'");
    return std::stod(it->second);
  };
  t.seed = static_cast<std::uint64_t>(std::stoull(kv.at("seed")));
  t.pairs = static_cast<int>(num("pairs"));
  t.frames = static_cast<int>(num("frames"));
  t.displacement = num("displacement");
  t.max_force = num("max_force");
  t.charge_a = num("charge_a");
  t.charge_b = num("charge_b");
  t.oracle.charge_offsets.clear();
  t.oracle.radii.clear();
  for (const auto& [k, v] : kv) {
    if (k.rfind("oracle.", 0) == 0) apply_oracle_override(t.oracle, k.substr(7) + "=" + v);
  }
  return t;
}

int run_gen_toy(const Global& g, GenToyArgs& a) {
  ToyConfig t = a.toy;
  if (!a.from_manifest.empty()) t = toy_from_manifest(read_key_values(a.from_manifest));
  for (const auto& o : a.oracle) apply_oracle_override(t.oracle, o);
  if (t.frames < 1) throw ConfigError("--frames must be >= 1");
  prepare_out_dir(g);
  spdlog::info("generating {} pairs x {} frames (seed {})", t.pairs, t.frames, t.seed);
  const ToyDatasets d = generate_toy_datasets(t);
  save_extxyz(in_out_dir(g, "a_prime.extxyz").string(), d.a);
  save_extxyz(in_out_dir(g, "b_prime.extxyz").string(), d.b);
  save_extxyz(in_out_dir(g, "merged.extxyz").string(), d.merged());
  write_key_values(in_out_dir(g, "manifest.txt").string(), toy_manifest(t, d));
  std::cout << "A' " << d.a.size() << " frames, B' " << d.b.size() << " frames, merged " << d.a.size() + d.b.size()
            << " frames, " << d.rejected << " redrawn\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train / eval / predict

struct TrainArgs {
  std::string config;
  std::string data;
  std::vector<std::string> overrides;
  bool resume = false;
};

void print_metrics(std::ostream& out, const Evaluation& ev) {
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %7s %12s %12s %14s %14s %12s %12s\n", "group", "n", "E_MAE_meV", "E_RMSE_meV",
                "E_MAE_meV/at", "E_RMSE_meV/at", "F_MAE", "F_RMSE");
  out << line;
  auto row = [&](const std::string& name, const Metrics& m) {
    std::snprintf(line, sizeof line, "%-10s %7zu %12.4f %12.4f %14.4f %14.4f %12.4f %12.4f\n", name.c_str(), m.systems,
                  m.energy_mae, m.energy_rmse, m.energy_mae_per_atom, m.energy_rmse_per_atom, m.force_mae,
                  m.force_rmse);
    out << line;
  };
  row("all", ev.overall);
  for (const auto& [name, m] : ev.groups) row(name, m);
  out << "force units meV/A per component\n";
}

int run_train(const Global& g, const TrainArgs& a) {
  KeyValues kv;
  if (!a.config.empty()) kv = read_key_values(a.config);
  apply_overrides(kv, a.overrides);
  const ExperimentConfig cfg = parse_experiment_config(kv);
  const std::vector<AtomicSystem> data = read_extxyz(a.data);
  prepare_out_dir(g, a.resume);

  const DatasetSplit split = make_split(data.size(), cfg.train.train_size, cfg.train.val_size, cfg.train.seed);
  const auto tr = select(data, split.train), va = select(data, split.val), te = select(data, split.test);
  spdlog::info("{} systems: {} train, {} val, {} test", data.size(), tr.size(), va.size(), te.size());
  if (!a.resume) {
    write_key_values(in_out_dir(g, "config.txt").string(), to_key_values(cfg));
    std::ofstream s(in_out_dir(g, "split.txt"));
    auto put = [&](const char* name, const std::vector<std::size_t>& idx) {
      s << name;
      for (std::size_t i : idx) s << ' ' << i;
      s << '\n';
    };
    put("train", split.train);
    put("val", split.val);
    put("test", split.test);
  }

  TrainOptions opt;
  opt.out_dir = g.out_dir;
  opt.resume = a.resume;
  opt.on_epoch = [](const EpochRecord& r) {
    spdlog::info("epoch {:4d} lr {:.3e} train {:.6e} val {:.6e} E_MAE {:.3f} meV F_MAE {:.3f} meV/A{}", r.epoch, r.lr,
                 r.train_loss, r.val_loss, r.val_energy_mae, r.val_force_mae, r.improved ? " *" : "");
  };
  const TrainResult res = train(cfg.model, cfg.train, tr, va, opt);
  spdlog::info("best val loss {:.6e} at epoch {}", res.state.best_val, res.state.best_epoch);
  if (!te.empty()) {
    const GroupBy gb = cfg.model.attribute_mode == AttributeMode::spin ? GroupBy::spin : GroupBy::total_charge;
    std::cout << "test set, best checkpoint\n";
    print_metrics(std::cout, evaluate(res.best, te, gb));
  }
  return kOk;
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string group_by = "total_charge";
  std::string split;
  std::string subset = "test";
};

std::vector<std::size_t> read_split(const std::string& path, const std::string& subset) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream s(line);
    std::string name;
    s >> name;
    if (name != subset) continue;
    std::vector<std::size_t> idx;
    std::size_t i;
    while (s >> i) idx.push_back(i);
    return idx;
  }
  throw ConfigError("split file has no '" + subset + "' line");
}

int run_eval(const EvalArgs& a) {
  const GroupBy gb = parse_group_by(a.group_by);
  const Model m = load_model(a.model);
  std::vector<AtomicSystem> data = read_extxyz(a.data);
  if (!a.split.empty()) {
    const auto idx = read_split(a.split, a.subset);
    for (std::size_t i : idx)
      if (i >= data.size()) throw DataError("split index " + std::to_string(i) + " is out of range");
    data = select(data, idx);
  }
  print_metrics(std::cout, evaluate(m, data, gb));
  return kOk;
}

struct PredictArgs {
  std::string model;
  std::string data;
  std::string output = "predictions.extxyz";
};

int run_predict(const Global& g, const PredictArgs& a) {
  const Model m = load_model(a.model);
  std::vector<AtomicSystem> data = read_extxyz(a.data);
  check_element_coverage(m, data);
  const Prediction p = predict(m, data);
  for (std::size_t k = 0; k < data.size(); ++k) {
    data[k].energy = p.energies[k];
    data[k].forces = p.forces[k];
  }
  prepare_out_dir(g, true);
  const fs::path out = in_out_dir(g, a.output);
  save_extxyz(out.string(), data);
  spdlog::info("wrote {} frames to {}", data.size(), out.string());
  return kOk;
}

// ---------------------------------------------------------------------------
// checks

struct EquivarianceArgs {
  ModelSource src;
  EquivarianceOptions opt;
  std::string mutate;
};

int run_check_equivariance(EquivarianceArgs& a) {
  if (!a.mutate.empty() && a.mutate != "flip_skew_sign") throw ConfigError("--mutate accepts only flip_skew_sign");
  const Model m = resolve_model(a.src);
  a.opt.forward.flip_skew_sign = a.mutate == "flip_skew_sign";
  if (a.opt.trials == 0) {
    spdlog::warn("trials=0: nothing checked");
    std::cout << "PASS (0 trials)\n";
    return kOk;
  }
  const EquivarianceReport r = check_equivariance(m, a.opt);
  std::printf("trials %d\nmax feature deviation %.3e (tol %.1e)\nmax energy relative deviation %.3e (tol %.1e)\n"
              "max force relative deviation %.3e (tol %.1e)\nworst trial %d\n%s\n",
              r.trials, r.max_feature_dev, a.opt.feature_tol, r.max_energy_rel_dev, a.opt.energy_tol,
              r.max_force_rel_dev, a.opt.force_tol, r.worst_trial, r.passed ? "PASS" : "FAIL");
  return r.passed ? kOk : kValidation;
}

struct GradcheckArgs {
  ModelSource src;
  ForceCheckOptions opt;
};

int run_gradcheck(const GradcheckArgs& a) {
  const Model m = resolve_model(a.src);
  const ForceCheckReport r = check_forces(m, a.opt);
  std::printf("systems %d\nmax relative force error %.3e (tol %.1e)\nmax net force %.3e (tol %.1e)\n%s\n", r.systems,
              r.max_rel_error, a.opt.tolerance, r.max_net_force, a.opt.net_force_tol, r.passed ? "PASS" : "FAIL");
  return r.passed ? kOk : kValidation;
}

struct BenchArgs {
  ModelSource src;
  ScalingOptions opt;
};

int run_bench(const BenchArgs& a) {
  for (int n : a.opt.sizes)
    if (n < 2) throw ConfigError("bench-scaling sizes must be >= 2");
  const Model m = resolve_model(a.src);
  const ScalingReport r = bench_scaling(m, a.opt);
  std::printf("%8s %14s %14s %14s %10s\n", "N", "mean_ms", "stddev_ms", "median_ms", "ratio");
  for (std::size_t k = 0; k < r.points.size(); ++k) {
    const auto& p = r.points[k];
    char sd[32] = "-";
    if (a.opt.repeats > 1) std::snprintf(sd, sizeof sd, "%.4f", 1e3 * p.stddev_seconds);
    char ratio[32] = "-";
    if (k > 0) std::snprintf(ratio, sizeof ratio, "%.3f", r.ratios[k - 1]);
    std::printf("%8d %14.4f %14s %14.4f %10s\n", p.atoms, 1e3 * p.mean_seconds, sd, 1e3 * p.median_seconds, ratio);
  }
  if (!r.ratios.empty())
    std::printf("median time(2N)/time(N) %.3f (bound %.2f) %s\n", r.median_ratio, a.opt.max_ratio,
                r.passed ? "PASS" : "FAIL");
  return kOk;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("tnet");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%l] %v");
  const char* level = std::getenv("TNET_LOG_LEVEL");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Tensor message-passing potentials with charge and spin attributes"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--threads", g.threads, "Worker thread cap (0: all cores)")->check(CLI::NonNegativeNumber);
  app.add_option("--out-dir", g.out_dir, "Directory for all outputs");
  app.add_flag("--force", g.force, "Write into a non-empty --out-dir");
  app.fallthrough();

  GenToyArgs gen;
  auto* c_gen = app.add_subcommand("gen-toy", "Generate the paired toy datasets A', B' and their union");
  c_gen->add_option("--seed", gen.toy.seed, "Random seed");
  c_gen->add_option("--pairs", gen.toy.pairs, "Number of molecule pairs (1-5)");
  c_gen->add_option("--frames", gen.toy.frames, "Conformers per molecule");
  c_gen->add_option("--displacement", gen.toy.displacement, "Gaussian displacement std (Angstrom)");
  c_gen->add_option("--max-force", gen.toy.max_force, "Redraw frames with max |F| at or above (eV/Angstrom)");
  c_gen->add_option("--charge-a", gen.toy.charge_a, "Total charge in A'");
  c_gen->add_option("--charge-b", gen.toy.charge_b, "Total charge in B'");
  c_gen->add_option("--oracle", gen.oracle, "Oracle override key=value");
  c_gen->add_option("--from-manifest", gen.from_manifest, "Regenerate from a manifest")->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", tr.config, "Config file")->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Extended XYZ dataset")->required()->check(CLI::ExistingFile);
  c_train->add_option("--set", tr.overrides, "Config override key=value");
  c_train->add_flag("--resume", tr.resume, "Continue from out-dir/last.ckpt");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Print metrics of a checkpoint on a dataset");
  c_eval->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", ev.data, "Extended XYZ dataset")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--group-by", ev.group_by, "none, total_charge or spin");
  c_eval->add_option("--split", ev.split, "split.txt written by train")->check(CLI::ExistingFile);
  c_eval->add_option("--subset", ev.subset, "train, val or test");

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Write predicted energies and forces as extended XYZ");
  c_pred->add_option("--model", pr.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_pred->add_option("--data", pr.data, "Extended XYZ input")->required()->check(CLI::ExistingFile);
  c_pred->add_option("--output", pr.output, "Output file name inside --out-dir");

  EquivarianceArgs eq;
  auto* c_eq = app.add_subcommand("check-equivariance", "Random rotation and reflection checks");
  add_model_source(c_eq, eq.src);
  c_eq->add_option("--trials", eq.opt.trials, "Number of random trials")->check(CLI::NonNegativeNumber);
  c_eq->add_option("--seed", eq.opt.seed, "Random seed");
  c_eq->add_option("--mutate", eq.mutate, "Deliberately broken variant: flip_skew_sign");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Forces against central differences");
  add_model_source(c_gc, gc.src);
  c_gc->add_option("--systems", gc.opt.systems, "Number of random systems");
  c_gc->add_option("--step", gc.opt.step, "Finite-difference step (Angstrom)");
  c_gc->add_option("--tol", gc.opt.tolerance, "Relative force tolerance");
  c_gc->add_option("--seed", gc.opt.seed, "Random seed");

  BenchArgs bn;
  auto* c_bn = app.add_subcommand("bench-scaling", "Time energy and forces against system size");
  add_model_source(c_bn, bn.src);
  c_bn->add_option("--sizes", bn.opt.sizes, "Atom counts")->delimiter(',');
  c_bn->add_option("--repeats", bn.opt.repeats, "Timings per size")->check(CLI::PositiveNumber);
  c_bn->add_option("--density", bn.opt.density, "Atoms per cubic Angstrom");
  c_bn->add_option("--seed", bn.opt.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  set_max_threads(g.threads > 0 ? g.threads : static_cast<int>(std::max(1U, std::thread::hardware_concurrency())));
  try {
    if (*c_gen) return run_gen_toy(g, gen);
    if (*c_train) return run_train(g, tr);
    if (*c_eval) return run_eval(ev);
    if (*c_pred) return run_predict(g, pr);
    if (*c_eq) return run_check_equivariance(eq);
    if (*c_gc) return run_gradcheck(gc);
    if (*c_bn) return run_bench(bn);
  } catch (const ad::NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const std::domain_error& e) {
    spdlog::error("{}", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  }
  return kUsage;
}
