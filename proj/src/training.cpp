#include "tnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace tnet {

using ad::Array;
using ad::Index;

namespace {

const std::vector<std::string> kModelKeys = {"attribute_mode", "cutoff_lower",  "cutoff_upper",
                                             "embedding_dimension", "lambda", "lambda_tilde",
                                             "lambdas_learnable", "num_layers", "num_rbf"};

const std::vector<std::string> kTrainKeys = {
    "activation",        "batch_size",   "derivative",        "early_stopping_patience",
    "equivariance_invariance_group",     "gradient_clipping", "lr",
    "lr_factor",         "lr_min",       "lr_patience",       "lr_warmup_steps",
    "max_epochs",        "neg_dy_weight", "reference_energies", "seed",
    "train_size",        "val_size",     "y_weight"};

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("bad number for " + key + ": '" + v + "'");
  }
}

long long to_integer(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw ConfigError(key + " must be an integer");
  return static_cast<long long>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "True" || v == "1") return true;
  if (v == "false" || v == "False" || v == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

std::string join_keys() {
  std::string s;
  for (const auto& k : valid_config_keys()) s += (s.empty() ? "" : ", ") + k;
  return s;
}

ReferenceMode parse_reference_mode(const std::string& v) {
  if (v == "fit") return ReferenceMode::fit;
  if (v == "lstsq") return ReferenceMode::lstsq;
  if (v == "mean") return ReferenceMode::mean;
  if (v == "none") return ReferenceMode::none;
  throw ConfigError("reference_energies must be fit, lstsq, mean or none, got '" + v + "'");
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("training state truncated");
  return v;
}

void put_array(std::ostream& out, const Array& a) {
  put<std::int64_t>(out, a.rows());
  put<std::int64_t>(out, a.cols());
  out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
}

Array get_array(std::istream& in) {
  const auto r = get<std::int64_t>(in), c = get<std::int64_t>(in);
  if (r < 0 || c < 0 || r * c > (1LL << 32)) throw DataError("training state array has a bad shape");
  Array a(r, c);
  in.read(reinterpret_cast<char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
  if (!in) throw DataError("training state truncated");
  return a;
}

double sq_norm(const std::vector<Array>& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.square().sum();
  return s;
}

std::vector<std::string> param_names(const ModelParams& p) {
  std::vector<std::string> names;
  p.for_each([&](const std::string& n, const Array&) { names.push_back(n); });
  return names;
}

std::vector<bool> trainable_mask(const ModelParams& p, const ModelConfig& cfg) {
  std::vector<bool> mask;
  p.for_each([&](const std::string& n, const Array&) { mask.push_back(!is_lambda_param(n) || cfg.lambdas_learnable); });
  return mask;
}

void require_labels(const std::vector<AtomicSystem>& systems, bool forces, const std::string& what) {
  for (std::size_t k = 0; k < systems.size(); ++k) {
    if (!systems[k].energy) throw DataError(what + " system " + std::to_string(k) + " has no energy label");
    if (forces && !systems[k].forces)
      throw DataError(what + " system " + std::to_string(k) +
                      " has no force labels but neg_dy_weight > 0 and derivative is true");
  }
}

bool uses_forces(const TrainConfig& c) { return c.derivative && c.neg_dy_weight > 0.0; }

}  // namespace

std::string_view to_string(ReferenceMode mode) {
  switch (mode) {
    case ReferenceMode::fit: return "fit";
    case ReferenceMode::lstsq: return "lstsq";
    case ReferenceMode::mean: return "mean";
    case ReferenceMode::none: return "none";
  }
  return "fit";
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) fail("lr_factor must lie in (0, 1)");
  if (lr_min < 0.0 || lr_min > lr) fail("lr_min must lie in [0, lr]");
  if (lr_patience < 1) fail("lr_patience must be >= 1");
  if (lr_warmup_steps < 0) fail("lr_warmup_steps must be >= 0");
  if (early_stopping_patience < 1) fail("early_stopping_patience must be >= 1");
  if (!(gradient_clipping > 0.0)) fail("gradient_clipping must be positive");
  if (y_weight < 0.0 || neg_dy_weight < 0.0) fail("loss weights must be non-negative");
  if (y_weight == 0.0 && !uses_forces(*this)) fail("loss has no terms: y_weight is 0 and forces are off");
  if (max_epochs < 0) fail("max_epochs must be >= 0");
  if (!(train_size > 0.0) || val_size < 0.0) fail("train_size must be positive and val_size non-negative");
}

const std::vector<std::string>& valid_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k = kModelKeys;
    k.insert(k.end(), kTrainKeys.begin(), kTrainKeys.end());
    std::sort(k.begin(), k.end());
    return k;
  }();
  return keys;
}

ExperimentConfig parse_experiment_config(const KeyValues& values) {
  KeyValues model_kv;
  ExperimentConfig out;
  TrainConfig& t = out.train;
  for (const auto& [k, v] : values) {
    if (std::find(kModelKeys.begin(), kModelKeys.end(), k) != kModelKeys.end()) {
      model_kv[k] = v;
      continue;
    }
    if (k == "activation") {
      if (v != "silu") throw ConfigError("activation must be silu, got '" + v + "'");
    } else if (k == "equivariance_invariance_group") {
      if (v != "O(3)") throw ConfigError("equivariance_invariance_group must be O(3), got '" + v + "'");
    } else if (k == "batch_size") t.batch_size = static_cast<int>(to_integer(k, v));
    else if (k == "derivative") t.derivative = to_bool(k, v);
    else if (k == "early_stopping_patience") t.early_stopping_patience = static_cast<int>(to_integer(k, v));
    else if (k == "gradient_clipping") t.gradient_clipping = to_double(k, v);
    else if (k == "lr") t.lr = to_double(k, v);
    else if (k == "lr_factor") t.lr_factor = to_double(k, v);
    else if (k == "lr_min") t.lr_min = to_double(k, v);
    else if (k == "lr_patience") t.lr_patience = static_cast<int>(to_integer(k, v));
    else if (k == "lr_warmup_steps") t.lr_warmup_steps = static_cast<int>(to_integer(k, v));
    else if (k == "max_epochs") t.max_epochs = static_cast<int>(to_integer(k, v));
    else if (k == "neg_dy_weight") t.neg_dy_weight = to_double(k, v);
    else if (k == "reference_energies") t.reference_energies = parse_reference_mode(v);
    else if (k == "seed") {
      const long long s = to_integer(k, v);
      if (s < 0) throw ConfigError("seed must be non-negative");
      t.seed = static_cast<std::uint64_t>(s);
    } else if (k == "train_size") t.train_size = to_double(k, v);
    else if (k == "val_size") t.val_size = to_double(k, v);
    else if (k == "y_weight") t.y_weight = to_double(k, v);
    else throw ConfigError("unknown config key '" + k + "'; valid keys: " + join_keys());
  }
  out.model = config_from_key_values(model_kv);
  t.validate();
  return out;
}

ExperimentConfig read_experiment_config(const std::string& path) {
  return parse_experiment_config(read_key_values(path));
}

KeyValues to_key_values(const ExperimentConfig& c) {
  KeyValues kv = config_to_key_values(c.model);
  const TrainConfig& t = c.train;
  kv["activation"] = "silu";
  kv["equivariance_invariance_group"] = "O(3)";
  kv["batch_size"] = std::to_string(t.batch_size);
  kv["derivative"] = t.derivative ? "true" : "false";
  kv["early_stopping_patience"] = std::to_string(t.early_stopping_patience);
  kv["gradient_clipping"] = fmt17(t.gradient_clipping);
  kv["lr"] = fmt17(t.lr);
  kv["lr_factor"] = fmt17(t.lr_factor);
  kv["lr_min"] = fmt17(t.lr_min);
  kv["lr_patience"] = std::to_string(t.lr_patience);
  kv["lr_warmup_steps"] = std::to_string(t.lr_warmup_steps);
  kv["max_epochs"] = std::to_string(t.max_epochs);
  kv["neg_dy_weight"] = fmt17(t.neg_dy_weight);
  kv["reference_energies"] = std::string(to_string(t.reference_energies));
  kv["seed"] = std::to_string(t.seed);
  kv["train_size"] = fmt17(t.train_size);
  kv["val_size"] = fmt17(t.val_size);
  kv["y_weight"] = fmt17(t.y_weight);
  return kv;
}

void apply_overrides(KeyValues& values, const std::vector<std::string>& overrides) {
  const auto& keys = valid_config_keys();
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string k = o.substr(0, eq);
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw ConfigError("unknown config key '" + k + "'; valid keys: " + join_keys());
    values[k] = o.substr(eq + 1);
  }
}

// ---------------------------------------------------------------------------

LossTerms compute_loss(const std::vector<double>& energy_pred, const std::vector<AtomicSystem>& labels,
                       const std::vector<Positions>& force_pred, const TrainConfig& config) {
  if (energy_pred.size() != labels.size()) throw std::invalid_argument("compute_loss: prediction count mismatch");
  const bool forces = uses_forces(config);
  require_labels(labels, forces, "label");
  LossTerms out;
  if (labels.empty()) return out;
  double se = 0.0, sf = 0.0;
  std::size_t nf = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const double d = energy_pred[k] - *labels[k].energy;
    se += d * d;
    if (forces) {
      sf += (force_pred.at(k) - *labels[k].forces).squaredNorm();
      nf += 3 * labels[k].size();
    }
  }
  out.energy_mse = se / static_cast<double>(labels.size());
  out.force_mse = forces ? sf / static_cast<double>(nf) : 0.0;
  out.total = config.y_weight * out.energy_mse + (forces ? config.neg_dy_weight * out.force_mse : 0.0);
  return out;
}

void adam_step(const std::vector<Array*>& params, const std::vector<Array>& grads, AdamState& s, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].isFinite().all())
      throw ad::NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
  if (s.m.empty()) {
    for (const auto& g : grads) {
      s.m.push_back(Array::Zero(g.rows(), g.cols()));
      s.v.push_back(Array::Zero(g.rows(), g.cols()));
    }
  }
  if (s.m.size() != grads.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i].square();
    *params[i] -= lr * (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + s.eps);
  }
}

double clip_gradients(std::vector<Array>& grads, double max_norm) {
  const double norm = std::sqrt(sq_norm(grads));
  if (std::isfinite(norm) && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads) g *= f;
  }
  return norm;
}

std::string TrainState::serialize() const {
  std::ostringstream out(std::ios::binary);
  put<std::int32_t>(out, epoch);
  put<std::int64_t>(out, step);
  put<double>(out, base_lr);
  put<double>(out, best_val);
  put<std::int32_t>(out, best_epoch);
  put<std::int32_t>(out, plateau_epochs);
  put<std::int32_t>(out, stale_epochs);
  put<std::uint8_t>(out, stopped ? 1 : 0);
  put<std::int64_t>(out, adam.t);
  put<double>(out, adam.beta1);
  put<double>(out, adam.beta2);
  put<double>(out, adam.eps);
  put<std::uint64_t>(out, adam.m.size());
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    put_array(out, adam.m[i]);
    put_array(out, adam.v[i]);
  }
  put<std::uint64_t>(out, rng.size());
  out.write(rng.data(), static_cast<std::streamsize>(rng.size()));
  return out.str();
}

TrainState TrainState::deserialize(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  TrainState s;
  s.epoch = get<std::int32_t>(in);
  s.step = get<std::int64_t>(in);
  s.base_lr = get<double>(in);
  s.best_val = get<double>(in);
  s.best_epoch = get<std::int32_t>(in);
  s.plateau_epochs = get<std::int32_t>(in);
  s.stale_epochs = get<std::int32_t>(in);
  s.stopped = get<std::uint8_t>(in) != 0;
  s.adam.t = get<std::int64_t>(in);
  s.adam.beta1 = get<double>(in);
  s.adam.beta2 = get<double>(in);
  s.adam.eps = get<double>(in);
  const auto n = get<std::uint64_t>(in);
  if (n > 100000) throw DataError("training state has too many moment arrays");
  for (std::uint64_t i = 0; i < n; ++i) {
    s.adam.m.push_back(get_array(in));
    s.adam.v.push_back(get_array(in));
  }
  const auto len = get<std::uint64_t>(in);
  if (len > (1ULL << 20)) throw DataError("training state RNG string too long");
  s.rng.assign(len, '\0');
  in.read(s.rng.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("training state truncated");
  return s;
}

double lr_for_step(const TrainState& state, const TrainConfig& config) {
  const long long next = state.step + 1;
  if (config.lr_warmup_steps > 0 && next < config.lr_warmup_steps)
    return state.base_lr * static_cast<double>(next) / static_cast<double>(config.lr_warmup_steps);
  return state.base_lr;
}

bool lr_schedule(TrainState& s, double val_loss, const TrainConfig& config) {
  const bool improved = val_loss < s.best_val;
  if (improved) {
    s.best_val = val_loss;
    s.best_epoch = s.epoch;
    s.plateau_epochs = 0;
    s.stale_epochs = 0;
    return true;
  }
  ++s.plateau_epochs;
  ++s.stale_epochs;
  if (s.plateau_epochs >= config.lr_patience) {
    s.base_lr = std::max(s.base_lr * config.lr_factor, config.lr_min);
    s.plateau_epochs = 0;
  }
  if (s.stale_epochs >= config.early_stopping_patience) s.stopped = true;
  return false;
}

// ---------------------------------------------------------------------------

BatchGradient batch_gradient(const Model& model, const std::vector<const AtomicSystem*>& systems,
                             const TrainConfig& config) {
  const bool forces = uses_forces(config);
  const Batch batch = make_batch(systems, model);
  const auto nb = static_cast<Index>(systems.size());
  const auto na = static_cast<Index>(batch.num_atoms());

  ad::Tape tape;
  const ParamVars pv = bind(tape, model.params, model.config, true);
  const ForwardVars fv = forward(tape, pv, batch, model.config);

  BatchGradient out;
  Array labels(nb, 1);
  for (Index b = 0; b < nb; ++b) {
    const auto* s = systems[static_cast<std::size_t>(b)];
    if (!s->energy) throw DataError("training system has no energy label");
    labels(b, 0) = *s->energy;
  }
  const Array& e = fv.energy.value();
  out.energies.assign(e.data(), e.data() + nb);
  const Array seed = 2.0 * config.y_weight * (e - labels) / static_cast<double>(nb);
  out.loss.energy_mse = (e - labels).square().sum() / static_cast<double>(nb);

  if (forces) {
    tape.backward(fv.energy, Array::Ones(nb, 1));
    const Array f = -tape.grad(fv.positions);
    Array resid(na, 3);
    for (Index b = 0; b < nb; ++b) {
      const auto* s = systems[static_cast<std::size_t>(b)];
      if (!s->forces)
        throw DataError("training system has no force labels but neg_dy_weight > 0 and derivative is true");
      const auto off = static_cast<Index>(batch.atom_offset[static_cast<std::size_t>(b)]);
      const auto n = static_cast<Index>(s->size());
      resid.middleRows(off, n) = f.middleRows(off, n) - s->forces->array();
      out.forces.emplace_back(f.middleRows(off, n).matrix());
    }
    out.loss.force_mse = resid.square().sum() / static_cast<double>(3 * na);
    tape.set_tangent(fv.positions, resid);
    tape.propagate_tangents();
    const Array tseed = Array::Constant(nb, 1, -2.0 * config.neg_dy_weight / static_cast<double>(3 * na));
    tape.backward_dual(fv.energy, seed, tseed);
  } else {
    tape.backward(fv.energy, seed);
  }
  out.loss.total = config.y_weight * out.loss.energy_mse + (forces ? config.neg_dy_weight * out.loss.force_mse : 0.0);
  pv.for_each([&](const std::string&, const ad::Var& v) { out.grads.push_back(tape.grad(v)); });
  return out;
}

std::string metrics_header() {
  return "epoch\tstep\tlr\ttrain_loss\tval_loss\tval_energy_mae_meV\tval_force_mae_meV_per_A\timproved";
}

std::string format_record(const EpochRecord& r) {
  std::ostringstream s;
  s << r.epoch << '\t' << r.step << '\t' << fmt17(r.lr) << '\t' << fmt17(r.train_loss) << '\t' << fmt17(r.val_loss)
    << '\t' << fmt17(r.val_energy_mae) << '\t' << fmt17(r.val_force_mae) << '\t' << (r.improved ? 1 : 0);
  return s.str();
}

ReferenceEnergies reference_energies_for(const std::vector<AtomicSystem>& train_set, ReferenceMode mode) {
  ReferenceEnergies refs;
  if (mode == ReferenceMode::fit || mode == ReferenceMode::lstsq)
    return fit_reference_energies(train_set, mode == ReferenceMode::lstsq);
  std::set<int> elements;
  for (const auto& s : train_set) elements.insert(s.numbers.begin(), s.numbers.end());
  double per_atom = 0.0;
  if (mode == ReferenceMode::mean) {
    double e = 0.0, n = 0.0;
    for (const auto& s : train_set) {
      if (!s.energy) throw DataError("reference energies need energy labels");
      e += *s.energy;
      n += static_cast<double>(s.size());
    }
    if (n > 0.0) per_atom = e / n;
  }
  for (int z : elements) refs[z] = per_atom;
  return refs;
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const std::vector<AtomicSystem>& train_set,
                  const std::vector<AtomicSystem>& val_set, const TrainOptions& options) {
  namespace fs = std::filesystem;
  model_config.validate();
  config.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  if (val_set.empty()) throw DataError("validation set is empty");
  const bool forces = uses_forces(config);
  require_labels(train_set, forces, "training");
  require_labels(val_set, forces, "validation");

  const bool files = !options.out_dir.empty();
  const std::string last_path = files ? (fs::path(options.out_dir) / "last.ckpt").string() : "";
  const std::string best_path = files ? (fs::path(options.out_dir) / "best.ckpt").string() : "";
  const std::string log_path = files ? (fs::path(options.out_dir) / "metrics.tsv").string() : "";

  TrainResult result;
  TrainState& state = result.state;
  Model model;
  std::mt19937_64 rng(config.seed);

  if (options.resume) {
    if (!files) throw ConfigError("resume needs an output directory");
    std::string trailer;
    model = load_model(last_path, &trailer);
    if (config_to_key_values(model.config) != config_to_key_values(model_config))
      throw ConfigError("resume: model config differs from the checkpoint");
    state = TrainState::deserialize(trailer);
    std::istringstream(state.rng) >> rng;
    result.best = fs::exists(best_path) ? load_model(best_path) : model;
  } else {
    if (files) fs::create_directories(options.out_dir);
    model = make_model(model_config, config.seed);
    model.reference = reference_energies_for(train_set, config.reference_energies);
    for (const auto& s : train_set) model.trained_elements.insert(s.numbers.begin(), s.numbers.end());
    state.base_lr = config.lr;
    result.best = model;
    if (files) {
      std::ofstream(log_path) << metrics_header() << '\n';
      std::ostringstream r;
      r << rng;
      state.rng = r.str();
      save_model(best_path, model, state.serialize());
      save_model(last_path, model, state.serialize());
    }
  }

  std::vector<Array*> slots;
  model.params.for_each([&](const std::string&, Array& a) { slots.push_back(&a); });
  const std::vector<bool> mask = trainable_mask(model.params, model.config);
  const std::vector<std::string> names = param_names(model.params);

  std::vector<std::size_t> order(train_set.size());
  while (state.epoch < config.max_epochs && !state.stopped) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    double lr = lr_for_step(state, config);
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(config.batch_size));
      std::vector<const AtomicSystem*> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&train_set[order[i]]);
      BatchGradient g = batch_gradient(model, batch, config);
      for (std::size_t i = 0; i < g.grads.size(); ++i)
        if (!mask[i]) g.grads[i].setZero();
      const double norm = clip_gradients(g.grads, config.gradient_clipping);
      if (!std::isfinite(g.loss.total) || !std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << state.epoch + 1 << " step " << state.step + 1 << ": loss "
            << g.loss.total << ", gradient norm " << norm << "; batch indices";
        for (std::size_t i = lo; i < hi; ++i) msg << ' ' << order[i];
        msg << "; per-parameter gradient norms";
        for (std::size_t i = 0; i < g.grads.size(); ++i) msg << ' ' << names[i] << '=' << std::sqrt(g.grads[i].square().sum());
        if (files) std::ofstream(fs::path(options.out_dir) / "nan_report.txt") << msg.str() << '\n';
        throw ad::NumericError(msg.str());
      }
      lr = lr_for_step(state, config);
      adam_step(slots, g.grads, state.adam, lr);
      ++state.step;
      loss_sum += g.loss.total * static_cast<double>(batch.size());
      loss_count += batch.size();
    }
    ++state.epoch;

    const Prediction p = predict(model, val_set);
    const LossTerms val = compute_loss(p.energies, val_set, p.forces, config);
    const Metrics m = compute_metrics(val_set, p.energies, forces ? p.forces : std::vector<Positions>{});
    if (!std::isfinite(val.total))
      throw ad::NumericError("non-finite validation loss after epoch " + std::to_string(state.epoch));

    EpochRecord rec;
    rec.epoch = state.epoch;
    rec.step = state.step;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    rec.val_loss = val.total;
    rec.val_energy_mae = m.energy_mae;
    rec.val_force_mae = m.force_mae;
    rec.improved = lr_schedule(state, val.total, config);
    if (rec.improved) result.best = model;

    std::ostringstream r;
    r << rng;
    state.rng = r.str();
    if (files) {
      if (rec.improved) save_model(best_path, model, state.serialize());
      save_model(last_path, model, state.serialize());
      std::ofstream(log_path, std::ios::app) << format_record(rec) << '\n';
    }
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  result.last = model;
  return result;
}

// ---------------------------------------------------------------------------

Metrics compute_metrics(const std::vector<AtomicSystem>& labels, const std::vector<double>& energies,
                        const std::vector<Positions>& forces) {
  Metrics m;
  m.systems = labels.size();
  if (labels.empty()) return m;
  constexpr double kMilli = 1000.0;
  double ae = 0, se = 0, aea = 0, sea = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (!labels[k].energy) throw DataError("system " + std::to_string(k) + " has no energy label");
    const double d = (energies[k] - *labels[k].energy) * kMilli;
    const double n = static_cast<double>(labels[k].size());
    ae += std::abs(d);
    se += d * d;
    aea += std::abs(d) / n;
    sea += d * d / (n * n);
  }
  const double nb = static_cast<double>(labels.size());
  m.energy_mae = ae / nb;
  m.energy_mse = se / nb;
  m.energy_rmse = std::sqrt(m.energy_mse);
  m.energy_mae_per_atom = aea / nb;
  m.energy_rmse_per_atom = std::sqrt(sea / nb);

  const bool have = !forces.empty() &&
                    std::all_of(labels.begin(), labels.end(), [](const AtomicSystem& s) { return s.forces.has_value(); });
  if (!have) return m;
  double af = 0, sf = 0, av = 0, sv = 0;
  std::size_t comps = 0, atoms = 0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const Positions d = (forces.at(k) - *labels[k].forces) * kMilli;
    af += d.cwiseAbs().sum();
    sf += d.squaredNorm();
    const Eigen::VectorXd rn = d.rowwise().norm();
    av += rn.sum();
    sv += rn.squaredNorm();
    comps += static_cast<std::size_t>(d.size());
    atoms += static_cast<std::size_t>(d.rows());
  }
  m.force_components = comps;
  m.force_mae = af / static_cast<double>(comps);
  m.force_mse = sf / static_cast<double>(comps);
  m.force_rmse = std::sqrt(m.force_mse);
  m.force_vector_mae = av / static_cast<double>(atoms);
  m.force_vector_rmse = std::sqrt(sv / static_cast<double>(atoms));
  return m;
}

GroupBy parse_group_by(std::string_view text) {
  if (text == "none") return GroupBy::none;
  if (text == "total_charge" || text == "charge") return GroupBy::total_charge;
  if (text == "spin") return GroupBy::spin;
  throw ConfigError("group-by must be none, total_charge or spin, got '" + std::string(text) + "'");
}

std::string group_label(const AtomicSystem& s, GroupBy group_by) {
  char buf[48];
  switch (group_by) {
    case GroupBy::none: return "all";
    case GroupBy::total_charge:
      if (s.total_charge == 0.0) return "Q=0";
      std::snprintf(buf, sizeof buf, "Q=%+g", s.total_charge);
      return buf;
    case GroupBy::spin: return "S=" + std::to_string(s.spin);
  }
  return "all";
}

Evaluation evaluate(const Model& model, const std::vector<AtomicSystem>& systems, GroupBy group_by) {
  check_element_coverage(model, systems);
  const Prediction p = predict(model, systems);
  Evaluation out;
  out.overall = compute_metrics(systems, p.energies, p.forces);
  if (group_by == GroupBy::none) return out;
  std::map<std::string, std::vector<std::size_t>> idx;
  for (std::size_t k = 0; k < systems.size(); ++k) idx[group_label(systems[k], group_by)].push_back(k);
  for (const auto& [label, members] : idx) {
    std::vector<AtomicSystem> sub;
    std::vector<double> e;
    std::vector<Positions> f;
    for (std::size_t k : members) {
      sub.push_back(systems[k]);
      e.push_back(p.energies[k]);
      f.push_back(p.forces[k]);
    }
    out.groups[label] = compute_metrics(sub, e, f);
  }
  return out;
}

}  // namespace tnet
