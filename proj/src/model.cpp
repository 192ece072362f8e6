#include "tnet/model.hpp"

#include "tnet/parallel.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace tnet {

using ad::Array;
using ad::Index;
using ad::IndexList;
using ad::Tape;
using ad::Var;

namespace {

std::atomic<int> g_max_threads{1};

}  // namespace

int max_threads() { return g_max_threads.load(); }
void set_max_threads(int n) { g_max_threads.store(std::max(1, n)); }

std::string_view to_string(AttributeMode mode) {
  switch (mode) {
    case AttributeMode::none: return "none";
    case AttributeMode::total_charge: return "total_charge";
    case AttributeMode::spin: return "spin";
    case AttributeMode::per_atom_charge: return "per_atom_charge";
  }
  return "none";
}

AttributeMode parse_attribute_mode(std::string_view text) {
  for (auto m : {AttributeMode::none, AttributeMode::total_charge, AttributeMode::spin, AttributeMode::per_atom_charge})
    if (to_string(m) == text) return m;
  throw ConfigError("unknown attribute_mode '" + std::string(text) +
                    "' (expected none, total_charge, spin or per_atom_charge)");
}

void ModelConfig::validate() const {
  if (!(cutoff_lower >= 0.0) || !(cutoff_upper > cutoff_lower) || !std::isfinite(cutoff_upper))
    throw ConfigError("need cutoff_upper > cutoff_lower >= 0");
  if (num_channels < 1) throw ConfigError("embedding_dimension must be at least 1");
  if (num_layers < 1) throw ConfigError("num_layers must be at least 1");
  if (num_rbf < 1) throw ConfigError("num_rbf must be at least 1");
  if (lambda.size() != static_cast<std::size_t>(num_layers) ||
      lambda_tilde.size() != static_cast<std::size_t>(num_layers))
    throw ConfigError("lambda and lambda_tilde need one value per layer");
  for (double v : lambda)
    if (!std::isfinite(v)) throw ConfigError("lambda must be finite");
  for (double v : lambda_tilde)
    if (!std::isfinite(v)) throw ConfigError("lambda_tilde must be finite");
}

void ModelConfig::set_shared_lambda(double lam, double lam_tilde) {
  lambda.assign(static_cast<std::size_t>(std::max(num_layers, 0)), lam);
  lambda_tilde.assign(static_cast<std::size_t>(std::max(num_layers, 0)), lam_tilde);
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  params.for_each([&](const std::string&, const Array& a) { n += static_cast<std::size_t>(a.size()); });
  return n;
}

bool is_lambda_param(const std::string& name) {
  return name.ends_with(".lambda") || name.ends_with(".lambda_tilde");
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const Index c = config.num_channels, k = config.num_rbf;
  ModelParams p;
  p.embedding.resize(kNumElements, c);
  p.pair_w.resize(c, 2 * c);
  p.pair_b.resize(1, c);
  p.radial_w.resize(4 * c, k);
  p.radial_b.resize(1, 4 * c);
  p.self_w.resize(c, c);
  p.gate_w.resize(3 * c, c);
  p.gate_b.resize(1, 3 * c);
  for (auto& m : p.mix) m.resize(c, c);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    L.radial_w.resize(3 * c, k);
    L.radial_b.resize(1, 3 * c);
    for (auto& m : L.mix_in) m.resize(c, c);
    for (auto& m : L.mix_out) m.resize(c, c);
    L.lambda = Array::Constant(1, 1, config.lambda[l]);
    L.lambda_tilde = Array::Constant(1, 1, config.lambda_tilde[l]);
  }
  p.head_w1.resize(c, 3 * c);
  p.head_b1.resize(1, c);
  p.head_w2.resize(1, c);
  p.head_b2.resize(1, 1);

  std::mt19937_64 rng(seed);
  p.for_each([&](const std::string& name, Array& a) {
    if (is_lambda_param(name)) return;
    if (name == "embedding") {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (Index i = 0; i < a.size(); ++i) a(i) = normal(rng);
    } else if (name.ends_with("_b") || name.ends_with("_b1") || name.ends_with("_b2")) {
      a.setZero();
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(a.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index i = 0; i < a.size(); ++i) a(i) = u(rng);
    }
  });
  return p;
}

Model make_model(const ModelConfig& config, std::uint64_t seed) {
  Model m;
  m.config = config;
  m.params = init_params(config, seed);
  return m;
}

double cosine_cutoff(double r, double lower, double upper) {
  if (r < lower) return 1.0;
  if (r >= upper) return 0.0;
  return 0.5 * (std::cos(std::numbers::pi * (r - lower) / (upper - lower)) + 1.0);
}

RadialWeights radial_weights(double r, const ModelConfig& config, const LayerParams& layer) {
  Tape t;
  Var rbf = ad::expnorm_rbf(t.constant(Array::Constant(1, 1, r)), config.cutoff_lower, config.cutoff_upper,
                            config.num_rbf);
  const Array f = ad::linear(rbf, t.constant(layer.radial_w), t.constant(layer.radial_b)).value();
  const Index c = config.num_channels;
  RadialWeights out;
  out.f_i = f.block(0, 0, 1, c).transpose().matrix();
  out.f_a = f.block(0, c, 1, c).transpose().matrix();
  out.f_s = f.block(0, 2 * c, 1, c).transpose().matrix();
  return out;
}

// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<const AtomicSystem*>& systems, const Model& model) {
  const ModelConfig& cfg = model.config;
  Batch b;
  std::size_t total = 0;
  for (const AtomicSystem* s : systems) total += s->size();
  b.positions.resize(static_cast<Index>(total), 3);
  b.atom_offset.push_back(0);
  for (std::size_t k = 0; k < systems.size(); ++k) {
    const AtomicSystem& s = *systems[k];
    validate(s);
    const std::size_t off = b.atom_offset.back();
    if (cfg.attribute_mode == AttributeMode::per_atom_charge && !s.per_atom_charges)
      throw DataError("attribute_mode per_atom_charge needs per-atom charges on every system");
    for (std::size_t i = 0; i < s.size(); ++i) {
      b.numbers.push_back(s.numbers[i]);
      b.system_of_atom.push_back(static_cast<Index>(k));
      double psi = 0.0;
      switch (cfg.attribute_mode) {
        case AttributeMode::none: break;
        case AttributeMode::total_charge: psi = s.total_charge; break;
        case AttributeMode::spin: psi = static_cast<double>(s.spin); break;
        case AttributeMode::per_atom_charge: psi = (*s.per_atom_charges)[i]; break;
      }
      b.psi.push_back(psi);
      double ref = 0.0;
      if (!model.reference.empty()) {
        const auto it = model.reference.find(s.numbers[i]);
        if (it == model.reference.end())
          throw DataError("no reference energy for element " + std::string(element_symbol(s.numbers[i])));
        ref = it->second;
      }
      b.reference.push_back(ref);
    }
    b.positions.middleRows(static_cast<Index>(off), static_cast<Index>(s.size())) = s.positions;
    const NeighborList nl = build_neighbor_list(s.positions, cfg.cutoff_upper);
    for (std::size_t e = 0; e < nl.size(); ++e) {
      b.centers.push_back(nl.centers[e] + static_cast<Index>(off));
      b.neighbors.push_back(nl.neighbors[e] + static_cast<Index>(off));
    }
    b.atom_offset.push_back(off + s.size());
  }
  return b;
}

Batch make_batch(const std::vector<AtomicSystem>& systems, const Model& model) {
  std::vector<const AtomicSystem*> ptrs;
  ptrs.reserve(systems.size());
  for (const auto& s : systems) ptrs.push_back(&s);
  return make_batch(ptrs, model);
}

ParamVars bind(Tape& tape, const ModelParams& params, const ModelConfig& config, bool requires_grad) {
  ParamVars v;
  v.layers.resize(params.layers.size());
  // Walk both layouts in lockstep.
  std::vector<Var> leaves;
  params.for_each([&](const std::string& name, const Array& a) {
    const bool grad = is_lambda_param(name) ? requires_grad && config.lambdas_learnable : requires_grad;
    leaves.push_back(tape.leaf(a, grad));
  });
  std::size_t i = 0;
  v.for_each([&](const std::string&, Var& slot) { slot = leaves[i++]; });
  return v;
}

ForwardVars forward(Tape& tape, const ParamVars& p, const Batch& batch, const ModelConfig& cfg,
                    const ForwardOptions& options) {
  using namespace ad;
  const auto n = static_cast<Index>(batch.num_atoms());
  const Index c = cfg.num_channels;
  const Index nc = n * c;
  IndexList row_atom(static_cast<std::size_t>(nc));
  for (Index r = 0; r < nc; ++r) row_atom[static_cast<std::size_t>(r)] = r / c;

  ForwardVars out;
  out.positions = tape.leaf(Array(batch.positions), true);

  // Edge geometry.
  Var rvec = gather_rows(out.positions, batch.neighbors) - gather_rows(out.positions, batch.centers);
  Var dist = sqrt(sum_cols(mul(rvec, rvec)));
  Var rhat = mul_rows(rvec, reciprocal(dist));
  Var phi = cosine_cutoff(dist, cfg.cutoff_lower, cfg.cutoff_upper);
  Var rbf = expnorm_rbf(dist, cfg.cutoff_lower, cfg.cutoff_upper, cfg.num_rbf);

  // Embedding.
  IndexList z(batch.numbers.begin(), batch.numbers.end());
  Var emb = gather_rows(p.embedding, z);
  Var zij = linear(concat_cols({gather_rows(emb, batch.centers), gather_rows(emb, batch.neighbors)}), p.pair_w,
                   p.pair_b);
  Var w = mul_rows(linear(rbf, p.radial_w, p.radial_b), phi);
  auto edge_head = [&](Index k) { return mul(slice_cols(w, k * c, c), zij); };
  Var w_i = edge_head(0), w_u = edge_head(1), w_v = edge_head(2), w_s = edge_head(3);

  Var scalar = add(scatter_rows(w_i, batch.centers, n), linear(emb, p.self_w));
  Var seed_i = identity_rows(reshape(scalar, nc, 1));
  Var u = scatter_scaled(w_u, rhat, batch.centers, n);
  Var v = scatter_scaled(w_v, rhat, batch.centers, n);
  Var seed_a = skew_rows(cross_rows(u, v));
  if (options.flip_skew_sign) {
    Array mask = Array::Ones(nc, 9);
    mask.col(1) *= -1.0;
    mask.col(3) *= -1.0;
    seed_a = mul(seed_a, tape.constant(std::move(mask)));
  }
  Var seed_s = scatter_scaled(w_s, project_traceless(outer_rows(rhat, rhat)), batch.centers, n);

  Var raw = seed_i + seed_a + seed_s;
  Var gates = silu(linear(reshape(sum_cols(mul(raw, raw)), n, c), p.gate_w, p.gate_b));
  auto gate = [&](Index k) { return reshape(slice_cols(gates, k * c, c), nc, 1); };
  Var x = mul_rows(channel_mix(p.mix[0], seed_i), gate(0)) + mul_rows(channel_mix(p.mix[1], seed_a), gate(1)) +
          mul_rows(channel_mix(p.mix[2], seed_s), gate(2));
  out.features.push_back(x);

  Array psi_rows(nc, 1);
  for (Index r = 0; r < nc; ++r) psi_rows(r, 0) = batch.psi[static_cast<std::size_t>(r / c)];
  auto scaling = [&](Var lam) {
    if (cfg.lambdas_learnable) {
      Var lam_rows = gather_rows(lam, IndexList(static_cast<std::size_t>(nc), 0));
      return add_scalar(mul(tape.constant(psi_rows), lam_rows), 1.0);
    }
    const double l = lam.value()(0, 0);
    Array f(nc, 1);
    for (Index r = 0; r < nc; ++r) f(r, 0) = 1.0 + l * psi_rows(r, 0);
    return tape.constant(std::move(f));
  };

  for (const LayerVars& L : p.layers) {
    Var xn = mul_rows(x, reciprocal(add_scalar(sqrt(sum_cols(mul(x, x))), 1.0)));
    Var y_i = channel_mix(L.mix_in[0], project_scalar(xn));
    Var y_a = channel_mix(L.mix_in[1], project_vector(xn));
    Var y_s = channel_mix(L.mix_in[2], project_traceless(xn));
    Var y = y_i + y_a + y_s;

    Var f = mul_rows(linear(rbf, L.radial_w, L.radial_b), phi);
    auto part = [&](Var comp, Index k) { return message(comp, slice_cols(f, k * c, c), batch.centers, batch.neighbors); };
    Var m = part(y_i, 0) + part(y_a, 1) + part(y_s, 2);

    Var yp = mul_rows(matmul3(y, m) + matmul3(m, y), scaling(L.lambda));
    Var yn = mul_rows(yp, reciprocal(add_scalar(sqrt(sum_cols(mul(yp, yp))), 1.0)));
    Var dx = channel_mix(L.mix_out[0], project_scalar(yn)) + channel_mix(L.mix_out[1], project_vector(yn)) +
             channel_mix(L.mix_out[2], project_traceless(yn));
    x = xn + dx + mul_rows(matmul3(dx, dx), scaling(L.lambda_tilde));
    out.features.push_back(x);
  }

  auto norm_sq = [&](Var t) { return reshape(sum_cols(mul(t, t)), n, c); };
  Var inv = concat_cols({norm_sq(project_scalar(x)), norm_sq(project_vector(x)), norm_sq(project_traceless(x))});
  Var atom = linear(silu(linear(inv, p.head_w1, p.head_b1)), p.head_w2, p.head_b2);
  Array ref(n, 1);
  for (Index i = 0; i < n; ++i) ref(i, 0) = batch.reference[static_cast<std::size_t>(i)];
  out.atom_energy = atom + tape.constant(std::move(ref));
  out.energy = scatter_rows(out.atom_energy, batch.system_of_atom, static_cast<Index>(batch.num_systems()));
  return out;
}

// ---------------------------------------------------------------------------

void check_element_coverage(const Model& model, const std::vector<AtomicSystem>& systems) {
  if (model.trained_elements.empty()) return;
  for (std::size_t k = 0; k < systems.size(); ++k)
    for (int z : systems[k].numbers)
      if (!model.trained_elements.count(z))
        throw DataError("system " + std::to_string(k) + " contains element " + std::string(element_symbol(z)) +
                        " not seen during training");
}

Prediction predict(const Model& model, const std::vector<AtomicSystem>& systems, std::size_t chunk,
                   const ForwardOptions& options) {
  chunk = std::max<std::size_t>(chunk, 1);
  const std::size_t chunks = (systems.size() + chunk - 1) / chunk;
  Prediction out;
  out.energies.resize(systems.size());
  out.forces.resize(systems.size());
  parallel_for(chunks, max_threads(), [&](std::size_t k) {
    const std::size_t lo = k * chunk, hi = std::min(systems.size(), lo + chunk);
    std::vector<const AtomicSystem*> part;
    for (std::size_t i = lo; i < hi; ++i) part.push_back(&systems[i]);
    const Batch batch = make_batch(part, model);
    Tape tape;
    const ParamVars pv = bind(tape, model.params, model.config, false);
    const ForwardVars fv = forward(tape, pv, batch, model.config, options);
    tape.backward(fv.energy, Array::Ones(fv.energy.rows(), 1));
    const Array grad = tape.grad(fv.positions);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t s = i - lo;
      out.energies[i] = fv.energy.value()(static_cast<Index>(s), 0);
      const auto off = static_cast<Index>(batch.atom_offset[s]);
      const auto na = static_cast<Index>(systems[i].size());
      out.forces[i] = -grad.middleRows(off, na).matrix();
    }
  });
  return out;
}

std::vector<Array> features(const Model& model, const AtomicSystem& system, const ForwardOptions& options) {
  const Batch batch = make_batch(std::vector<const AtomicSystem*>{&system}, model);
  Tape tape;
  const ParamVars pv = bind(tape, model.params, model.config, false);
  const ForwardVars fv = forward(tape, pv, batch, model.config, options);
  std::vector<Array> out;
  for (const Var& f : fv.features) out.push_back(f.value());
  return out;
}

}  // namespace tnet
