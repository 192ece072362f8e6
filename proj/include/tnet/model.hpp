#pragma once

// Cartesian rank-2 tensor message passing with attribute scaling.
//
// Layouts on the tape: per-atom channel tensors are (N*C, 9) with the C rows of
// atom n contiguous; per-edge channel scalars are (E, C); positions are (N, 3).
//
// Embedding, per edge (i <- j) with unit vector r_ij and cutoff phi(r):
//   w = phi * W_r rbf(r) (4 heads)  times  z_ij = W_z [e(Z_i), e(Z_j)]
//   I_i = (sum_j wI + W_s e(Z_i)) Id
//   A_i = skew(u_i x v_i),  u_i = sum_j wU r_ij,  v_i = sum_j wV r_ij
//   S_i = sum_j wS (r_ij r_ij^T - Id/3)
//   X_i = sum_k g_k(|X_raw|^2) W_k P_k(X_raw)       k in {I, A, S}
//
// Interaction layer:
//   X' = X / (|X| + 1)
//   Y  = sum_k W1_k P_k(X')
//   M_i = sum_j phi (fI P_I(Y_j) + fA P_A(Y_j) + fS P_S(Y_j)),  f = W_f rbf(r)
//   Y' = (1 + lambda psi)(Y M + M Y),  Yn = Y' / (|Y'| + 1)
//   dX = sum_k W2_k P_k(Yn)
//   X <- X' + dX + (1 + lambda~ psi) dX dX
//
// Energy head: per atom [|I|^2, |A|^2, |S|^2] per channel -> linear, silu, linear;
// the sum over atoms plus per-element reference energies is the system energy.

#include "tnet/autodiff.hpp"
#include "tnet/data.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

namespace tnet {

enum class AttributeMode { none, total_charge, spin, per_atom_charge };

std::string_view to_string(AttributeMode mode);
AttributeMode parse_attribute_mode(std::string_view text);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  double cutoff_lower = 0.0;
  double cutoff_upper = 5.0;
  int num_channels = 128;
  int num_layers = 2;
  int num_rbf = 32;
  AttributeMode attribute_mode = AttributeMode::none;
  std::vector<double> lambda = {0.1, 0.1};        // one per layer
  std::vector<double> lambda_tilde = {0.1, 0.1};  // one per layer
  bool lambdas_learnable = false;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  /// Sets every layer's lambda and lambda~ to the same value.
  void set_shared_lambda(double lam, double lam_tilde);
};

inline constexpr int kNumElements = 119;  // embedding rows, indexed by Z

/// Parameter layout, shared by stored arrays (ad::Array) and tape handles (ad::Var).
template <typename T>
struct LayerSet {
  T radial_w, radial_b;             // (3C, K), (1, 3C)
  std::array<T, 3> mix_in;          // W1 per I/A/S, (C, C)
  std::array<T, 3> mix_out;         // W2 per I/A/S, (C, C)
  T lambda, lambda_tilde;           // (1, 1)
};

template <typename T>
struct ParamSet {
  T embedding;                      // (119, C)
  T pair_w, pair_b;                 // (C, 2C), (1, C)
  T radial_w, radial_b;             // (4C, K), (1, 4C)
  T self_w;                         // (C, C)
  T gate_w, gate_b;                 // (3C, C), (1, 3C)
  std::array<T, 3> mix;             // (C, C)
  std::vector<LayerSet<T>> layers;
  T head_w1, head_b1;               // (C, 3C), (1, C)
  T head_w2, head_b2;               // (1, C), (1, 1)

  /// Visits (name, member) in a fixed order.
  template <typename F>
  void for_each(F&& f) { visit(*this, f); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    static constexpr const char* kComp[3] = {"I", "A", "S"};
    f(std::string("embedding"), p.embedding);
    f(std::string("pair_w"), p.pair_w);
    f(std::string("pair_b"), p.pair_b);
    f(std::string("radial_w"), p.radial_w);
    f(std::string("radial_b"), p.radial_b);
    f(std::string("self_w"), p.self_w);
    f(std::string("gate_w"), p.gate_w);
    f(std::string("gate_b"), p.gate_b);
    for (int k = 0; k < 3; ++k) f(std::string("mix_") + kComp[k], p.mix[k]);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      auto& L = p.layers[l];
      f(pre + "radial_w", L.radial_w);
      f(pre + "radial_b", L.radial_b);
      for (int k = 0; k < 3; ++k) f(pre + "mix_in_" + kComp[k], L.mix_in[k]);
      for (int k = 0; k < 3; ++k) f(pre + "mix_out_" + kComp[k], L.mix_out[k]);
      f(pre + "lambda", L.lambda);
      f(pre + "lambda_tilde", L.lambda_tilde);
    }
    f(std::string("head_w1"), p.head_w1);
    f(std::string("head_b1"), p.head_b1);
    f(std::string("head_w2"), p.head_w2);
    f(std::string("head_b2"), p.head_b2);
  }
};

using LayerParams = LayerSet<ad::Array>;
using ModelParams = ParamSet<ad::Array>;
using LayerVars = LayerSet<ad::Var>;
using ParamVars = ParamSet<ad::Var>;

std::size_t parameter_count(const ModelParams& params);

/// True for names that are trained only when lambdas are learnable.
bool is_lambda_param(const std::string& name);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, N(0,1) embedding.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Everything needed to run the potential.
struct Model {
  ModelConfig config;
  ModelParams params;
  ReferenceEnergies reference;        // empty means zero for every element
  std::set<int> trained_elements;     // empty means unchecked
};

Model make_model(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Scalar helpers

double cosine_cutoff(double r, double lower, double upper);

struct RadialWeights {
  Eigen::VectorXd f_i, f_a, f_s;  // num_channels each
};
/// Layer radial filters at distance r, without the cutoff envelope.
RadialWeights radial_weights(double r, const ModelConfig& config, const LayerParams& layer);

// ---------------------------------------------------------------------------
// Batched evaluation on a tape

/// Several systems concatenated; atom indices are global.
struct Batch {
  std::vector<int> numbers;
  Positions positions;
  ad::IndexList system_of_atom;
  ad::IndexList centers, neighbors;  // directed edges, grouped by center
  std::vector<double> psi;           // attribute value per atom
  std::vector<double> reference;     // per atom reference energy
  std::vector<std::size_t> atom_offset;  // per system, plus a final total
  std::size_t num_systems() const { return atom_offset.empty() ? 0 : atom_offset.size() - 1; }
  std::size_t num_atoms() const { return numbers.size(); }
};

/// Validates systems, builds neighbour lists and attribute values.
Batch make_batch(const std::vector<const AtomicSystem*>& systems, const Model& model);
Batch make_batch(const std::vector<AtomicSystem>& systems, const Model& model);

/// Places parameters on the tape. Lambdas are leaves with gradients only when
/// learnable; other parameters follow requires_grad.
ParamVars bind(ad::Tape& tape, const ModelParams& params, const ModelConfig& config, bool requires_grad);

struct ForwardOptions {
  /// Test hook: flips the sign of the (0,1) and (1,0) entries of the vector seed.
  bool flip_skew_sign = false;
};

struct ForwardVars {
  ad::Var positions;                // (N, 3) leaf
  ad::Var atom_energy;              // (N, 1), including reference energies
  ad::Var energy;                   // (B, 1)
  std::vector<ad::Var> features;    // embedding output, then one per layer; (N*C, 9)
};

ForwardVars forward(ad::Tape& tape, const ParamVars& params, const Batch& batch, const ModelConfig& config,
                    const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Convenience wrappers

struct Prediction {
  std::vector<double> energies;
  std::vector<Positions> forces;
};

/// Energies and forces, one tape per chunk of systems.
Prediction predict(const Model& model, const std::vector<AtomicSystem>& systems, std::size_t chunk = 32,
                   const ForwardOptions& options = {});

/// Per-stage features of one system as (N*C, 9) arrays.
std::vector<ad::Array> features(const Model& model, const AtomicSystem& system, const ForwardOptions& options = {});

/// Throws DataError for elements outside trained_elements (when that is set).
void check_element_coverage(const Model& model, const std::vector<AtomicSystem>& systems);

// ---------------------------------------------------------------------------
// Checkpoints: "TNETCKPT", format version, config text, named parameter
// arrays with raw little-endian doubles, reference energies, trained
// elements, and an opaque trailer for training state.

void write_model(std::ostream& out, const Model& model, const std::string& trailer = {});
Model read_model(std::istream& in, std::string* trailer = nullptr);
void save_model(const std::string& path, const Model& model, const std::string& trailer = {});
Model load_model(const std::string& path, std::string* trailer = nullptr);

/// Flat key-value form of a config (17 significant digits), and back.
KeyValues config_to_key_values(const ModelConfig& config);
ModelConfig config_from_key_values(const KeyValues& values);

}  // namespace tnet
