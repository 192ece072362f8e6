#pragma once

#include "tnet/model.hpp"

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tnet {

enum class ReferenceMode { fit, lstsq, mean, none };

std::string_view to_string(ReferenceMode mode);

struct TrainConfig {
  int batch_size = 16;
  double lr = 1e-3;
  double lr_factor = 0.5;
  double lr_min = 1e-7;
  int lr_patience = 15;
  int lr_warmup_steps = 100;
  int early_stopping_patience = 100;
  double gradient_clipping = 40.0;  // max global gradient norm
  double y_weight = 1.0;
  double neg_dy_weight = 10.0;
  int max_epochs = 100;
  std::uint64_t seed = 1;
  bool derivative = true;
  double train_size = 0.5;
  double val_size = 0.1;
  /// fit: least squares per element, identifiable compositions only; lstsq: minimum-norm
  /// least squares; mean: one shared per-atom value; none: zero.
  ReferenceMode reference_energies = ReferenceMode::fit;

  void validate() const;
};

/// Model and training settings read from one flat key-value file.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Every accepted key, sorted.
const std::vector<std::string>& valid_config_keys();

/// Unknown keys raise ConfigError listing the valid ones.
ExperimentConfig parse_experiment_config(const KeyValues& values);
ExperimentConfig read_experiment_config(const std::string& path);
KeyValues to_key_values(const ExperimentConfig& config);

/// Applies "key=value" strings on top of values; same key rules.
void apply_overrides(KeyValues& values, const std::vector<std::string>& overrides);

// ---------------------------------------------------------------------------
// Loss

struct LossTerms {
  double energy_mse = 0.0;
  double force_mse = 0.0;
  double total = 0.0;
};

/// y_weight * MSE(energy) + neg_dy_weight * MSE(force components); the force
/// term is dropped when derivative is false.
LossTerms compute_loss(const std::vector<double>& energy_pred, const std::vector<AtomicSystem>& labels,
                       const std::vector<Positions>& force_pred, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Optimiser pieces

struct AdamState {
  std::vector<ad::Array> m, v;
  long long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Throws ad::NumericError on non-finite gradients.
void adam_step(const std::vector<ad::Array*>& params, const std::vector<ad::Array>& grads, AdamState& state,
               double lr);

/// Scales grads in place to global L2 norm max_norm if it is exceeded; returns the norm before clipping.
double clip_gradients(std::vector<ad::Array>& grads, double max_norm);

struct TrainState {
  int epoch = 0;                  // completed epochs
  long long step = 0;             // completed optimiser steps
  double base_lr = 0.0;           // learning rate after plateau reductions
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int plateau_epochs = 0;         // non-improving epochs since the last reduction
  int stale_epochs = 0;           // non-improving epochs since the best one
  bool stopped = false;
  AdamState adam;
  std::string rng;                // serialised std::mt19937_64

  std::string serialize() const;
  static TrainState deserialize(const std::string& bytes);
};

/// Learning rate for the next optimiser step: linear warmup, then base_lr.
double lr_for_step(const TrainState& state, const TrainConfig& config);

/// Plateau and early-stopping bookkeeping after one validation; returns true if val improved.
bool lr_schedule(TrainState& state, double val_loss, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Training

struct BatchGradient {
  LossTerms loss;
  std::vector<ad::Array> grads;  // ModelParams::for_each order
  std::vector<double> energies;
  std::vector<Positions> forces;
};

/// Loss and parameter gradients for one batch. Force terms are differentiated
/// with the tape's dual sweep.
BatchGradient batch_gradient(const Model& model, const std::vector<const AtomicSystem*>& batch,
                             const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  long long step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_energy_mae = 0.0;  // meV
  double val_force_mae = 0.0;   // meV/Angstrom
  bool improved = false;
};

std::string format_record(const EpochRecord& r);
std::string metrics_header();

struct TrainOptions {
  std::string out_dir;     // best.ckpt, last.ckpt, metrics.tsv; empty writes nothing
  bool resume = false;     // continue from out_dir/last.ckpt
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Model best;
  Model last;
  TrainState state;
  std::vector<EpochRecord> history;  // epochs run by this call
};

/// Reference energies per config.reference_energies, from the training set only.
ReferenceEnergies reference_energies_for(const std::vector<AtomicSystem>& train_set, ReferenceMode mode);

TrainResult train(const ModelConfig& model_config, const TrainConfig& config, const std::vector<AtomicSystem>& train_set,
                  const std::vector<AtomicSystem>& val_set, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  std::size_t systems = 0;
  std::size_t force_components = 0;
  double energy_mae = 0.0;           // meV
  double energy_rmse = 0.0;          // meV
  double energy_mae_per_atom = 0.0;  // meV/atom
  double energy_rmse_per_atom = 0.0; // meV/atom
  double energy_mse = 0.0;           // meV^2
  double force_mae = 0.0;            // meV/Angstrom, per component
  double force_rmse = 0.0;           // meV/Angstrom, per component
  double force_vector_mae = 0.0;     // meV/Angstrom, per atom |dF|
  double force_vector_rmse = 0.0;
  double force_mse = 0.0;            // per component
};

Metrics compute_metrics(const std::vector<AtomicSystem>& labels, const std::vector<double>& energies,
                        const std::vector<Positions>& forces);

enum class GroupBy { none, total_charge, spin };
GroupBy parse_group_by(std::string_view text);

struct Evaluation {
  Metrics overall;
  std::map<std::string, Metrics> groups;  // "Q=+1", "S=0", ...
};

/// Throws DataError for elements the model was not trained on.
Evaluation evaluate(const Model& model, const std::vector<AtomicSystem>& systems, GroupBy group_by = GroupBy::none);

std::string group_label(const AtomicSystem& system, GroupBy group_by);

}  // namespace tnet
