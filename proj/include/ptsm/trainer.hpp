#pragma once

#include <map>
#include <string>
#include <vector>

#include "ptsm/checkpoint.hpp"
#include "ptsm/losses.hpp"
#include "ptsm/metrics.hpp"
#include "ptsm/model.hpp"
#include "ptsm/synthdata.hpp"

namespace ptsm {

/// Everything one training run mutates: parameters (inside the model),
/// optimizer moments, counters, and the shuffle stream. Copyable, so a
/// best-validation snapshot is a plain copy.
struct TrainState {
  Model model;
  std::map<std::string, Tensor> adam_m, adam_v;  // keyed by parameter name
  i64 adam_t = 0;
  i64 epoch = 0;
  Rng data_rng;  // epoch shuffling; advances as training consumes it

  explicit TrainState(const PtsmConfig& cfg);

  /// Fresh stream for one gradient step's stochastic ops (dropout).
  Rng step_rng(i64 step) const;
};

/// One Adam step on the full objective. Mutates parameters, moments,
/// batch-norm running statistics, and the step counter.
LossReport train_step(TrainState& state, const std::vector<EegTrial>& batch);

struct EpochLog {
  i64 epoch = 0;
  LossReport losses;  // batch means of the raw terms, aggregates recomputed
  double val_accuracy = 0.0;
  double val_macro_f1 = 0.0;
};

/// Strictly-greater early stopping on validation accuracy: ties keep the
/// earlier epoch, and training stops once `patience` epochs pass without a
/// new best. Extracted from the fit loop so the rule is testable alone.
struct EarlyStopper {
  i64 patience = 10;
  i64 best_epoch = 0;
  double best_accuracy = -1.0;
  i64 since_best = 0;

  explicit EarlyStopper(i64 patience_) : patience(patience_) {}

  /// Returns true when this epoch sets a new best.
  bool observe(i64 epoch, double accuracy) {
    if (accuracy > best_accuracy) {
      best_accuracy = accuracy;
      best_epoch = epoch;
      since_best = 0;
      return true;
    }
    ++since_best;
    return false;
  }

  bool should_stop() const { return since_best >= patience; }
};

struct FitResult {
  TrainState state;  // best-validation snapshot
  std::vector<EpochLog> history;
  i64 best_epoch = 0;  // 0 when no epoch ran
  double best_val_accuracy = 0.0;
};

/// Full training loop with early stopping on validation accuracy
/// (ties keep the earlier epoch). Train and validation subjects must be
/// disjoint; both splits nonempty.
FitResult fit(const PtsmConfig& cfg, const std::vector<EegTrial>& train,
              const std::vector<EegTrial>& val);

/// Few-shot personalization: plain gradient steps on the task loss through
/// an eval-mode forward, updating only the personalized mask-generator
/// parameters. Everything else in the returned state is bit-identical.
TrainState adapt_few_shot(const TrainState& state, const std::vector<EegTrial>& support,
                          i64 steps = 50, double eta = 1e-3);

struct GridEntry {
  LossWeights weights;
  double val_accuracy = 0.0;
  double best_total = 0.0;  // training total loss at the best epoch
  i64 best_epoch = 0;
};

struct GridResult {
  PtsmConfig best_config;
  i64 best_index = -1;
  std::vector<GridEntry> table;
};

/// Exhaustive sweep over loss-weight settings; best by validation accuracy,
/// ties by lower training total, then by grid order.
GridResult grid_search(const PtsmConfig& base, const std::vector<LossWeights>& grid,
                       const std::vector<EegTrial>& train, const std::vector<EegTrial>& val);

MetricsReport evaluate_metrics(Model& m, const std::vector<EegTrial>& trials);
double evaluate_accuracy(Model& m, const std::vector<EegTrial>& trials);

/// Pack trials into a (batch, channels, samples) tensor, validating shapes.
Tensor batch_inputs(const std::vector<EegTrial>& batch, i64 channels, i64 samples);

// Checkpoint bridge: parameters, batch-norm statistics, Adam moments, and a
// metadata block (config echo, counters, shuffle-stream state).
Checkpoint state_to_checkpoint(TrainState& state,
                               const nlohmann::json& extra_meta = nlohmann::json::object());
TrainState state_from_checkpoint(const Checkpoint& ck);

}  // namespace ptsm
