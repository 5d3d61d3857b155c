#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ptsm/trainer.hpp"

namespace ptsm {

/// A complete benchmark recipe: data generation knobs, the leave-subjects-out
/// plan, and the training configuration template (seed overridden per run).
struct BenchmarkSpec {
  SyntheticConfig data;
  SplitPlan plan;
  PtsmConfig config;
};

/// The desk-scale cohort with gains tuned so the ablation structure shows:
/// strong subject component, train on subjects 0–3, validate on 4, test on 5.
BenchmarkSpec default_benchmark();

struct VariantSpec {
  std::string name;  // table row label
  PtsmConfig config;
};

/// The eight comparison rows: full plus one flag flipped per row.
std::vector<VariantSpec> ablation_variants(const PtsmConfig& base);

struct DisentangleProbe {
  double mean_abs_cos = 0.0;  // batch mean |cos(f_task, f_subj)|
  double cov_ratio = 0.0;     // normalized cross-covariance
};

/// Task/subject features for a trial list (eval mode), batched internally.
std::pair<Tensor, Tensor> extract_features(Model& m, const std::vector<EegTrial>& trials);
DisentangleProbe disentanglement_probe(Model& m, const std::vector<EegTrial>& trials);

struct AblationRow {
  std::string name;
  double test_accuracy = 0.0;  // means over seeds
  double test_macro_f1 = 0.0;
  double test_sensitivity = 0.0;
  double test_specificity = 0.0;
  double val_accuracy = 0.0;
  double mean_abs_cos = 0.0;
  double cov_ratio = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::vector<double>> per_seed_accuracy;  // [variant][seed]
  std::vector<u64> seeds;
};

/// One dataset per seed, shared across all variants of that seed.
AblationResult run_ablation(const BenchmarkSpec& bench, const std::vector<u64>& seeds);

std::string ablation_csv(const AblationResult& result);

struct AdaptationOutcome {
  double pre_accuracy = 0.0;   // held-out trials of the adapted subject
  double post_accuracy = 0.0;
  bool only_personal_changed = true;  // bitwise audit over all state tensors
  std::vector<std::string> changed;   // names of tensors that differ
};

/// Train on the benchmark, then personalize on `support_per_class` trials per
/// class of the first test subject; evaluates on that subject's remaining
/// trials.
AdaptationOutcome run_adaptation(const BenchmarkSpec& bench, u64 seed, i64 support_per_class,
                                 i64 steps, double eta);

/// Names of checkpoint tensors that differ bitwise between two states.
std::vector<std::string> changed_tensor_names(TrainState& a, TrainState& b);

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0.0;
  i64 probes = 0;
  bool ok = false;
};

/// Finite-difference audit of every loss term plus the fully composed
/// objective, each over free leaf inputs. Probes every entry.
std::vector<GradcheckCase> run_loss_gradchecks(double tol, u64 seed);

/// Per-trial mask dump: branch masks, fused masks, fusion scalars, and the
/// flattened fused outer product.
nlohmann::json masks_json(Model& m, const std::vector<EegTrial>& trials);
void export_masks(Model& m, const std::vector<EegTrial>& trials, const std::string& path);

}  // namespace ptsm
