#pragma once

#include <cstdint>
#include <string>

#include "ptsm/tensor.hpp"

namespace ptsm {

/// Weights and knobs for every loss term. Defaults are the reference
/// configuration; the grid search can override any of them.
struct LossWeights {
  double lambda_subj = 0.5;
  double lambda_decouple = 0.1;
  double lambda_mask = 0.1;
  double lambda_contrast = 0.1;
  double lambda_orth = 1.0;
  double lambda_cov = 1.0;
  double lambda_info = 0.01;
  double lambda_sparse_feat = 1e-4;
  double lambda_sim = 1.0;
  double lambda_sparse_mask = 1e-3;
  double lambda_size = 1.0;
  double lambda_contrast_task = 1.0;
  double lambda_contrast_subj = 1.0;
  double alpha_size = 0.5;  // target mean mask activation
  double tau = 0.5;         // contrastive temperature
  bool sim_use_abs = false;       // mask-similarity cosine is signed by default
  bool info_trace_clamp = true;   // cap each covariance trace at 1e3

  void validate() const;
};

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;

  void validate() const;
};

struct PtsmConfig {
  i64 channels = 8;
  i64 samples = 128;
  i64 n_classes = 2;
  i64 n_subjects = 6;
  i64 t_prime = 16;
  i64 d_f = 64;
  double dropout = 0.5;
  bool fusion_learnable = true;

  bool disable_stap = false;
  bool disable_personal_branch = false;
  bool disable_common_branch = false;
  bool disable_orth = false;
  bool disable_cov = false;
  bool disable_info = false;
  bool disable_sparse_feat = false;

  LossWeights loss;
  OptimConfig optim;

  i64 batch_size = 32;
  i64 max_epochs = 40;
  i64 patience = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

/// How the ablation flags rewrite the forward pass and the loss weights.
struct EffectiveWiring {
  LossWeights weights;        // λ's with disabled terms forced to zero
  bool bypass_masks = false;  // all-ones masks, generators unused
  bool fusion_learnable = true;
  double frozen_alpha = 0.5, frozen_beta = 0.5;  // fusion when not learnable
};

/// Resolve the flags into concrete wiring. Rejects contradictory flags
/// (both branches disabled without disable_stap).
EffectiveWiring apply_ablation(const PtsmConfig& cfg);

/// Strict JSON parse: every key optional (defaults apply), unknown keys are
/// ConfigError. Accepts the output of config_to_json.
PtsmConfig config_from_json(const std::string& text);

/// Canonical serialization: sorted keys, shortest round-trip floats. Two equal
/// configs always produce identical text.
std::string config_to_json(const PtsmConfig& c);

/// FNV-1a 64-bit hash of the canonical serialization; stamped into checkpoints
/// so a checkpoint can refuse a mismatched config.
std::uint64_t config_hash(const PtsmConfig& c);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace ptsm
