#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "ptsm/rng.hpp"
#include "ptsm/tensor.hpp"

namespace ptsm {

struct EegTrial {
  Tensor x;   // (channels, samples), z-scored per channel over the full set
  i64 y = 0;  // task label in [0, n_classes)
  i64 s = 0;  // subject id in [0, n_subjects)
};

/// Knobs for building a synthetic cohort.
struct SyntheticConfig {
  i64 channels = 8;
  i64 samples = 128;
  i64 n_classes = 2;
  i64 n_subjects = 6;
  i64 trials_per = 40;  // per (subject, class)
  double noise_sigma = 0.5;
  double task_gain = 1.0;
  double subject_gain = 1.0;  // base scale; per-subject gains are drawn around it
  u64 seed = 1;
};

/// The fully planted generative model: trials are
///   x = task_gain · loading ⊗ template_y + gain_s · signature_s ⊗ drift_s + noise.
/// Templates and drifts are unit-norm length-T waveforms, the loading and the
/// signatures unit-norm length-C vectors, so every component is reportable for
/// oracle checks.
struct SyntheticSpec {
  i64 channels = 0;
  i64 samples = 0;
  i64 n_classes = 0;
  i64 n_subjects = 0;
  i64 trials_per = 0;
  double noise_sigma = 0.0;
  double task_gain = 1.0;
  double subject_gain_base = 1.0;
  u64 seed = 1;

  std::vector<Tensor> templates;   // per class, (samples), unit norm, smoothed
  Tensor task_loading;             // (channels), spatially uniform, unit norm
  std::vector<Tensor> signatures;  // per subject, (channels), unit norm
  std::vector<Tensor> drifts;      // per subject, (samples), unit norm,
                                   // orthogonal to all templates and to constants
  std::vector<double> subject_gains;  // per subject

  void validate() const;
};

/// Draws templates/signatures/drifts for the given sizes, deterministically.
SyntheticSpec make_synthetic_spec(const SyntheticConfig& cfg);

/// The z-scoring applied to the raw trials, exposed so tests can invert it
/// and compare against the planted components exactly.
struct GeneratorReport {
  Tensor channel_mean;  // (channels)
  Tensor channel_std;   // (channels)
};

std::vector<EegTrial> generate(const SyntheticSpec& spec, GeneratorReport* report = nullptr);

struct SplitPlan {
  std::vector<i64> train_subjects;
  std::vector<i64> val_subjects;
  std::vector<i64> test_subjects;

  void validate() const;  // pairwise disjoint, ids non-negative
};

struct SplitResult {
  std::vector<EegTrial> train, val, test;
};

/// Partition by subject id; a trial whose subject is in no list is an error.
SplitResult split(const std::vector<EegTrial>& trials, const SplitPlan& plan);

/// On-disk dataset: trials plus the generation metadata sidecar.
struct Dataset {
  std::vector<EegTrial> trials;
  i64 channels = 0;
  i64 samples = 0;
  i64 n_classes = 0;
  i64 n_subjects = 0;
  nlohmann::json meta;  // generation metadata; echoed to/from the sidecar
};

Dataset make_dataset(const SyntheticSpec& spec, std::vector<EegTrial> trials);

/// Sidecar content: spec echo, seed, and the assumed noise model.
nlohmann::json synthetic_meta(const SyntheticSpec& spec);

/// Binary container ("EEGD"): magic, version byte, little-endian u32 header
/// (C, T, N, K, S), per-trial records (y, s as u32; x as little-endian f64),
/// CRC32 trailer. Metadata goes to a JSON sidecar at path + ".json".
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace ptsm
