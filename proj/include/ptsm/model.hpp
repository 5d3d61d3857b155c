#pragma once

#include <utility>
#include <vector>

#include "ptsm/config.hpp"
#include "ptsm/stap.hpp"
#include "ptsm/tsfd.hpp"

namespace ptsm {

/// Every tape handle the loss assembly needs from one batched forward pass.
struct ForwardVars {
  MaskVars masks;
  Var x_masked;            // (N, C, T)
  Var h_temp;              // (N, 128, T')
  Var h_shared;            // (N, 128)
  Var f_task, f_subj;      // (N, d_f)
  Var p_task, p_subj;      // (N, K), (N, S)
  Var m_p_flat, m_c_flat;  // (N, C·T) flattened branch masks; invalid under bypass
};

/// The full architecture: dual-branch masking in front of the encoder, shared
/// latent, disentangled heads, and the two classifiers.
class Model {
 public:
  explicit Model(const PtsmConfig& cfg);

  /// Batched training/eval forward building the complete graph.
  ForwardVars forward(Tape& t, const std::vector<Var>& pv, Var x, Mode mode);

  /// Masks through task probabilities only — the prediction/adaptation path.
  Var task_branch(Tape& t, const std::vector<Var>& pv, Var x, Mode mode);

  /// Deterministic eval-mode pass through the task branch only; subject-side
  /// parameters are never read.
  Tensor predict_probs(const Tensor& x);      // (N, C, T) -> (N, K)
  std::vector<i64> predict(const Tensor& x);  // argmax rows, ties to lowest index

  // Single-trial views for the CLI and oracle tests.
  MaskSet generate_masks(const Tensor& x);  // (C, T) -> all six masks
  Tensor encode_temporal_one(const Tensor& x, Mode mode);  // (C, T) -> (128, T')
  Tensor encode_shared_one(const Tensor& h, Mode mode);    // (128, T') -> (128)
  std::pair<Tensor, Tensor> project_one(const Tensor& h, Mode mode);  // task, subj
  Tensor classify_one(const Tensor& f, bool task_branch, Mode mode);  // probabilities

  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const PtsmConfig& config() const { return cfg_; }
  Stap& stap() { return stap_; }
  Tsfd& tsfd() { return tsfd_; }

  /// Non-parameter state (batch-norm running statistics) for checkpointing.
  std::vector<std::pair<std::string, Tensor*>> state_tensors();

 private:
  PtsmConfig cfg_;
  ParamStore ps_;
  Stap stap_;
  Tsfd tsfd_;
};

}  // namespace ptsm
