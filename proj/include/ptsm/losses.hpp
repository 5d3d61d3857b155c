#pragma once

#include <vector>

#include "ptsm/config.hpp"
#include "ptsm/tape.hpp"

namespace ptsm {

/// Degenerate-case counters for one loss evaluation. Per-call outputs, not
/// global state.
struct LossFlags {
  i64 ce_task_clamped = 0;   // true-class probabilities clamped at 1e-12
  i64 ce_subj_clamped = 0;
  i64 sim_zero_norm = 0;     // mask rows whose norm product underflowed the guard
  i64 orth_zero_norm = 0;
  bool ntxent_task_degenerate = false;  // no anchor had a positive
  bool ntxent_subj_degenerate = false;
  bool absent_class = false;            // set by metrics, carried for symmetry
};

/// One scalar per term plus the weighted aggregates.
struct LossReport {
  double task = 0, subj = 0;
  double sim = 0, sparse_mask = 0, size = 0;
  double orth = 0, cov = 0, info = 0, sparse_feat = 0;
  double contrast_task = 0, contrast_subj = 0;
  double decouple = 0, mask = 0, contrast = 0, total = 0;
  LossFlags flags;
};

// On-tape loss terms. Each plain overload below evaluates the identical graph
// on a scratch tape, so logged values match trained values bitwise.

/// Mean negative log true-class probability; probabilities below 1e-12 are
/// clamped (count reported through `clamped`).
Var cross_entropy_var(Tape& t, Var probs, const std::vector<i64>& labels, i64* clamped = nullptr);
/// Mean cosine similarity between the flattened branch masks (rows). Signed
/// unless use_abs; zero-norm rows contribute 0 via the 1e-12 guard.
Var mask_similarity_var(Tape& t, Var m_p, Var m_c, bool use_abs, i64* zero_norm = nullptr);
/// Mean over rows of ‖m_p‖₁ + ‖m_c‖₁.
Var mask_sparsity_var(Tape& t, Var m_p, Var m_c);
/// Mean over rows of |mean(m_p) − α| + |mean(m_c) − α|.
Var mask_size_var(Tape& t, Var m_p, Var m_c, double alpha_size);
/// Mean over rows of |cos(f_task, f_subj)|.
Var orthogonality_var(Tape& t, Var f_task, Var f_subj, i64* zero_norm = nullptr);
/// ‖Cov(F_task, F_subj)‖_F / (‖Cov(F_task)‖_F · ‖Cov(F_subj)‖_F + 1e-8).
Var covariance_decorrelation_var(Tape& t, Var f_task, Var f_subj);
/// −(tr Cov(F_task) + tr Cov(F_subj)), each trace optionally capped at 1e3.
Var info_retention_var(Tape& t, Var f_task, Var f_subj, bool trace_clamp);
/// Σ over the batch of ‖f_task‖₁ + ‖f_subj‖₁ (a sum, not a mean).
Var feature_sparsity_var(Tape& t, Var f_task, Var f_subj);
/// Supervised NT-Xent over cosine similarities; anchors without positives are
/// excluded, and a batch with none returns 0 with `degenerate` set.
Var nt_xent_var(Tape& t, Var embeddings, const std::vector<i64>& labels, double tau,
                bool* degenerate = nullptr);

// Plain evaluations (scratch-tape wrappers around the _var functions).
double cross_entropy(const Tensor& probs, const std::vector<i64>& labels, i64* clamped = nullptr);
double mask_similarity(const Tensor& m_p, const Tensor& m_c, bool use_abs,
                       i64* zero_norm = nullptr);
double mask_sparsity(const Tensor& m_p, const Tensor& m_c);
double mask_size(const Tensor& m_p, const Tensor& m_c, double alpha_size);
double orthogonality(const Tensor& f_task, const Tensor& f_subj, i64* zero_norm = nullptr);
double covariance_decorrelation(const Tensor& f_task, const Tensor& f_subj);
double info_retention(const Tensor& f_task, const Tensor& f_subj, bool trace_clamp);
double feature_sparsity(const Tensor& f_task, const Tensor& f_subj);
double nt_xent(const Tensor& embeddings, const std::vector<i64>& labels, double tau,
               bool* degenerate = nullptr);

/// Weighted aggregation of raw terms into decouple / mask / contrast and the
/// grand total. Throws NumericError naming the first non-finite component.
LossReport total_loss(const LossReport& raw, const LossWeights& w);

}  // namespace ptsm
