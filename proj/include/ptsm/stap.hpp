#pragma once

#include "ptsm/nn.hpp"

namespace ptsm {

/// All six masks for one trial: the two generator branches plus the convex
/// fusion of each pair. Spatial masks have length C, temporal length T.
struct MaskSet {
  Tensor m_s_p, m_t_p;  // personalized branch
  Tensor m_s_c, m_t_c;  // common branch
  Tensor m_s, m_t;      // fused
  double alpha = 0.5, beta = 0.5;
};

/// Batched on-tape masks: spatial (N, C), temporal (N, T).
struct MaskVars {
  Var m_s_p, m_t_p, m_s_c, m_t_c, m_s, m_t;
  Var alpha, beta;  // scalars; constants when fusion is frozen
};

/// Dual-branch spatio-temporal mask module. Each branch conditions on the
/// trial itself: spatial generators see per-channel mean/std summaries,
/// temporal generators see the channel-mean signal.
struct Stap {
  Linear sp1, sp2;       // personalized spatial MLP: 2C -> 64 -> C
  Conv1dLayer tp1, tp2;  // personalized temporal convs: 1 -> 16 -> 1, kernel 7
  Linear sc1, sc2;       // common spatial
  Conv1dLayer tc1, tc2;  // common temporal
  int raw_alpha = -1, raw_beta = -1;  // sigmoid-reparameterized fusion scalars

  // Effective wiring, rewritten by ablation flags before training.
  bool bypass = false;  // all-ones masks, generators unused
  bool fusion_learnable = true;
  double frozen_alpha = 0.5, frozen_beta = 0.5;

  void init(ParamStore& ps, i64 channels, Rng& rng);
  /// x (N, C, T) -> all six masks on the tape.
  MaskVars forward(Tape& t, const std::vector<Var>& pv, Var x) const;
};

/// x ⊙ m_s ⊙ m_t for one trial: out[c][t] = x[c][t] · m_s[c] · m_t[t].
Tensor apply_masks(const Tensor& x, const Tensor& m_s, const Tensor& m_t);

/// Flattened outer product: entry c·T + t = m_s[c] · m_t[t], length C·T.
Tensor outer_flatten(const Tensor& m_t, const Tensor& m_s);

/// Batched on-tape counterparts.
Var apply_masks_var(Tape& t, Var x, Var m_s, Var m_t);  // (N,C,T)
Var outer_flatten_var(Tape& t, Var m_s, Var m_t);       // (N, C·T)

}  // namespace ptsm
