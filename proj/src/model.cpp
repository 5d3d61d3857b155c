#include "ptsm/model.hpp"

#include <string>

#include "ptsm/errors.hpp"
#include "ptsm/nn.hpp"

namespace ptsm {

Model::Model(const PtsmConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng init_rng = Rng(cfg_.seed).split(1);

  const EffectiveWiring wiring = apply_ablation(cfg_);
  stap_.bypass = wiring.bypass_masks;
  stap_.fusion_learnable = wiring.fusion_learnable;
  stap_.frozen_alpha = wiring.frozen_alpha;
  stap_.frozen_beta = wiring.frozen_beta;

  // Parameters are registered even when an ablation bypasses them, so the
  // checkpoint layout and optimizer state are identical across variants.
  stap_.init(ps_, cfg_.channels, init_rng);
  tsfd_.init(ps_, cfg_.channels, cfg_.t_prime, cfg_.d_f, cfg_.n_classes,
             cfg_.n_subjects, cfg_.dropout, init_rng);
}

ForwardVars Model::forward(Tape& t, const std::vector<Var>& pv, Var x, Mode mode) {
  check_contract(t.shape(x).size() == 3 && t.shape(x)[1] == cfg_.channels &&
                     t.shape(x)[2] == cfg_.samples,
                 "model forward expects input shaped (batch, channels, samples)");
  ForwardVars fv;
  fv.masks = stap_.forward(t, pv, x);
  fv.x_masked = apply_masks_var(t, x, fv.masks.m_s, fv.masks.m_t);
  fv.h_temp = tsfd_.encode_temporal(t, pv, fv.x_masked, mode);
  fv.h_shared = tsfd_.encode_shared(t, pv, fv.h_temp, mode);
  fv.f_task = tsfd_.project_task(t, pv, fv.h_shared, mode);
  fv.f_subj = tsfd_.project_subj(t, pv, fv.h_shared, mode);
  fv.p_task = tsfd_.classify_task(t, pv, fv.f_task, mode);
  fv.p_subj = tsfd_.classify_subj(t, pv, fv.f_subj, mode);
  if (!stap_.bypass) {
    fv.m_p_flat = outer_flatten_var(t, fv.masks.m_s_p, fv.masks.m_t_p);
    fv.m_c_flat = outer_flatten_var(t, fv.masks.m_s_c, fv.masks.m_t_c);
  }
  return fv;
}

Var Model::task_branch(Tape& t, const std::vector<Var>& pv, Var x, Mode mode) {
  check_contract(t.shape(x).size() == 3 && t.shape(x)[1] == cfg_.channels &&
                     t.shape(x)[2] == cfg_.samples,
                 "task branch expects input shaped (batch, channels, samples)");
  MaskVars mv = stap_.forward(t, pv, x);
  Var xm = apply_masks_var(t, x, mv.m_s, mv.m_t);
  Var h = tsfd_.encode_temporal(t, pv, xm, mode);
  Var hs = tsfd_.encode_shared(t, pv, h, mode);
  Var f = tsfd_.project_task(t, pv, hs, mode);
  return tsfd_.classify_task(t, pv, f, mode);
}

Tensor Model::predict_probs(const Tensor& x) {
  check_contract(x.rank() == 3 && x.dim(1) == cfg_.channels && x.dim(2) == cfg_.samples,
                 "predict expects input shaped (batch, channels, samples)");
  Tape t;
  auto pv = make_leaves(t, ps_);
  Var p = task_branch(t, pv, t.constant(x), Mode::Eval);
  return t.value(p);
}

std::vector<i64> Model::predict(const Tensor& x) {
  Tensor probs = predict_probs(x);
  const i64 n = probs.dim(0);
  const i64 k = probs.dim(1);
  std::vector<i64> out(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) {
    i64 best = 0;
    for (i64 j = 1; j < k; ++j) {
      if (probs.at(i, j) > probs.at(i, best)) best = j;
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

namespace {

Tensor as_batch1(const Tensor& x) {
  Shape s;
  s.push_back(1);
  for (i64 d = 0; d < x.rank(); ++d) s.push_back(x.dim(d));
  return x.reshaped(s);
}

Tensor drop_batch1(const Tensor& x) {
  check_contract(x.rank() >= 2 && x.dim(0) == 1, "expected a batch of one");
  Shape s;
  for (i64 d = 1; d < x.rank(); ++d) s.push_back(x.dim(d));
  return x.reshaped(s);
}

}  // namespace

MaskSet Model::generate_masks(const Tensor& x) {
  check_contract(x.rank() == 2 && x.dim(0) == cfg_.channels && x.dim(1) == cfg_.samples,
                 "generate_masks expects one trial shaped (channels, samples)");
  Tape t;
  auto pv = make_leaves(t, ps_);
  MaskVars mv = stap_.forward(t, pv, t.constant(as_batch1(x)));
  MaskSet ms;
  ms.m_s_p = drop_batch1(t.value(mv.m_s_p));
  ms.m_t_p = drop_batch1(t.value(mv.m_t_p));
  ms.m_s_c = drop_batch1(t.value(mv.m_s_c));
  ms.m_t_c = drop_batch1(t.value(mv.m_t_c));
  ms.m_s = drop_batch1(t.value(mv.m_s));
  ms.m_t = drop_batch1(t.value(mv.m_t));
  ms.alpha = t.value(mv.alpha).item();
  ms.beta = t.value(mv.beta).item();
  return ms;
}

Tensor Model::encode_temporal_one(const Tensor& x, Mode mode) {
  check_contract(x.rank() == 2, "encode_temporal_one expects (channels, samples)");
  Tape t;
  auto pv = make_leaves(t, ps_);
  Var h = tsfd_.encode_temporal(t, pv, t.constant(as_batch1(x)), mode);
  return drop_batch1(t.value(h));
}

Tensor Model::encode_shared_one(const Tensor& h, Mode mode) {
  check_contract(h.rank() == 2, "encode_shared_one expects (features, pooled_len)");
  Tape t;
  auto pv = make_leaves(t, ps_);
  Var z = tsfd_.encode_shared(t, pv, t.constant(as_batch1(h)), mode);
  return drop_batch1(t.value(z));
}

std::pair<Tensor, Tensor> Model::project_one(const Tensor& h, Mode mode) {
  check_contract(h.rank() == 1, "project_one expects a shared feature vector");
  Tape t;
  auto pv = make_leaves(t, ps_);
  Var hb = t.constant(as_batch1(h));
  Var ft = tsfd_.project_task(t, pv, hb, mode);
  Var fs = tsfd_.project_subj(t, pv, hb, mode);
  return {drop_batch1(t.value(ft)), drop_batch1(t.value(fs))};
}

Tensor Model::classify_one(const Tensor& f, bool task_branch, Mode mode) {
  check_contract(f.rank() == 1, "classify_one expects a feature vector");
  Tape t;
  auto pv = make_leaves(t, ps_);
  Var fb = t.constant(as_batch1(f));
  Var p = task_branch ? tsfd_.classify_task(t, pv, fb, mode)
                      : tsfd_.classify_subj(t, pv, fb, mode);
  return drop_batch1(t.value(p));
}

std::vector<std::pair<std::string, Tensor*>> Model::state_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto push_bn = [&out](const std::string& prefix, BnState& st) {
    out.emplace_back(prefix + ".running_mean", &st.running_mean);
    out.emplace_back(prefix + ".running_var", &st.running_var);
  };
  push_bn("encoder.bn1", tsfd_.bn1.state);
  push_bn("encoder.bn2", tsfd_.bn2.state);
  push_bn("encoder.bn3", tsfd_.bn3.state);
  push_bn("head.task.bn", tsfd_.task_bn.state);
  push_bn("head.subj.bn", tsfd_.subj_bn.state);
  return out;
}

}  // namespace ptsm
