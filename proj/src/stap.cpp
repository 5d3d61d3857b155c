#include "ptsm/stap.hpp"

#include "ptsm/errors.hpp"

namespace ptsm {

void Stap::init(ParamStore& ps, i64 channels, Rng& rng) {
  sp1.init(ps, "stap.personal.spatial.fc1", 2 * channels, 64, rng);
  sp2.init(ps, "stap.personal.spatial.fc2", 64, channels, rng);
  tp1.init(ps, "stap.personal.temporal.conv1", 1, 16, 7, 3, rng);
  tp2.init(ps, "stap.personal.temporal.conv2", 16, 1, 7, 3, rng);
  sc1.init(ps, "stap.common.spatial.fc1", 2 * channels, 64, rng);
  sc2.init(ps, "stap.common.spatial.fc2", 64, channels, rng);
  tc1.init(ps, "stap.common.temporal.conv1", 1, 16, 7, 3, rng);
  tc2.init(ps, "stap.common.temporal.conv2", 16, 1, 7, 3, rng);
  raw_alpha = ps.add("stap.fusion.alpha", Tensor({1}), false);  // sigmoid(0) = 0.5
  raw_beta = ps.add("stap.fusion.beta", Tensor({1}), false);
}

MaskVars Stap::forward(Tape& t, const std::vector<Var>& pv, Var x) const {
  const Shape& xs = t.shape(x);
  check_contract(xs.size() == 3, "mask generators expect (N, C, T) input");
  const i64 n = xs[0], c = xs[1], samples = xs[2];

  MaskVars mv;
  if (bypass) {
    mv.m_s_p = t.constant(Tensor::ones({n, c}));
    mv.m_t_p = t.constant(Tensor::ones({n, samples}));
    mv.m_s_c = mv.m_s_p;
    mv.m_t_c = mv.m_t_p;
    mv.m_s = mv.m_s_p;
    mv.m_t = mv.m_t_p;
    mv.alpha = t.constant_scalar(frozen_alpha);
    mv.beta = t.constant_scalar(frozen_beta);
    return mv;
  }

  // Per-channel summary for the spatial generators: mean and std over time.
  Var ch_mean = t.mean_axis(x, 2);                       // (N, C)
  Var ch_m2 = t.mean_axis(t.mul(x, x), 2);
  Var ch_var = t.clamp_min(t.sub(ch_m2, t.mul(ch_mean, ch_mean)), 0.0);
  Var ch_std = t.sqrt(t.shift(ch_var, 1e-12));
  Var spatial_in = t.concat_cols(ch_mean, ch_std);       // (N, 2C)

  // Channel-mean signal for the temporal generators.
  Var temporal_in = t.reshape(t.mean_axis(x, 1), {n, 1, samples});

  auto spatial_logits = [&](const Linear& a, const Linear& b) {
    return b(t, pv, t.elu(a(t, pv, spatial_in)));
  };
  auto temporal_logits = [&](const Conv1dLayer& a, const Conv1dLayer& b) {
    return t.reshape(b(t, pv, t.elu(a(t, pv, temporal_in))), {n, samples});
  };

  mv.m_s_p = t.sigmoid(spatial_logits(sp1, sp2));
  mv.m_t_p = t.sigmoid(temporal_logits(tp1, tp2));
  mv.m_s_c = t.sigmoid(spatial_logits(sc1, sc2));
  mv.m_t_c = t.sigmoid(temporal_logits(tc1, tc2));

  if (fusion_learnable) {
    mv.alpha = t.sigmoid(pv[static_cast<size_t>(raw_alpha)]);
    mv.beta = t.sigmoid(pv[static_cast<size_t>(raw_beta)]);
  } else {
    mv.alpha = t.constant_scalar(frozen_alpha);
    mv.beta = t.constant_scalar(frozen_beta);
  }
  Var one = t.constant_scalar(1.0);
  mv.m_t = t.add(t.mul(mv.alpha, mv.m_t_p), t.mul(t.sub(one, mv.alpha), mv.m_t_c));
  mv.m_s = t.add(t.mul(mv.beta, mv.m_s_p), t.mul(t.sub(one, mv.beta), mv.m_s_c));
  return mv;
}

Tensor apply_masks(const Tensor& x, const Tensor& m_s, const Tensor& m_t) {
  check_contract(x.rank() == 2, "apply_masks expects a (C, T) trial");
  const i64 c = x.dim(0), samples = x.dim(1);
  check_contract(m_s.numel() == c && m_t.numel() == samples,
                 "mask lengths must match the trial shape");
  Tensor out({c, samples});
  for (i64 i = 0; i < c; ++i)
    for (i64 j = 0; j < samples; ++j) out.at(i, j) = x.at(i, j) * m_s[i] * m_t[j];
  return out;
}

Tensor outer_flatten(const Tensor& m_t, const Tensor& m_s) {
  const i64 c = m_s.numel(), samples = m_t.numel();
  check_contract(c >= 1 && samples >= 1, "outer_flatten needs nonempty masks");
  Tensor out({c * samples});
  for (i64 i = 0; i < c; ++i)
    for (i64 j = 0; j < samples; ++j) out[i * samples + j] = m_s[i] * m_t[j];
  return out;
}

Var apply_masks_var(Tape& t, Var x, Var m_s, Var m_t) {
  const Shape& xs = t.shape(x);
  check_contract(xs.size() == 3, "apply_masks_var expects (N, C, T)");
  const i64 n = xs[0], c = xs[1], samples = xs[2];
  Var xm = t.mul(x, t.reshape(m_s, {n, c, 1}));
  return t.mul(xm, t.reshape(m_t, {n, 1, samples}));
}

Var outer_flatten_var(Tape& t, Var m_s, Var m_t) {
  const Shape& ss = t.shape(m_s);
  const Shape& ts = t.shape(m_t);
  check_contract(ss.size() == 2 && ts.size() == 2 && ss[0] == ts[0],
                 "outer_flatten_var expects batched masks");
  const i64 n = ss[0], c = ss[1], samples = ts[1];
  Var prod = t.mul(t.reshape(m_s, {n, c, 1}), t.reshape(m_t, {n, 1, samples}));
  return t.reshape(prod, {n, c * samples});
}

}  // namespace ptsm
