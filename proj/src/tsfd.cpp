#include "ptsm/tsfd.hpp"

#include "ptsm/errors.hpp"

namespace ptsm {

void Tsfd::init(ParamStore& ps, i64 channels, i64 t_prime_, i64 d_f, i64 n_classes,
                i64 n_subjects, double dropout, Rng& rng) {
  t_prime = t_prime_;
  drop = dropout;
  conv1.init(ps, "encoder.conv1", channels, 32, 5, 2, rng);
  bn1.init(ps, "encoder.bn1", 32);
  conv2.init(ps, "encoder.conv2", 32, 64, 5, 2, rng);
  bn2.init(ps, "encoder.bn2", 64);
  conv3.init(ps, "encoder.conv3", 64, 128, 5, 2, rng);
  bn3.init(ps, "encoder.bn3", 128);
  sh1.init(ps, "encoder.shared.fc1", 128 * t_prime, 256, rng);
  sh2.init(ps, "encoder.shared.fc2", 256, 128, rng);
  task_head.init(ps, "head.task.fc", 128, d_f, rng);
  task_bn.init(ps, "head.task.bn", d_f);
  subj_head.init(ps, "head.subj.fc", 128, d_f, rng);
  subj_bn.init(ps, "head.subj.bn", d_f);
  task_cls1.init(ps, "cls.task.fc1", d_f, 64, rng);
  task_cls2.init(ps, "cls.task.fc2", 64, n_classes, rng);
  subj_cls1.init(ps, "cls.subj.fc1", d_f, 64, rng);
  subj_cls2.init(ps, "cls.subj.fc2", 64, n_subjects, rng);
  // Zeroed output layers make the initial class distributions exactly
  // uniform, so the starting cross-entropy is ln K by construction.
  ps.param(task_cls2.w).value.fill(0.0);
  ps.param(subj_cls2.w).value.fill(0.0);
}

Var Tsfd::encode_temporal(Tape& t, const std::vector<Var>& pv, Var x, Mode mode) {
  const Shape& xs = t.shape(x);
  check_contract(xs.size() == 3, "temporal encoder expects (N, C, T)");
  check_contract(xs[2] >= 5, "input length must be at least the kernel size");
  Var h = t.dropout(t.elu(bn1(t, pv, conv1(t, pv, x), mode)), drop, mode);
  h = t.dropout(t.elu(bn2(t, pv, conv2(t, pv, h), mode)), drop, mode);
  h = t.dropout(t.elu(bn3(t, pv, conv3(t, pv, h), mode)), drop, mode);
  return t.adaptive_avg_pool(h, t_prime);
}

Var Tsfd::encode_shared(Tape& t, const std::vector<Var>& pv, Var h, Mode mode) {
  const Shape& hs = t.shape(h);
  check_contract(hs.size() == 3 && hs[1] == 128 && hs[2] == t_prime,
                 "shared encoder expects (N, 128, T')");
  Var flat = t.reshape(h, {hs[0], 128 * t_prime});
  Var mid = t.dropout(t.elu(sh1(t, pv, flat)), drop, mode);
  return sh2(t, pv, mid);
}

Var Tsfd::project_task(Tape& t, const std::vector<Var>& pv, Var h, Mode mode) {
  return t.elu(task_bn(t, pv, task_head(t, pv, h), mode));
}

Var Tsfd::project_subj(Tape& t, const std::vector<Var>& pv, Var h, Mode mode) {
  return t.elu(subj_bn(t, pv, subj_head(t, pv, h), mode));
}

Var Tsfd::classify_task(Tape& t, const std::vector<Var>& pv, Var f, Mode mode) {
  Var hid = t.dropout(t.relu(task_cls1(t, pv, f)), drop, mode);
  return t.softmax_rows(task_cls2(t, pv, hid));
}

Var Tsfd::classify_subj(Tape& t, const std::vector<Var>& pv, Var f, Mode mode) {
  Var hid = t.dropout(t.relu(subj_cls1(t, pv, f)), drop, mode);
  return t.softmax_rows(subj_cls2(t, pv, hid));
}

}  // namespace ptsm
