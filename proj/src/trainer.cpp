#include "ptsm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <utility>

#include "ptsm/errors.hpp"
#include "ptsm/nn.hpp"

namespace ptsm {

TrainState::TrainState(const PtsmConfig& cfg)
    : model(cfg), data_rng(Rng(cfg.seed).split(2)) {
  ParamStore& ps = model.params();
  for (i64 i = 0; i < ps.count(); ++i) {
    const Param& p = ps.param(i);
    adam_m.emplace(p.name, Tensor(p.value.shape()));
    adam_v.emplace(p.name, Tensor(p.value.shape()));
  }
}

Rng TrainState::step_rng(i64 step) const {
  return Rng(model.config().seed).split(3).split(static_cast<u64>(step));
}

Tensor batch_inputs(const std::vector<EegTrial>& batch, i64 channels, i64 samples) {
  check_contract(!batch.empty(), "batch must be nonempty");
  Tensor x(Shape{static_cast<i64>(batch.size()), channels, samples});
  const i64 stride = channels * samples;
  for (size_t b = 0; b < batch.size(); ++b) {
    const Tensor& tx = batch[b].x;
    check_contract(tx.rank() == 2 && tx.dim(0) == channels && tx.dim(1) == samples,
                   "trial shape does not match the model configuration");
    for (i64 i = 0; i < stride; ++i) x[static_cast<i64>(b) * stride + i] = tx[i];
  }
  return x;
}

namespace {

void merge_flags(LossFlags& into, const LossFlags& from) {
  into.ce_task_clamped += from.ce_task_clamped;
  into.ce_subj_clamped += from.ce_subj_clamped;
  into.sim_zero_norm += from.sim_zero_norm;
  into.orth_zero_norm += from.orth_zero_norm;
  into.ntxent_task_degenerate = into.ntxent_task_degenerate || from.ntxent_task_degenerate;
  into.ntxent_subj_degenerate = into.ntxent_subj_degenerate || from.ntxent_subj_degenerate;
  into.absent_class = into.absent_class || from.absent_class;
}

void accumulate_raw(LossReport& into, const LossReport& from) {
  into.task += from.task;
  into.subj += from.subj;
  into.sim += from.sim;
  into.sparse_mask += from.sparse_mask;
  into.size += from.size;
  into.orth += from.orth;
  into.cov += from.cov;
  into.info += from.info;
  into.sparse_feat += from.sparse_feat;
  into.contrast_task += from.contrast_task;
  into.contrast_subj += from.contrast_subj;
  merge_flags(into.flags, from.flags);
}

void scale_raw(LossReport& r, double c) {
  r.task *= c;
  r.subj *= c;
  r.sim *= c;
  r.sparse_mask *= c;
  r.size *= c;
  r.orth *= c;
  r.cov *= c;
  r.info *= c;
  r.sparse_feat *= c;
  r.contrast_task *= c;
  r.contrast_subj *= c;
}

struct BatchLabels {
  std::vector<i64> y, s;
};

BatchLabels batch_labels(const std::vector<EegTrial>& batch, const PtsmConfig& cfg) {
  BatchLabels out;
  out.y.reserve(batch.size());
  out.s.reserve(batch.size());
  for (const EegTrial& tr : batch) {
    check_contract(tr.y >= 0 && tr.y < cfg.n_classes, "trial label out of range");
    check_contract(tr.s >= 0 && tr.s < cfg.n_subjects, "trial subject out of range");
    out.y.push_back(tr.y);
    out.s.push_back(tr.s);
  }
  return out;
}

}  // namespace

LossReport train_step(TrainState& state, const std::vector<EegTrial>& batch) {
  const PtsmConfig& cfg = state.model.config();
  const EffectiveWiring wiring = apply_ablation(cfg);
  const LossWeights& w = wiring.weights;
  if (batch.size() < 2) {
    if (w.lambda_cov != 0.0 || w.lambda_info != 0.0)
      throw ContractViolation("covariance losses need a batch of at least 2 trials");
    throw ContractViolation("training needs a batch of at least 2 trials (batch statistics)");
  }
  const BatchLabels lab = batch_labels(batch, cfg);
  const Tensor xb = batch_inputs(batch, cfg.channels, cfg.samples);

  Tape t(state.step_rng(state.adam_t));
  std::vector<Var> pv = make_leaves(t, state.model.params());
  ForwardVars fv = state.model.forward(t, pv, t.constant(xb), Mode::Train);

  LossReport raw;
  Var v_task = cross_entropy_var(t, fv.p_task, lab.y, &raw.flags.ce_task_clamped);
  Var v_subj = cross_entropy_var(t, fv.p_subj, lab.s, &raw.flags.ce_subj_clamped);
  Var v_orth = orthogonality_var(t, fv.f_task, fv.f_subj, &raw.flags.orth_zero_norm);
  Var v_cov = covariance_decorrelation_var(t, fv.f_task, fv.f_subj);
  Var v_info = info_retention_var(t, fv.f_task, fv.f_subj, w.info_trace_clamp);
  Var v_sfeat = feature_sparsity_var(t, fv.f_task, fv.f_subj);
  Var v_ct = nt_xent_var(t, fv.f_task, lab.y, w.tau, &raw.flags.ntxent_task_degenerate);
  Var v_cs = nt_xent_var(t, fv.f_subj, lab.s, w.tau, &raw.flags.ntxent_subj_degenerate);

  Var v_mask_group;
  if (fv.m_p_flat.valid()) {
    Var v_sim = mask_similarity_var(t, fv.m_p_flat, fv.m_c_flat, w.sim_use_abs,
                                    &raw.flags.sim_zero_norm);
    Var v_smask = mask_sparsity_var(t, fv.m_p_flat, fv.m_c_flat);
    Var v_size = mask_size_var(t, fv.m_p_flat, fv.m_c_flat, w.alpha_size);
    raw.sim = t.value(v_sim).item();
    raw.sparse_mask = t.value(v_smask).item();
    raw.size = t.value(v_size).item();
    v_mask_group = t.add(t.add(t.scale(v_sim, w.lambda_sim), t.scale(v_smask, w.lambda_sparse_mask)),
                         t.scale(v_size, w.lambda_size));
  } else {
    v_mask_group = t.constant_scalar(0.0);
  }

  raw.task = t.value(v_task).item();
  raw.subj = t.value(v_subj).item();
  raw.orth = t.value(v_orth).item();
  raw.cov = t.value(v_cov).item();
  raw.info = t.value(v_info).item();
  raw.sparse_feat = t.value(v_sfeat).item();
  raw.contrast_task = t.value(v_ct).item();
  raw.contrast_subj = t.value(v_cs).item();

  // Aggregation (and the non-finite abort) happens before the backward pass.
  LossReport report = total_loss(raw, w);

  Var v_dec = t.add(t.add(t.add(t.scale(v_orth, w.lambda_orth), t.scale(v_cov, w.lambda_cov)),
                          t.scale(v_info, w.lambda_info)),
                    t.scale(v_sfeat, w.lambda_sparse_feat));
  Var v_con = t.add(t.scale(v_ct, w.lambda_contrast_task), t.scale(v_cs, w.lambda_contrast_subj));
  Var v_total = t.add(
      t.add(t.add(t.add(v_task, t.scale(v_subj, w.lambda_subj)), t.scale(v_dec, w.lambda_decouple)),
            t.scale(v_mask_group, w.lambda_mask)),
      t.scale(v_con, w.lambda_contrast));

  t.backward(v_total);

  state.adam_t += 1;
  const OptimConfig& oc = cfg.optim;
  const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(state.adam_t));
  const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(state.adam_t));
  const double decay_factor = 1.0 - oc.lr * oc.weight_decay;
  ParamStore& ps = state.model.params();
  for (i64 i = 0; i < ps.count(); ++i) {
    Param& p = ps.param(i);
    const Tensor g = t.grad(pv[static_cast<size_t>(i)]);
    Tensor& m = state.adam_m.at(p.name);
    Tensor& v = state.adam_v.at(p.name);
    for (i64 j = 0; j < p.value.numel(); ++j) {
      const double gj = g[j];
      m[j] = oc.beta1 * m[j] + (1.0 - oc.beta1) * gj;
      v[j] = oc.beta2 * v[j] + (1.0 - oc.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      // Decoupled decay first (multiplicative, so the zero-gradient decay
      // invariant is exact), then the Adam step.
      if (p.decay) p.value[j] *= decay_factor;
      p.value[j] -= oc.lr * (mhat / (std::sqrt(vhat) + oc.eps));
    }
  }
  return report;
}

MetricsReport evaluate_metrics(Model& m, const std::vector<EegTrial>& trials) {
  check_contract(!trials.empty(), "evaluation needs at least one trial");
  const PtsmConfig& cfg = m.config();
  std::vector<i64> preds, labels;
  preds.reserve(trials.size());
  labels.reserve(trials.size());
  const size_t chunk = 64;  // bounds the eval graph's memory footprint
  for (size_t start = 0; start < trials.size(); start += chunk) {
    const size_t end = std::min(trials.size(), start + chunk);
    std::vector<EegTrial> part(trials.begin() + static_cast<std::ptrdiff_t>(start),
                               trials.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor xb = batch_inputs(part, cfg.channels, cfg.samples);
    for (i64 p : m.predict(xb)) preds.push_back(p);
    for (const EegTrial& tr : part) labels.push_back(tr.y);
  }
  return compute_metrics(preds, labels, cfg.n_classes);
}

double evaluate_accuracy(Model& m, const std::vector<EegTrial>& trials) {
  return evaluate_metrics(m, trials).accuracy;
}

FitResult fit(const PtsmConfig& cfg, const std::vector<EegTrial>& train,
              const std::vector<EegTrial>& val) {
  cfg.validate();
  check_contract(!train.empty(), "training split is empty");
  check_contract(!val.empty(), "validation split is empty");
  check_contract(train.size() >= 2, "training split needs at least 2 trials");
  std::set<i64> train_subjects, val_subjects;
  for (const EegTrial& tr : train) train_subjects.insert(tr.s);
  for (const EegTrial& tr : val) val_subjects.insert(tr.s);
  for (i64 s : val_subjects)
    check_contract(train_subjects.count(s) == 0,
                   "train and validation subject sets must be disjoint");

  const EffectiveWiring wiring = apply_ablation(cfg);

  FitResult res{TrainState(cfg), {}, 0, 0.0};
  if (cfg.max_epochs == 0) {
    res.best_val_accuracy = evaluate_accuracy(res.state.model, val);
    return res;
  }

  TrainState state = res.state;
  TrainState best = state;
  EarlyStopper stopper(cfg.patience);

  std::vector<i64> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<i64>(i);

  for (i64 e = 1; e <= cfg.max_epochs; ++e) {
    state.epoch = e;
    for (i64 i = static_cast<i64>(order.size()) - 1; i > 0; --i) {
      const i64 j = static_cast<i64>(state.data_rng.uniform_int(static_cast<u64>(i + 1)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    LossReport sum;
    i64 n_batches = 0;
    const i64 n = static_cast<i64>(train.size());
    for (i64 start = 0; start < n; start += cfg.batch_size) {
      const i64 end = std::min(n, start + cfg.batch_size);
      if (end - start < 2) continue;  // batch statistics need at least 2
      std::vector<EegTrial> batch;
      batch.reserve(static_cast<size_t>(end - start));
      for (i64 i = start; i < end; ++i)
        batch.push_back(train[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      accumulate_raw(sum, train_step(state, batch));
      ++n_batches;
    }
    check_contract(n_batches >= 1, "every batch was dropped; shrink batch_size or add trials");

    LossReport epoch_raw = sum;
    scale_raw(epoch_raw, 1.0 / static_cast<double>(n_batches));
    LossReport epoch_rep = total_loss(epoch_raw, wiring.weights);
    epoch_rep.flags = sum.flags;

    const MetricsReport vm = evaluate_metrics(state.model, val);
    res.history.push_back({e, epoch_rep, vm.accuracy, vm.macro_f1});

    if (stopper.observe(e, vm.accuracy)) best = state;
    if (stopper.should_stop()) break;
  }

  res.state = std::move(best);
  res.best_epoch = stopper.best_epoch;
  res.best_val_accuracy = stopper.best_accuracy;
  return res;
}

TrainState adapt_few_shot(const TrainState& state, const std::vector<EegTrial>& support,
                          i64 steps, double eta) {
  check_contract(!support.empty(), "adaptation needs a nonempty support set");
  check_contract(steps >= 0, "adaptation steps must be non-negative");
  check_contract(eta >= 0.0 && std::isfinite(eta), "adaptation rate must be finite");

  TrainState out = state;
  const PtsmConfig& cfg = out.model.config();
  std::vector<i64> y;
  y.reserve(support.size());
  for (const EegTrial& tr : support) {
    check_contract(tr.y >= 0 && tr.y < cfg.n_classes, "support label out of range");
    y.push_back(tr.y);
  }
  const Tensor xb = batch_inputs(support, cfg.channels, cfg.samples);
  const std::vector<int> updatable = out.model.params().with_prefix("stap.personal.");

  for (i64 step = 0; step < steps; ++step) {
    // Eval-mode forward: batch-norm running statistics and dropout state stay
    // untouched, so the only tensors that can change are the ones updated.
    Tape t;
    std::vector<Var> pv = make_leaves(t, out.model.params());
    Var probs = out.model.task_branch(t, pv, t.constant(xb), Mode::Eval);
    Var loss = cross_entropy_var(t, probs, y, nullptr);
    const double lv = t.value(loss).item();
    if (!std::isfinite(lv)) throw NumericError("task", "adaptation loss is not finite");
    t.backward(loss);
    ParamStore& ps = out.model.params();
    for (int idx : updatable) {
      Param& p = ps.param(idx);
      const Tensor g = t.grad(pv[static_cast<size_t>(idx)]);
      p.value.add_scaled(g, -eta);
    }
  }
  return out;
}

GridResult grid_search(const PtsmConfig& base, const std::vector<LossWeights>& grid,
                       const std::vector<EegTrial>& train, const std::vector<EegTrial>& val) {
  check_contract(!grid.empty(), "grid must be nonempty");
  GridResult res;
  double best_acc = -1.0;
  double best_total = 0.0;
  for (size_t i = 0; i < grid.size(); ++i) {
    PtsmConfig cfg = base;
    cfg.loss = grid[i];
    FitResult fr = fit(cfg, train, val);
    double total = std::numeric_limits<double>::infinity();
    if (fr.best_epoch >= 1)
      total = fr.history[static_cast<size_t>(fr.best_epoch - 1)].losses.total;
    res.table.push_back({grid[i], fr.best_val_accuracy, total, fr.best_epoch});
    const bool better = fr.best_val_accuracy > best_acc ||
                        (fr.best_val_accuracy == best_acc && total < best_total);
    if (better) {
      best_acc = fr.best_val_accuracy;
      best_total = total;
      res.best_index = static_cast<i64>(i);
      res.best_config = cfg;
    }
  }
  return res;
}

Checkpoint state_to_checkpoint(TrainState& st, const nlohmann::json& extra_meta) {
  Checkpoint ck;
  const PtsmConfig& cfg = st.model.config();
  ck.config_hash = config_hash(cfg);
  ParamStore& ps = st.model.params();
  for (i64 i = 0; i < ps.count(); ++i) {
    const Param& p = ps.param(i);
    ck.add(p.name, p.value);
  }
  for (const auto& [name, tensor] : st.model.state_tensors()) ck.add(name, *tensor);
  for (i64 i = 0; i < ps.count(); ++i) {
    const Param& p = ps.param(i);
    ck.add("adam.m." + p.name, st.adam_m.at(p.name));
    ck.add("adam.v." + p.name, st.adam_v.at(p.name));
  }
  ck.meta["config"] = nlohmann::json::parse(config_to_json(cfg));
  ck.meta["epoch"] = st.epoch;
  ck.meta["adam_t"] = st.adam_t;
  ck.meta["data_rng"] = st.data_rng.serialize();
  for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) ck.meta[it.key()] = it.value();
  return ck;
}

TrainState state_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("config"))
    throw DatasetError(DatasetError::Kind::InvalidField, "checkpoint metadata lacks a config");
  PtsmConfig cfg;
  try {
    cfg = config_from_json(ck.meta.at("config").dump());
  } catch (const ConfigError& e) {
    throw DatasetError(DatasetError::Kind::InvalidField,
                       std::string("checkpoint config is invalid: ") + e.what());
  }
  if (config_hash(cfg) != ck.config_hash)
    throw DatasetError(DatasetError::Kind::InvalidField,
                       "checkpoint config hash does not match its config block");

  TrainState st(cfg);
  auto restore = [&ck](const std::string& name, Tensor& into) {
    const Tensor* src = ck.find(name);
    if (src == nullptr)
      throw DatasetError(DatasetError::Kind::InvalidField, "checkpoint lacks tensor " + name);
    if (!src->same_shape(into))
      throw DatasetError(DatasetError::Kind::InvalidField, "checkpoint tensor " + name +
                                                               " has the wrong shape");
    into = *src;
  };
  ParamStore& ps = st.model.params();
  for (i64 i = 0; i < ps.count(); ++i) {
    Param& p = ps.param(i);
    restore(p.name, p.value);
    restore("adam.m." + p.name, st.adam_m.at(p.name));
    restore("adam.v." + p.name, st.adam_v.at(p.name));
  }
  for (auto& [name, tensor] : st.model.state_tensors()) restore(name, *tensor);
  st.epoch = ck.meta.value("epoch", static_cast<i64>(0));
  st.adam_t = ck.meta.value("adam_t", static_cast<i64>(0));
  if (ck.meta.contains("data_rng")) st.data_rng.deserialize(ck.meta.at("data_rng").get<std::string>());
  return st;
}

}  // namespace ptsm
