#include "ptsm/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>

#include "ptsm/binio.hpp"
#include "ptsm/errors.hpp"
#include "ptsm/gradcheck.hpp"

namespace ptsm {

BenchmarkSpec default_benchmark() {
  BenchmarkSpec b;
  b.data = SyntheticConfig{};
  b.data.task_gain = 1.2;
  b.data.subject_gain = 2.5;
  b.plan.train_subjects = {0, 1, 2, 3};
  b.plan.val_subjects = {4};
  b.plan.test_subjects = {5};
  b.config = PtsmConfig{};
  b.config.max_epochs = 15;
  return b;
}

std::vector<VariantSpec> ablation_variants(const PtsmConfig& base) {
  std::vector<VariantSpec> out;
  out.push_back({"full", base});
  {
    PtsmConfig c = base;
    c.disable_stap = true;
    out.push_back({"w/o STAP", c});
  }
  {
    PtsmConfig c = base;
    c.disable_personal_branch = true;
    out.push_back({"w/o PP", c});
  }
  {
    PtsmConfig c = base;
    c.disable_common_branch = true;
    out.push_back({"w/o CP", c});
  }
  {
    PtsmConfig c = base;
    c.disable_orth = true;
    out.push_back({"w/o VO", c});
  }
  {
    PtsmConfig c = base;
    c.disable_cov = true;
    out.push_back({"w/o CO", c});
  }
  {
    PtsmConfig c = base;
    c.disable_info = true;
    out.push_back({"w/o MIM", c});
  }
  {
    PtsmConfig c = base;
    c.disable_sparse_feat = true;
    out.push_back({"w/o SR", c});
  }
  return out;
}

std::pair<Tensor, Tensor> extract_features(Model& m, const std::vector<EegTrial>& trials) {
  check_contract(!trials.empty(), "feature extraction needs at least one trial");
  const PtsmConfig& cfg = m.config();
  const i64 n = static_cast<i64>(trials.size());
  Tensor ft(Shape{n, cfg.d_f});
  Tensor fs(Shape{n, cfg.d_f});
  const size_t chunk = 64;
  for (size_t start = 0; start < trials.size(); start += chunk) {
    const size_t end = std::min(trials.size(), start + chunk);
    std::vector<EegTrial> part(trials.begin() + static_cast<std::ptrdiff_t>(start),
                               trials.begin() + static_cast<std::ptrdiff_t>(end));
    Tape t;
    std::vector<Var> pv = make_leaves(t, m.params());
    Var xc = t.constant(batch_inputs(part, cfg.channels, cfg.samples));
    MaskVars mv = m.stap().forward(t, pv, xc);
    Var xm = apply_masks_var(t, xc, mv.m_s, mv.m_t);
    Var h = m.tsfd().encode_temporal(t, pv, xm, Mode::Eval);
    Var hs = m.tsfd().encode_shared(t, pv, h, Mode::Eval);
    const Tensor vt = t.value(m.tsfd().project_task(t, pv, hs, Mode::Eval));
    const Tensor vs = t.value(m.tsfd().project_subj(t, pv, hs, Mode::Eval));
    for (size_t r = start; r < end; ++r)
      for (i64 d = 0; d < cfg.d_f; ++d) {
        ft.at(static_cast<i64>(r), d) = vt.at(static_cast<i64>(r - start), d);
        fs.at(static_cast<i64>(r), d) = vs.at(static_cast<i64>(r - start), d);
      }
  }
  return {ft, fs};
}

DisentangleProbe disentanglement_probe(Model& m, const std::vector<EegTrial>& trials) {
  auto [ft, fs] = extract_features(m, trials);
  DisentangleProbe p;
  p.mean_abs_cos = orthogonality(ft, fs);
  p.cov_ratio = covariance_decorrelation(ft, fs);
  return p;
}

AblationResult run_ablation(const BenchmarkSpec& bench, const std::vector<u64>& seeds) {
  check_contract(!seeds.empty(), "ablation needs at least one seed");
  const std::vector<VariantSpec> variants = ablation_variants(bench.config);
  AblationResult res;
  res.seeds = seeds;
  res.rows.resize(variants.size());
  res.per_seed_accuracy.assign(variants.size(), std::vector<double>(seeds.size(), 0.0));
  for (size_t v = 0; v < variants.size(); ++v) res.rows[v].name = variants[v].name;

  for (size_t si = 0; si < seeds.size(); ++si) {
    SyntheticConfig dc = bench.data;
    dc.seed = seeds[si];
    const std::vector<EegTrial> trials = generate(make_synthetic_spec(dc));
    const SplitResult parts = split(trials, bench.plan);
    for (size_t vi = 0; vi < variants.size(); ++vi) {
      PtsmConfig cfg = variants[vi].config;
      cfg.seed = seeds[si];
      FitResult fr = fit(cfg, parts.train, parts.val);
      const MetricsReport tm = evaluate_metrics(fr.state.model, parts.test);
      const DisentangleProbe dp = disentanglement_probe(fr.state.model, parts.test);
      AblationRow& row = res.rows[vi];
      row.test_accuracy += tm.accuracy;
      row.test_macro_f1 += tm.macro_f1;
      row.test_sensitivity += tm.sensitivity;
      row.test_specificity += tm.specificity;
      row.val_accuracy += fr.best_val_accuracy;
      row.mean_abs_cos += dp.mean_abs_cos;
      row.cov_ratio += dp.cov_ratio;
      res.per_seed_accuracy[vi][si] = tm.accuracy;
    }
  }
  const double inv = 1.0 / static_cast<double>(seeds.size());
  for (AblationRow& row : res.rows) {
    row.test_accuracy *= inv;
    row.test_macro_f1 *= inv;
    row.test_sensitivity *= inv;
    row.test_specificity *= inv;
    row.val_accuracy *= inv;
    row.mean_abs_cos *= inv;
    row.cov_ratio *= inv;
  }
  return res;
}

namespace {
std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string ablation_csv(const AblationResult& result) {
  std::ostringstream out;
  out << "variant,test_acc,test_macro_f1,test_sen,test_spe,val_acc,mean_abs_cos,cov_ratio\n";
  for (const AblationRow& r : result.rows) {
    out << '"' << r.name << '"' << ',' << fmt_g17(r.test_accuracy) << ','
        << fmt_g17(r.test_macro_f1) << ',' << fmt_g17(r.test_sensitivity) << ','
        << fmt_g17(r.test_specificity) << ',' << fmt_g17(r.val_accuracy) << ','
        << fmt_g17(r.mean_abs_cos) << ',' << fmt_g17(r.cov_ratio) << '\n';
  }
  return out.str();
}

std::vector<std::string> changed_tensor_names(TrainState& a, TrainState& b) {
  Checkpoint ca = state_to_checkpoint(a);
  Checkpoint cb = state_to_checkpoint(b);
  check_contract(ca.tensors.size() == cb.tensors.size(),
                 "states have different tensor inventories");
  std::vector<std::string> out;
  for (size_t i = 0; i < ca.tensors.size(); ++i) {
    const auto& [name_a, ta] = ca.tensors[i];
    const auto& [name_b, tb] = cb.tensors[i];
    check_contract(name_a == name_b, "states have different tensor inventories");
    if (!ta.same_shape(tb) ||
        std::memcmp(ta.data(), tb.data(), static_cast<size_t>(ta.numel()) * sizeof(double)) != 0)
      out.push_back(name_a);
  }
  return out;
}

namespace {

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

GradcheckCase run_case(const std::string& name, const std::vector<Tensor>& params,
                       const std::vector<std::string>& names, const GraphFn& graph, double tol) {
  ScalarFn f = [&graph](const std::vector<Tensor>& ps) {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(ps.size());
    for (const Tensor& p : ps) vs.push_back(t.leaf(p));
    return t.value(graph(t, vs)).item();
  };
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(params.size());
    for (const Tensor& p : params) vs.push_back(t.leaf(p));
    Var root = graph(t, vs);
    t.backward(root);
    for (Var v : vs) analytic.push_back(t.grad(v));
  }
  GradCheckReport rep = grad_check(f, params, analytic, names, 1e-5, tol);
  GradcheckCase out;
  out.name = name;
  out.max_rel_err = rep.max_rel_err;
  out.probes = rep.probes;
  out.ok = rep.ok();
  return out;
}

std::vector<i64> cyclic_labels(i64 n, i64 k) {
  std::vector<i64> y(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) y[static_cast<size_t>(i)] = i % k;
  return y;
}

}  // namespace

std::vector<GradcheckCase> run_loss_gradchecks(double tol, u64 seed) {
  Rng rng(seed);
  std::vector<GradcheckCase> out;

  // Classification terms go through the softmax so its backward is audited too.
  {
    Tensor logits = Tensor::randn(Shape{25, 4}, rng);
    const std::vector<i64> y = cyclic_labels(25, 4);
    out.push_back(run_case(
        "cross_entropy", {logits}, {"logits"},
        [y](Tape& t, const std::vector<Var>& vs) {
          return cross_entropy_var(t, t.softmax_rows(vs[0]), y, nullptr);
        },
        tol));
  }

  Tensor m_p = Tensor::rand_uniform(Shape{6, 24}, rng, 0.05, 0.95);
  Tensor m_c = Tensor::rand_uniform(Shape{6, 24}, rng, 0.05, 0.95);
  out.push_back(run_case(
      "mask_similarity", {m_p, m_c}, {"m_p", "m_c"},
      [](Tape& t, const std::vector<Var>& vs) {
        return mask_similarity_var(t, vs[0], vs[1], false, nullptr);
      },
      tol));
  out.push_back(run_case(
      "mask_similarity_abs", {m_p, m_c}, {"m_p", "m_c"},
      [](Tape& t, const std::vector<Var>& vs) {
        return mask_similarity_var(t, vs[0], vs[1], true, nullptr);
      },
      tol));
  out.push_back(run_case(
      "mask_sparsity", {m_p, m_c}, {"m_p", "m_c"},
      [](Tape& t, const std::vector<Var>& vs) { return mask_sparsity_var(t, vs[0], vs[1]); },
      tol));
  out.push_back(run_case(
      "mask_size", {m_p, m_c}, {"m_p", "m_c"},
      [](Tape& t, const std::vector<Var>& vs) { return mask_size_var(t, vs[0], vs[1], 0.5); },
      tol));

  Tensor f_t = Tensor::randn(Shape{10, 10}, rng);
  Tensor f_s = Tensor::randn(Shape{10, 10}, rng);
  out.push_back(run_case(
      "orthogonality", {f_t, f_s}, {"f_task", "f_subj"},
      [](Tape& t, const std::vector<Var>& vs) {
        return orthogonality_var(t, vs[0], vs[1], nullptr);
      },
      tol));
  out.push_back(run_case(
      "covariance_decorrelation", {f_t, f_s}, {"f_task", "f_subj"},
      [](Tape& t, const std::vector<Var>& vs) {
        return covariance_decorrelation_var(t, vs[0], vs[1]);
      },
      tol));
  out.push_back(run_case(
      "info_retention", {f_t, f_s}, {"f_task", "f_subj"},
      [](Tape& t, const std::vector<Var>& vs) {
        return info_retention_var(t, vs[0], vs[1], true);
      },
      tol));
  out.push_back(run_case(
      "feature_sparsity", {f_t, f_s}, {"f_task", "f_subj"},
      [](Tape& t, const std::vector<Var>& vs) { return feature_sparsity_var(t, vs[0], vs[1]); },
      tol));

  {
    Tensor emb = Tensor::randn(Shape{20, 5}, rng);
    const std::vector<i64> y = cyclic_labels(20, 4);
    out.push_back(run_case(
        "nt_xent", {emb}, {"embeddings"},
        [y](Tape& t, const std::vector<Var>& vs) {
          return nt_xent_var(t, vs[0], y, 0.5, nullptr);
        },
        tol));
  }

  // Fully composed objective over free inputs, mirroring the training-step
  // assembly order exactly.
  {
    const i64 n = 8;
    Tensor z_t = Tensor::randn(Shape{n, 3}, rng);
    Tensor z_s = Tensor::randn(Shape{n, 4}, rng);
    Tensor c_p = Tensor::rand_uniform(Shape{n, 20}, rng, 0.05, 0.95);
    Tensor c_c = Tensor::rand_uniform(Shape{n, 20}, rng, 0.05, 0.95);
    Tensor g_t = Tensor::randn(Shape{n, 6}, rng);
    Tensor g_s = Tensor::randn(Shape{n, 6}, rng);
    const std::vector<i64> y = cyclic_labels(n, 3);
    const std::vector<i64> s = cyclic_labels(n, 4);
    const LossWeights w;
    out.push_back(run_case(
        "composite", {z_t, z_s, c_p, c_c, g_t, g_s},
        {"logits_task", "logits_subj", "m_p", "m_c", "f_task", "f_subj"},
        [y, s, w](Tape& t, const std::vector<Var>& vs) {
          Var v_task = cross_entropy_var(t, t.softmax_rows(vs[0]), y, nullptr);
          Var v_subj = cross_entropy_var(t, t.softmax_rows(vs[1]), s, nullptr);
          Var v_sim = mask_similarity_var(t, vs[2], vs[3], w.sim_use_abs, nullptr);
          Var v_smask = mask_sparsity_var(t, vs[2], vs[3]);
          Var v_size = mask_size_var(t, vs[2], vs[3], w.alpha_size);
          Var v_orth = orthogonality_var(t, vs[4], vs[5], nullptr);
          Var v_cov = covariance_decorrelation_var(t, vs[4], vs[5]);
          Var v_info = info_retention_var(t, vs[4], vs[5], w.info_trace_clamp);
          Var v_sfeat = feature_sparsity_var(t, vs[4], vs[5]);
          Var v_ct = nt_xent_var(t, vs[4], y, w.tau, nullptr);
          Var v_cs = nt_xent_var(t, vs[5], s, w.tau, nullptr);
          Var v_dec =
              t.add(t.add(t.add(t.scale(v_orth, w.lambda_orth), t.scale(v_cov, w.lambda_cov)),
                          t.scale(v_info, w.lambda_info)),
                    t.scale(v_sfeat, w.lambda_sparse_feat));
          Var v_mask = t.add(
              t.add(t.scale(v_sim, w.lambda_sim), t.scale(v_smask, w.lambda_sparse_mask)),
              t.scale(v_size, w.lambda_size));
          Var v_con = t.add(t.scale(v_ct, w.lambda_contrast_task),
                            t.scale(v_cs, w.lambda_contrast_subj));
          return t.add(t.add(t.add(t.add(v_task, t.scale(v_subj, w.lambda_subj)),
                                   t.scale(v_dec, w.lambda_decouple)),
                             t.scale(v_mask, w.lambda_mask)),
                       t.scale(v_con, w.lambda_contrast));
        },
        tol));
  }
  return out;
}

namespace {
std::vector<double> tensor_values(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}
}  // namespace

nlohmann::json masks_json(Model& m, const std::vector<EegTrial>& trials) {
  nlohmann::json arr = nlohmann::json::array();
  for (size_t i = 0; i < trials.size(); ++i) {
    const EegTrial& tr = trials[i];
    MaskSet ms = m.generate_masks(tr.x);
    nlohmann::json rec;
    rec["index"] = i;
    rec["subject"] = tr.s;
    rec["label"] = tr.y;
    rec["alpha"] = ms.alpha;
    rec["beta"] = ms.beta;
    rec["m_s"] = tensor_values(ms.m_s);
    rec["m_t"] = tensor_values(ms.m_t);
    rec["m_s_p"] = tensor_values(ms.m_s_p);
    rec["m_t_p"] = tensor_values(ms.m_t_p);
    rec["m_s_c"] = tensor_values(ms.m_s_c);
    rec["m_t_c"] = tensor_values(ms.m_t_c);
    rec["fused_outer"] = tensor_values(outer_flatten(ms.m_t, ms.m_s));
    arr.push_back(std::move(rec));
  }
  return arr;
}

void export_masks(Model& m, const std::vector<EegTrial>& trials, const std::string& path) {
  binio::atomic_write_text(path, masks_json(m, trials).dump(2) + "\n");
}

AdaptationOutcome run_adaptation(const BenchmarkSpec& bench, u64 seed, i64 support_per_class,
                                 i64 steps, double eta) {
  check_contract(!bench.plan.test_subjects.empty(), "benchmark has no test subject");
  check_contract(support_per_class >= 1, "need at least one support trial per class");
  SyntheticConfig dc = bench.data;
  dc.seed = seed;
  const std::vector<EegTrial> trials = generate(make_synthetic_spec(dc));
  const SplitResult parts = split(trials, bench.plan);
  PtsmConfig cfg = bench.config;
  cfg.seed = seed;
  FitResult fr = fit(cfg, parts.train, parts.val);

  const i64 subject = bench.plan.test_subjects.front();
  std::vector<EegTrial> support, held;
  std::vector<i64> taken(static_cast<size_t>(cfg.n_classes), 0);
  for (const EegTrial& tr : parts.test) {
    if (tr.s != subject) continue;
    if (taken[static_cast<size_t>(tr.y)] < support_per_class) {
      support.push_back(tr);
      ++taken[static_cast<size_t>(tr.y)];
    } else {
      held.push_back(tr);
    }
  }
  check_contract(!support.empty(), "test subject has no support trials");
  check_contract(!held.empty(), "test subject has no held-out trials");

  AdaptationOutcome out;
  out.pre_accuracy = evaluate_accuracy(fr.state.model, held);
  TrainState adapted = adapt_few_shot(fr.state, support, steps, eta);
  out.changed = changed_tensor_names(fr.state, adapted);
  out.only_personal_changed = true;
  for (const std::string& name : out.changed)
    if (name.rfind("stap.personal.", 0) != 0) out.only_personal_changed = false;
  out.post_accuracy = evaluate_accuracy(adapted.model, held);
  return out;
}

}  // namespace ptsm
