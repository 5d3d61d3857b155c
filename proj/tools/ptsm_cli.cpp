// Command-line harness: dataset synthesis, training, evaluation, the ablation
// table, gradient auditing, and few-shot personalization. Every failure exits
// nonzero with a single "error: <category>: <message>" line on stderr.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ptsm/binio.hpp"
#include "ptsm/checkpoint.hpp"
#include "ptsm/config.hpp"
#include "ptsm/errors.hpp"
#include "ptsm/experiment.hpp"
#include "ptsm/metrics.hpp"
#include "ptsm/synthdata.hpp"
#include "ptsm/trainer.hpp"
#include "ptsm/version.hpp"

namespace {

using nlohmann::json;
using namespace ptsm;

/// Harness-level misuse (bad flag combination, unknown subject, shape
/// mismatch between artifacts) as opposed to library errors.
struct HarnessError : std::runtime_error {
  explicit HarnessError(const std::string& what) : std::runtime_error(what) {}
};

std::string dataset_kind_name(DatasetError::Kind k) {
  switch (k) {
    case DatasetError::Kind::BadMagic: return "bad_magic";
    case DatasetError::Kind::BadVersion: return "bad_version";
    case DatasetError::Kind::Truncated: return "truncated";
    case DatasetError::Kind::ChecksumMismatch: return "checksum_mismatch";
    case DatasetError::Kind::InvalidField: return "invalid_field";
    case DatasetError::Kind::Io: return "io";
  }
  return "unknown";
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string hex64(u64 v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<i64> parse_subject_list(const std::string& text) {
  std::vector<i64> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      throw HarnessError("bad subject id '" + item + "'");
    }
    if (pos != item.size() || v < 0) throw HarnessError("bad subject id '" + item + "'");
    out.push_back(static_cast<i64>(v));
  }
  if (out.empty()) throw HarnessError("empty subject list '" + text + "'");
  return out;
}

std::uint32_t file_crc32(const std::string& path) {
  const std::vector<unsigned char> bytes = binio::read_file(path);
  return binio::crc32(bytes.data(), bytes.size());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw HarnessError("cannot create directory '" + dir + "': " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

json dataset_manifest_block(const std::string& path, const Dataset& ds) {
  json d;
  d["path"] = path;
  d["crc32"] = file_crc32(path);
  d["channels"] = ds.channels;
  d["samples"] = ds.samples;
  d["n_classes"] = ds.n_classes;
  d["n_subjects"] = ds.n_subjects;
  d["n_trials"] = static_cast<i64>(ds.trials.size());
  return d;
}

void check_model_matches_dataset(const PtsmConfig& cfg, const Dataset& ds) {
  if (cfg.channels != ds.channels || cfg.samples != ds.samples ||
      cfg.n_classes != ds.n_classes || cfg.n_subjects != ds.n_subjects) {
    std::ostringstream os;
    os << "model shape (C=" << cfg.channels << ", T=" << cfg.samples << ", K=" << cfg.n_classes
       << ", S=" << cfg.n_subjects << ") does not match dataset (C=" << ds.channels
       << ", T=" << ds.samples << ", K=" << ds.n_classes << ", S=" << ds.n_subjects << ")";
    throw HarnessError(os.str());
  }
}

json metrics_summary_json(const MetricsReport& r) { return r.to_json(); }

void print_metrics_line(const std::string& label, const MetricsReport& r) {
  std::cout << label << ": acc " << percent_str(r.accuracy) << "%  macro-F1 "
            << percent_str(r.macro_f1) << "%  sen " << percent_str(r.sensitivity) << "%  spe "
            << percent_str(r.specificity) << "%  (n=" << r.n << ")\n";
}

// ---- synth ----------------------------------------------------------------

struct SynthOpts {
  std::string out;
  SyntheticConfig cfg;
};

void run_synth(const SynthOpts& o) {
  SyntheticSpec spec = make_synthetic_spec(o.cfg);
  std::vector<EegTrial> trials = generate(spec);
  Dataset ds = make_dataset(spec, std::move(trials));
  save_dataset(ds, o.out);
  std::cout << "wrote " << o.out << ": " << ds.trials.size() << " trials, C=" << ds.channels
            << " T=" << ds.samples << " K=" << ds.n_classes << " S=" << ds.n_subjects
            << ", crc32 " << hex64(file_crc32(o.out)) << "\n";
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
  std::string dataset;
  std::string out;
  std::string config_path;
  std::string subjects_test;
  std::string subjects_val;
  u64 seed = 0;
  bool seed_set = false;
  bool export_mask_dump = false;
};

std::string history_csv(const std::vector<EpochLog>& history) {
  std::ostringstream os;
  os << "epoch,task,subj,sim,sparse_mask,size,orth,cov,info,sparse_feat,contrast_task,"
        "contrast_subj,decouple,mask,contrast,total,val_acc,val_f1\n";
  for (const EpochLog& e : history) {
    const LossReport& l = e.losses;
    os << e.epoch << ',' << g17(l.task) << ',' << g17(l.subj) << ',' << g17(l.sim) << ','
       << g17(l.sparse_mask) << ',' << g17(l.size) << ',' << g17(l.orth) << ',' << g17(l.cov)
       << ',' << g17(l.info) << ',' << g17(l.sparse_feat) << ',' << g17(l.contrast_task) << ','
       << g17(l.contrast_subj) << ',' << g17(l.decouple) << ',' << g17(l.mask) << ','
       << g17(l.contrast) << ',' << g17(l.total) << ',' << g17(e.val_accuracy) << ','
       << g17(e.val_macro_f1) << '\n';
  }
  return os.str();
}

SplitPlan resolve_plan(const Dataset& ds, const std::string& test_text,
                       const std::string& val_text) {
  const i64 s_count = ds.n_subjects;
  SplitPlan plan;
  plan.test_subjects = test_text.empty() ? std::vector<i64>{s_count - 1}
                                         : parse_subject_list(test_text);
  std::set<i64> taken(plan.test_subjects.begin(), plan.test_subjects.end());
  for (i64 s : plan.test_subjects)
    if (s >= s_count) throw HarnessError("test subject " + std::to_string(s) + " out of range");
  if (val_text.empty()) {
    for (i64 s = s_count - 1; s >= 0; --s) {
      if (!taken.count(s)) {
        plan.val_subjects = {s};
        break;
      }
    }
    if (plan.val_subjects.empty()) throw HarnessError("no subject left for validation");
  } else {
    plan.val_subjects = parse_subject_list(val_text);
    for (i64 s : plan.val_subjects)
      if (s >= s_count) throw HarnessError("val subject " + std::to_string(s) + " out of range");
  }
  taken.insert(plan.val_subjects.begin(), plan.val_subjects.end());
  for (i64 s = 0; s < s_count; ++s)
    if (!taken.count(s)) plan.train_subjects.push_back(s);
  if (plan.train_subjects.empty()) throw HarnessError("no subjects left for training");
  plan.validate();
  return plan;
}

void run_train(const TrainOpts& o) {
  Dataset ds = load_dataset(o.dataset);
  PtsmConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path, std::ios::binary);
    if (!in) throw HarnessError("cannot open config '" + o.config_path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    cfg = config_from_json(buf.str());
    check_model_matches_dataset(cfg, ds);
  } else {
    cfg.channels = ds.channels;
    cfg.samples = ds.samples;
    cfg.n_classes = ds.n_classes;
    cfg.n_subjects = ds.n_subjects;
  }
  if (o.seed_set) cfg.seed = o.seed;
  cfg.validate();

  SplitPlan plan = resolve_plan(ds, o.subjects_test, o.subjects_val);
  SplitResult parts = split(ds.trials, plan);
  if (parts.train.empty()) throw HarnessError("train split has no trials");
  if (parts.val.empty()) throw HarnessError("val split has no trials");

  ensure_dir(o.out);
  FitResult fr = fit(cfg, parts.train, parts.val);

  const std::string ck_path = join_path(o.out, "checkpoint.ptsc");
  json extra;
  extra["best_epoch"] = fr.best_epoch;
  extra["best_val_accuracy"] = fr.best_val_accuracy;
  save_checkpoint(state_to_checkpoint(fr.state, extra), ck_path);
  binio::atomic_write_text(join_path(o.out, "log.csv"), history_csv(fr.history));

  json metrics;
  metrics["val"] = metrics_summary_json(evaluate_metrics(fr.state.model, parts.val));
  if (!parts.test.empty())
    metrics["test"] = metrics_summary_json(evaluate_metrics(fr.state.model, parts.test));
  binio::atomic_write_text(join_path(o.out, "metrics.json"), metrics.dump(2) + "\n");

  json manifest;
  manifest["artifact_version"] = kVersion;
  manifest["command"] = "train";
  manifest["config"] = json::parse(config_to_json(cfg));
  manifest["config_hash"] = hex64(config_hash(cfg));
  manifest["dataset"] = dataset_manifest_block(o.dataset, ds);
  manifest["split"] = {{"train_subjects", plan.train_subjects},
                       {"val_subjects", plan.val_subjects},
                       {"test_subjects", plan.test_subjects}};
  json artifacts;
  artifacts["checkpoint"] = "checkpoint.ptsc";
  artifacts["log"] = "log.csv";
  artifacts["metrics"] = "metrics.json";
  if (o.export_mask_dump) artifacts["masks"] = "masks.json";
  manifest["artifacts"] = artifacts;
  json results;
  results["best_epoch"] = fr.best_epoch;
  results["best_val_accuracy"] = fr.best_val_accuracy;
  results["epochs_run"] = static_cast<i64>(fr.history.size());
  manifest["results"] = results;
  binio::atomic_write_text(join_path(o.out, "manifest.json"), manifest.dump(2) + "\n");

  if (o.export_mask_dump)
    export_masks(fr.state.model, parts.val, join_path(o.out, "masks.json"));

  std::cout << "trained " << fr.history.size() << " epochs, best epoch " << fr.best_epoch
            << ", val acc " << percent_str(fr.best_val_accuracy) << "%\n";
  print_metrics_line("val", evaluate_metrics(fr.state.model, parts.val));
  if (!parts.test.empty())
    print_metrics_line("test", evaluate_metrics(fr.state.model, parts.test));
  std::cout << "artifacts in " << o.out << "\n";
}

// ---- eval -----------------------------------------------------------------

struct EvalOpts {
  std::string checkpoint;
  std::string dataset;
  std::string subjects;
  std::string out;
};

void run_eval(const EvalOpts& o) {
  TrainState state = state_from_checkpoint(load_checkpoint(o.checkpoint));
  Dataset ds = load_dataset(o.dataset);
  check_model_matches_dataset(state.model.config(), ds);
  std::vector<EegTrial> trials = ds.trials;
  if (!o.subjects.empty()) {
    const std::vector<i64> keep = parse_subject_list(o.subjects);
    const std::set<i64> keep_set(keep.begin(), keep.end());
    std::vector<EegTrial> filtered;
    for (const EegTrial& t : trials)
      if (keep_set.count(t.s)) filtered.push_back(t);
    if (filtered.empty()) throw HarnessError("no trials match the requested subjects");
    trials = std::move(filtered);
  }
  MetricsReport r = evaluate_metrics(state.model, trials);
  print_metrics_line("eval", r);
  if (!o.out.empty()) binio::atomic_write_text(o.out, r.to_json().dump(2) + "\n");
}

// ---- ablate ---------------------------------------------------------------

struct AblateOpts {
  std::string out;
  i64 n_seeds = 5;
};

void run_ablate(const AblateOpts& o) {
  if (o.n_seeds < 1) throw HarnessError("--seeds must be positive");
  BenchmarkSpec bench = default_benchmark();
  std::vector<u64> seeds;
  for (i64 i = 0; i < o.n_seeds; ++i) seeds.push_back(static_cast<u64>(i + 1));
  AblationResult res = run_ablation(bench, seeds);
  const std::string csv = ablation_csv(res);
  std::cout << csv;
  if (!o.out.empty()) {
    ensure_dir(o.out);
    binio::atomic_write_text(join_path(o.out, "ablation.csv"), csv);
    json j;
    j["seeds"] = res.seeds;
    json rows = json::array();
    for (size_t i = 0; i < res.rows.size(); ++i) {
      const AblationRow& r = res.rows[i];
      json row;
      row["name"] = r.name;
      row["test_accuracy"] = r.test_accuracy;
      row["test_macro_f1"] = r.test_macro_f1;
      row["test_sensitivity"] = r.test_sensitivity;
      row["test_specificity"] = r.test_specificity;
      row["val_accuracy"] = r.val_accuracy;
      row["mean_abs_cos"] = r.mean_abs_cos;
      row["cov_ratio"] = r.cov_ratio;
      row["per_seed_accuracy"] = res.per_seed_accuracy[i];
      rows.push_back(std::move(row));
    }
    j["rows"] = std::move(rows);
    binio::atomic_write_text(join_path(o.out, "ablation.json"), j.dump(2) + "\n");
    std::cout << "artifacts in " << o.out << "\n";
  }
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckOpts {
  double tol = 1e-4;
  u64 seed = 1234;
};

int run_gradcheck(const GradcheckOpts& o) {
  const std::vector<GradcheckCase> cases = run_loss_gradchecks(o.tol, o.seed);
  bool all_ok = true;
  for (const GradcheckCase& c : cases) {
    all_ok = all_ok && c.ok;
    std::printf("%-4s %-26s max_rel_err %.3e  probes %lld\n", c.ok ? "ok" : "FAIL",
                c.name.c_str(), c.max_rel_err, static_cast<long long>(c.probes));
  }
  return all_ok ? 0 : 1;
}

// ---- adapt ----------------------------------------------------------------

struct AdaptOpts {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  i64 subject = -1;
  i64 support_per_class = 10;
  i64 steps = 50;
  double eta = 1e-3;
};

void run_adapt(const AdaptOpts& o) {
  TrainState state = state_from_checkpoint(load_checkpoint(o.checkpoint));
  Dataset ds = load_dataset(o.dataset);
  check_model_matches_dataset(state.model.config(), ds);
  if (o.subject < 0 || o.subject >= ds.n_subjects)
    throw HarnessError("--subject " + std::to_string(o.subject) + " out of range");
  if (o.support_per_class < 1) throw HarnessError("--support-per-class must be positive");

  std::vector<EegTrial> support, held;
  std::vector<i64> taken(static_cast<size_t>(ds.n_classes), 0);
  for (const EegTrial& t : ds.trials) {
    if (t.s != o.subject) continue;
    i64& k = taken[static_cast<size_t>(t.y)];
    if (k < o.support_per_class) {
      support.push_back(t);
      ++k;
    } else {
      held.push_back(t);
    }
  }
  if (support.empty()) throw HarnessError("no trials for subject " + std::to_string(o.subject));
  if (held.empty())
    throw HarnessError("no held-out trials left for subject " + std::to_string(o.subject));

  const double pre = evaluate_accuracy(state.model, held);
  TrainState adapted = adapt_few_shot(state, support, o.steps, o.eta);
  const double post = evaluate_accuracy(adapted.model, held);
  const std::vector<std::string> changed = changed_tensor_names(state, adapted);
  bool only_personal = true;
  for (const std::string& name : changed)
    only_personal = only_personal && name.rfind("stap.personal.", 0) == 0;

  json report;
  report["subject"] = o.subject;
  report["support_trials"] = static_cast<i64>(support.size());
  report["held_trials"] = static_cast<i64>(held.size());
  report["steps"] = o.steps;
  report["eta"] = o.eta;
  report["pre_accuracy"] = pre;
  report["post_accuracy"] = post;
  report["only_personal_changed"] = only_personal;
  report["changed_tensors"] = changed;

  std::cout << "subject " << o.subject << ": acc " << percent_str(pre) << "% -> "
            << percent_str(post) << "% on " << held.size() << " held trials ("
            << support.size() << " support)\n";
  std::cout << "updated tensors confined to the personalized mask generator: "
            << (only_personal ? "yes" : "NO") << "\n";

  if (!o.out.empty()) {
    ensure_dir(o.out);
    json extra;
    extra["adapted_subject"] = o.subject;
    save_checkpoint(state_to_checkpoint(adapted, extra), join_path(o.out, "adapted.ptsc"));
    binio::atomic_write_text(join_path(o.out, "report.json"), report.dump(2) + "\n");
    std::cout << "artifacts in " << o.out << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-subject EEG decoder with learned spatio-temporal masks"};
  app.require_subcommand(1);

  SynthOpts synth;
  CLI::App* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  c_synth->add_option("--out", synth.out, "Output dataset path")->required();
  c_synth->add_option("--seed", synth.cfg.seed, "Generator seed");
  c_synth->add_option("--channels", synth.cfg.channels, "Channel count");
  c_synth->add_option("--samples", synth.cfg.samples, "Samples per trial");
  c_synth->add_option("--classes", synth.cfg.n_classes, "Task classes");
  c_synth->add_option("--subjects", synth.cfg.n_subjects, "Subject count");
  c_synth->add_option("--trials-per", synth.cfg.trials_per, "Trials per (subject, class)");
  c_synth->add_option("--noise-sigma", synth.cfg.noise_sigma, "Noise standard deviation");
  c_synth->add_option("--task-gain", synth.cfg.task_gain, "Task component gain");
  c_synth->add_option("--subject-gain", synth.cfg.subject_gain, "Subject component gain");

  TrainOpts train;
  CLI::App* c_train = app.add_subcommand("train", "Train a model on a dataset");
  c_train->add_option("--dataset", train.dataset, "Dataset path")->required();
  c_train->add_option("--out", train.out, "Output directory")->required();
  c_train->add_option("--config", train.config_path, "JSON config path");
  c_train->add_option("--subjects-test", train.subjects_test,
                      "Comma-separated held-out test subjects (default: highest id)");
  c_train->add_option("--subjects-val", train.subjects_val,
                      "Comma-separated validation subjects (default: highest non-test id)");
  CLI::Option* seed_opt = c_train->add_option("--seed", train.seed, "Seed override");
  c_train->add_flag("--export-masks", train.export_mask_dump,
                    "Dump per-trial masks for the validation split");

  EvalOpts eval;
  CLI::App* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint path")->required();
  c_eval->add_option("--dataset", eval.dataset, "Dataset path")->required();
  c_eval->add_option("--subjects-test", eval.subjects, "Restrict to these subjects");
  c_eval->add_option("--out", eval.out, "Write metrics JSON here");

  AblateOpts ablate;
  CLI::App* c_ablate = app.add_subcommand("ablate", "Run the ablation table on the benchmark");
  c_ablate->add_option("--out", ablate.out, "Output directory");
  c_ablate->add_option("--seeds", ablate.n_seeds, "Number of seeds (1..N)");

  GradcheckOpts gradcheck;
  CLI::App* c_gc = app.add_subcommand("gradcheck", "Finite-difference audit of all loss terms");
  c_gc->add_option("--tol", gradcheck.tol, "Relative-error tolerance");
  c_gc->add_option("--seed", gradcheck.seed, "Probe seed");

  AdaptOpts adapt;
  CLI::App* c_adapt = app.add_subcommand("adapt", "Few-shot personalization of a checkpoint");
  c_adapt->add_option("--checkpoint", adapt.checkpoint, "Checkpoint path")->required();
  c_adapt->add_option("--dataset", adapt.dataset, "Dataset path")->required();
  c_adapt->add_option("--subject", adapt.subject, "Subject to personalize for")->required();
  c_adapt->add_option("--support-per-class", adapt.support_per_class, "Support trials per class");
  c_adapt->add_option("--steps", adapt.steps, "Gradient steps");
  c_adapt->add_option("--eta", adapt.eta, "Step size");
  c_adapt->add_option("--out", adapt.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: cli: " << e.what() << "\n";
    return 2;
  }

  try {
    if (c_synth->parsed()) {
      run_synth(synth);
    } else if (c_train->parsed()) {
      train.seed_set = seed_opt->count() > 0;
      run_train(train);
    } else if (c_eval->parsed()) {
      run_eval(eval);
    } else if (c_ablate->parsed()) {
      run_ablate(ablate);
    } else if (c_gc->parsed()) {
      return run_gradcheck(gradcheck);
    } else if (c_adapt->parsed()) {
      run_adapt(adapt);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const DatasetError& e) {
    std::cerr << "error: dataset: " << dataset_kind_name(e.kind()) << ": " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 1;
  } catch (const ContractViolation& e) {
    std::cerr << "error: contract: " << e.what() << "\n";
    return 1;
  } catch (const HarnessError& e) {
    std::cerr << "error: harness: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
