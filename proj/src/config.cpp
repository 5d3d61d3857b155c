#include "ptsm/config.hpp"

#include <map>

#include <json.hpp>

#include "ptsm/errors.hpp"

namespace ptsm {

using json = nlohmann::json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// Pulls known keys out of `j`, erroring on leftovers so typos can't silently
// fall back to defaults.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : where_(std::move(where)) {
    require(j.is_object(), where_ + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) pending_[it.key()] = it.value();
  }

  ~StrictObject() = default;

  template <class T>
  void get(const char* key, T& out) {
    auto it = pending_.find(key);
    if (it == pending_.end()) return;
    try {
      out = it->second.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + " has the wrong type");
    }
    pending_.erase(it);
  }

  json take_object(const char* key) {
    auto it = pending_.find(key);
    if (it == pending_.end()) return json::object();
    json out = it->second;
    pending_.erase(it);
    return out;
  }

  void finish() const {
    if (!pending_.empty())
      throw ConfigError("unknown config key: " + where_ + "." + pending_.begin()->first);
  }

 private:
  std::string where_;
  std::map<std::string, json> pending_;
};

}  // namespace

void LossWeights::validate() const {
  const double lambdas[] = {lambda_subj,   lambda_decouple,    lambda_mask,
                            lambda_contrast, lambda_orth,      lambda_cov,
                            lambda_info,   lambda_sparse_feat, lambda_sim,
                            lambda_sparse_mask, lambda_size,   lambda_contrast_task,
                            lambda_contrast_subj};
  for (double l : lambdas) require(l >= 0.0, "loss weights must be nonnegative");
  require(tau > 0.0, "tau must be positive");
  require(alpha_size > 0.0 && alpha_size < 1.0, "alpha_size must lie in (0,1)");
}

void OptimConfig::validate() const {
  require(lr >= 0.0, "learning rate must be nonnegative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "Adam betas must lie in [0,1)");
  require(eps > 0.0, "Adam epsilon must be positive");
  require(weight_decay >= 0.0, "weight decay must be nonnegative");
}

void PtsmConfig::validate() const {
  require(channels >= 1 && samples >= 1, "channels and samples must be >= 1");
  require(n_classes >= 2, "n_classes must be >= 2");
  require(n_subjects >= 1, "n_subjects must be >= 1");
  require(t_prime >= 1 && t_prime <= samples, "t_prime must lie in [1, samples]");
  require(d_f >= 1, "d_f must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0,1)");
  require(batch_size >= 2, "batch_size must be >= 2");
  require(max_epochs >= 0, "max_epochs must be >= 0");
  require(patience >= 1, "patience must be >= 1");
  if (!disable_stap)
    require(!(disable_personal_branch && disable_common_branch),
            "disable_personal_branch and disable_common_branch cannot both be set");
  loss.validate();
  optim.validate();
}

EffectiveWiring apply_ablation(const PtsmConfig& cfg) {
  check_contract(cfg.disable_stap || !(cfg.disable_personal_branch && cfg.disable_common_branch),
                 "cannot disable both mask branches while the mask module is active");
  cfg.validate();
  EffectiveWiring w;
  w.weights = cfg.loss;
  w.bypass_masks = cfg.disable_stap;
  w.fusion_learnable = cfg.fusion_learnable;
  if (cfg.disable_personal_branch) {
    // Fused mask collapses onto the common branch; the similarity penalty
    // has nothing to separate.
    w.fusion_learnable = false;
    w.frozen_alpha = 0.0;
    w.frozen_beta = 0.0;
    w.weights.lambda_sim = 0.0;
  }
  if (cfg.disable_common_branch) {
    w.fusion_learnable = false;
    w.frozen_alpha = 1.0;
    w.frozen_beta = 1.0;
    w.weights.lambda_sim = 0.0;
  }
  if (cfg.disable_stap) {
    w.weights.lambda_sim = 0.0;
    w.weights.lambda_sparse_mask = 0.0;
    w.weights.lambda_size = 0.0;
  }
  if (cfg.disable_orth) w.weights.lambda_orth = 0.0;
  if (cfg.disable_cov) w.weights.lambda_cov = 0.0;
  if (cfg.disable_info) w.weights.lambda_info = 0.0;
  if (cfg.disable_sparse_feat) w.weights.lambda_sparse_feat = 0.0;
  return w;
}

PtsmConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PtsmConfig c;
  StrictObject top(j, "config");
  top.get("channels", c.channels);
  top.get("samples", c.samples);
  top.get("n_classes", c.n_classes);
  top.get("n_subjects", c.n_subjects);
  top.get("t_prime", c.t_prime);
  top.get("d_f", c.d_f);
  top.get("dropout", c.dropout);
  top.get("fusion_learnable", c.fusion_learnable);
  top.get("disable_stap", c.disable_stap);
  top.get("disable_personal_branch", c.disable_personal_branch);
  top.get("disable_common_branch", c.disable_common_branch);
  top.get("disable_orth", c.disable_orth);
  top.get("disable_cov", c.disable_cov);
  top.get("disable_info", c.disable_info);
  top.get("disable_sparse_feat", c.disable_sparse_feat);
  top.get("batch_size", c.batch_size);
  top.get("max_epochs", c.max_epochs);
  top.get("patience", c.patience);
  top.get("seed", c.seed);

  StrictObject lw(top.take_object("loss"), "loss");
  lw.get("lambda_subj", c.loss.lambda_subj);
  lw.get("lambda_decouple", c.loss.lambda_decouple);
  lw.get("lambda_mask", c.loss.lambda_mask);
  lw.get("lambda_contrast", c.loss.lambda_contrast);
  lw.get("lambda_orth", c.loss.lambda_orth);
  lw.get("lambda_cov", c.loss.lambda_cov);
  lw.get("lambda_info", c.loss.lambda_info);
  lw.get("lambda_sparse_feat", c.loss.lambda_sparse_feat);
  lw.get("lambda_sim", c.loss.lambda_sim);
  lw.get("lambda_sparse_mask", c.loss.lambda_sparse_mask);
  lw.get("lambda_size", c.loss.lambda_size);
  lw.get("lambda_contrast_task", c.loss.lambda_contrast_task);
  lw.get("lambda_contrast_subj", c.loss.lambda_contrast_subj);
  lw.get("alpha_size", c.loss.alpha_size);
  lw.get("tau", c.loss.tau);
  lw.get("sim_use_abs", c.loss.sim_use_abs);
  lw.get("info_trace_clamp", c.loss.info_trace_clamp);
  lw.finish();

  StrictObject op(top.take_object("optimizer"), "optimizer");
  op.get("lr", c.optim.lr);
  op.get("beta1", c.optim.beta1);
  op.get("beta2", c.optim.beta2);
  op.get("eps", c.optim.eps);
  op.get("weight_decay", c.optim.weight_decay);
  op.finish();

  top.finish();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::string config_to_json(const PtsmConfig& c) {
  json j;
  j["channels"] = c.channels;
  j["samples"] = c.samples;
  j["n_classes"] = c.n_classes;
  j["n_subjects"] = c.n_subjects;
  j["t_prime"] = c.t_prime;
  j["d_f"] = c.d_f;
  j["dropout"] = c.dropout;
  j["fusion_learnable"] = c.fusion_learnable;
  j["disable_stap"] = c.disable_stap;
  j["disable_personal_branch"] = c.disable_personal_branch;
  j["disable_common_branch"] = c.disable_common_branch;
  j["disable_orth"] = c.disable_orth;
  j["disable_cov"] = c.disable_cov;
  j["disable_info"] = c.disable_info;
  j["disable_sparse_feat"] = c.disable_sparse_feat;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  json& lw = j["loss"];
  lw["lambda_subj"] = c.loss.lambda_subj;
  lw["lambda_decouple"] = c.loss.lambda_decouple;
  lw["lambda_mask"] = c.loss.lambda_mask;
  lw["lambda_contrast"] = c.loss.lambda_contrast;
  lw["lambda_orth"] = c.loss.lambda_orth;
  lw["lambda_cov"] = c.loss.lambda_cov;
  lw["lambda_info"] = c.loss.lambda_info;
  lw["lambda_sparse_feat"] = c.loss.lambda_sparse_feat;
  lw["lambda_sim"] = c.loss.lambda_sim;
  lw["lambda_sparse_mask"] = c.loss.lambda_sparse_mask;
  lw["lambda_size"] = c.loss.lambda_size;
  lw["lambda_contrast_task"] = c.loss.lambda_contrast_task;
  lw["lambda_contrast_subj"] = c.loss.lambda_contrast_subj;
  lw["alpha_size"] = c.loss.alpha_size;
  lw["tau"] = c.loss.tau;
  lw["sim_use_abs"] = c.loss.sim_use_abs;
  lw["info_trace_clamp"] = c.loss.info_trace_clamp;
  json& op = j["optimizer"];
  op["lr"] = c.optim.lr;
  op["beta1"] = c.optim.beta1;
  op["beta2"] = c.optim.beta2;
  op["eps"] = c.optim.eps;
  op["weight_decay"] = c.optim.weight_decay;
  return j.dump();
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const PtsmConfig& c) { return fnv1a64(config_to_json(c)); }

}  // namespace ptsm
