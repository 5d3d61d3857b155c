#include <doctest.h>

#include <string>

#include "ptsm/config.hpp"
#include "ptsm/errors.hpp"

using namespace ptsm;

TEST_CASE("defaults validate and an empty object yields them") {
  PtsmConfig def;
  CHECK_NOTHROW(def.validate());
  const PtsmConfig parsed = config_from_json("{}");
  CHECK(config_to_json(parsed) == config_to_json(def));
}

TEST_CASE("serialization round-trips and is canonical") {
  PtsmConfig c;
  c.channels = 22;
  c.samples = 250;
  c.n_classes = 4;
  c.n_subjects = 9;
  c.t_prime = 25;
  c.d_f = 48;
  c.dropout = 0.25;
  c.fusion_learnable = false;
  c.disable_info = true;
  c.loss.lambda_subj = 0.75;
  c.loss.tau = 0.07;
  c.loss.sim_use_abs = true;
  c.optim.lr = 5e-4;
  c.optim.weight_decay = 0.0;
  c.batch_size = 16;
  c.max_epochs = 3;
  c.patience = 2;
  c.seed = 0xDEADBEEF12345678ULL;

  const std::string text = config_to_json(c);
  const PtsmConfig back = config_from_json(text);
  CHECK(config_to_json(back) == text);
  CHECK(back.channels == 22);
  CHECK(back.seed == 0xDEADBEEF12345678ULL);
  CHECK(back.loss.tau == 0.07);
  CHECK(back.optim.lr == 5e-4);
  CHECK(back.fusion_learnable == false);
  CHECK(back.disable_info == true);

  // canonical: equal configs always print the same bytes
  PtsmConfig c2 = c;
  CHECK(config_to_json(c2) == text);
}

TEST_CASE("unknown and ill-typed keys are rejected") {
  CHECK_THROWS_AS((void)config_from_json("{\"channelz\": 4}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"loss\": {\"lambda_bogus\": 1.0}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"optimizer\": {\"momentum\": 0.9}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"channels\": \"four\"}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("[1,2,3]"), ConfigError);
}

TEST_CASE("range violations surface as config errors") {
  CHECK_THROWS_AS((void)config_from_json("{\"n_classes\": 1}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"t_prime\": 200, \"samples\": 128}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"dropout\": 1.0}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"batch_size\": 1}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"patience\": 0}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"max_epochs\": -1}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"loss\": {\"tau\": 0.0}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"loss\": {\"alpha_size\": 1.0}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"loss\": {\"lambda_cov\": -0.5}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"optimizer\": {\"beta1\": 1.0}}"), ConfigError);
  CHECK_THROWS_AS((void)config_from_json("{\"optimizer\": {\"eps\": 0.0}}"), ConfigError);
  CHECK_THROWS_AS(
      (void)config_from_json(
          "{\"disable_personal_branch\": true, \"disable_common_branch\": true}"),
      ConfigError);
  // with the mask module gone entirely the branch flags stop conflicting
  CHECK_NOTHROW((void)config_from_json("{\"disable_stap\": true, \"disable_personal_branch\": "
                                       "true, \"disable_common_branch\": true}"));
}

TEST_CASE("ablation flags rewrite the wiring") {
  PtsmConfig cfg;

  SUBCASE("reference configuration changes nothing") {
    const EffectiveWiring w = apply_ablation(cfg);
    CHECK(!w.bypass_masks);
    CHECK(w.fusion_learnable);
    CHECK(w.weights.lambda_sim == cfg.loss.lambda_sim);
    CHECK(w.weights.lambda_orth == cfg.loss.lambda_orth);
  }
  SUBCASE("removing the mask module bypasses it and silences its penalties") {
    cfg.disable_stap = true;
    const EffectiveWiring w = apply_ablation(cfg);
    CHECK(w.bypass_masks);
    CHECK(w.weights.lambda_sim == 0.0);
    CHECK(w.weights.lambda_sparse_mask == 0.0);
    CHECK(w.weights.lambda_size == 0.0);
    CHECK(w.weights.lambda_orth == cfg.loss.lambda_orth);  // untouched
  }
  SUBCASE("removing the personalized branch freezes fusion onto the common one") {
    cfg.disable_personal_branch = true;
    const EffectiveWiring w = apply_ablation(cfg);
    CHECK(!w.bypass_masks);
    CHECK(!w.fusion_learnable);
    CHECK(w.frozen_alpha == 0.0);
    CHECK(w.frozen_beta == 0.0);
    CHECK(w.weights.lambda_sim == 0.0);
  }
  SUBCASE("removing the common branch freezes fusion onto the personalized one") {
    cfg.disable_common_branch = true;
    const EffectiveWiring w = apply_ablation(cfg);
    CHECK(!w.fusion_learnable);
    CHECK(w.frozen_alpha == 1.0);
    CHECK(w.frozen_beta == 1.0);
    CHECK(w.weights.lambda_sim == 0.0);
  }
  SUBCASE("single-term switches zero exactly their weight") {
    cfg.disable_orth = true;
    cfg.disable_cov = true;
    cfg.disable_info = true;
    cfg.disable_sparse_feat = true;
    const EffectiveWiring w = apply_ablation(cfg);
    CHECK(w.weights.lambda_orth == 0.0);
    CHECK(w.weights.lambda_cov == 0.0);
    CHECK(w.weights.lambda_info == 0.0);
    CHECK(w.weights.lambda_sparse_feat == 0.0);
    CHECK(w.weights.lambda_sim == cfg.loss.lambda_sim);
    CHECK(w.weights.lambda_subj == cfg.loss.lambda_subj);
  }
  SUBCASE("disabling both branches while masking is active is contradictory") {
    cfg.disable_personal_branch = true;
    cfg.disable_common_branch = true;
    CHECK_THROWS_AS((void)apply_ablation(cfg), ContractViolation);
  }
}

TEST_CASE("config hash tracks content") {
  PtsmConfig a, b;
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 2;
  CHECK(config_hash(a) != config_hash(b));
  b = a;
  b.loss.lambda_cov = 0.9;
  CHECK(config_hash(a) != config_hash(b));
  b = a;
  b.disable_stap = true;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("hash primitive matches its reference vectors") {
  // standard FNV-1a 64-bit test vectors
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}
