#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ptsm/binio.hpp"
#include "ptsm/errors.hpp"
#include "ptsm/synthdata.hpp"

using namespace ptsm;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void cleanup(const std::string& path) {
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}

std::vector<unsigned char> slurp(const std::string& path) { return binio::read_file(path); }

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SyntheticConfig small_cfg() {
  SyntheticConfig cfg;
  cfg.channels = 6;
  cfg.samples = 64;
  cfg.n_classes = 3;
  cfg.n_subjects = 4;
  cfg.trials_per = 3;
  cfg.noise_sigma = 0.0;
  cfg.task_gain = 1.0;
  cfg.subject_gain = 1.0;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("generation is bitwise deterministic in the seed") {
  SyntheticConfig cfg = small_cfg();
  cfg.noise_sigma = 0.5;
  GeneratorReport r1, r2;
  const auto a = generate(make_synthetic_spec(cfg), &r1);
  const auto b = generate(make_synthetic_spec(cfg), &r2);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].y == b[i].y);
    CHECK(a[i].s == b[i].s);
    CHECK(same_bits(a[i].x, b[i].x));
  }
  CHECK(same_bits(r1.channel_mean, r2.channel_mean));
  CHECK(same_bits(r1.channel_std, r2.channel_std));

  cfg.seed = 8;
  const auto c = generate(make_synthetic_spec(cfg));
  CHECK(!same_bits(a[0].x, c[0].x));
}

TEST_CASE("without noise or subject effects, trials depend only on the class") {
  SyntheticConfig cfg = small_cfg();
  cfg.noise_sigma = 0.0;
  cfg.subject_gain = 0.0;
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  const auto trials = generate(spec);
  // index = ((s * K) + k) * trials_per + rep
  auto at = [&](i64 s, i64 k, i64 rep) -> const EegTrial& {
    return trials[static_cast<size_t>((s * cfg.n_classes + k) * cfg.trials_per + rep)];
  };
  for (i64 k = 0; k < cfg.n_classes; ++k) {
    const EegTrial& ref = at(0, k, 0);
    REQUIRE(ref.y == k);
    for (i64 s = 0; s < cfg.n_subjects; ++s)
      for (i64 rep = 0; rep < cfg.trials_per; ++rep) CHECK(same_bits(at(s, k, rep).x, ref.x));
  }
}

TEST_CASE("z-scoring leaves every channel centered with unit spread") {
  SyntheticConfig cfg = small_cfg();
  cfg.noise_sigma = 0.4;
  const auto trials = generate(make_synthetic_spec(cfg));
  const double count = static_cast<double>(trials.size()) * static_cast<double>(cfg.samples);
  for (i64 c = 0; c < cfg.channels; ++c) {
    double mean = 0.0;
    for (const EegTrial& tr : trials)
      for (i64 t = 0; t < cfg.samples; ++t) mean += tr.x.at(c, t);
    mean /= count;
    double var = 0.0;
    for (const EegTrial& tr : trials)
      for (i64 t = 0; t < cfg.samples; ++t) {
        const double d = tr.x.at(c, t) - mean;
        var += d * d;
      }
    var /= count;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
}

TEST_CASE("noise-free trials are perfectly recovered by template matching") {
  const SyntheticConfig cfg = small_cfg();
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  GeneratorReport rep;
  const auto trials = generate(spec, &rep);
  i64 correct = 0;
  for (const EegTrial& tr : trials) {
    double best = -1e300;
    i64 best_k = -1;
    for (i64 k = 0; k < cfg.n_classes; ++k) {
      double score = 0.0;
      for (i64 c = 0; c < cfg.channels; ++c) {
        double acc = 0.0;
        for (i64 t = 0; t < cfg.samples; ++t) {
          const double raw = tr.x.at(c, t) * rep.channel_std[c] + rep.channel_mean[c];
          acc += raw * spec.templates[static_cast<size_t>(k)][t];
        }
        score += spec.task_loading[c] * acc;
      }
      if (score > best) {
        best = score;
        best_k = k;
      }
    }
    if (best_k == tr.y) ++correct;
  }
  CHECK(correct == static_cast<i64>(trials.size()));
}

TEST_CASE("within-subject means recover the planted subject signatures") {
  SyntheticConfig cfg = small_cfg();
  cfg.channels = 8;
  cfg.n_subjects = 3;
  cfg.trials_per = 50;
  cfg.noise_sigma = 0.3;
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  GeneratorReport rep;
  const auto trials = generate(spec, &rep);

  for (i64 s = 0; s < cfg.n_subjects; ++s) {
    Tensor mean_raw(Shape{cfg.channels, cfg.samples});
    i64 n = 0;
    for (const EegTrial& tr : trials) {
      if (tr.s != s) continue;
      for (i64 c = 0; c < cfg.channels; ++c)
        for (i64 t = 0; t < cfg.samples; ++t)
          mean_raw.at(c, t) += tr.x.at(c, t) * rep.channel_std[c] + rep.channel_mean[c];
      ++n;
    }
    for (i64 i = 0; i < mean_raw.numel(); ++i) mean_raw[i] /= static_cast<double>(n);

    // project onto the subject drift; the result should be parallel to the
    // planted signature with length close to the subject gain
    std::vector<double> v(static_cast<size_t>(cfg.channels), 0.0);
    for (i64 c = 0; c < cfg.channels; ++c)
      for (i64 t = 0; t < cfg.samples; ++t)
        v[static_cast<size_t>(c)] += mean_raw.at(c, t) * spec.drifts[static_cast<size_t>(s)][t];
    double dot = 0.0, nv = 0.0;
    for (i64 c = 0; c < cfg.channels; ++c) {
      dot += v[static_cast<size_t>(c)] * spec.signatures[static_cast<size_t>(s)][c];
      nv += v[static_cast<size_t>(c)] * v[static_cast<size_t>(c)];
    }
    const double cos = dot / std::sqrt(nv);  // signature is unit norm
    CHECK(cos >= 0.99);
    // 50 trials of sigma-0.3 noise leave ~0.1 of sampling error on the norm
    CHECK(std::abs(std::sqrt(nv) - spec.subject_gains[static_cast<size_t>(s)]) < 0.2);
  }
}

TEST_CASE("spec drawing enforces its own invariants") {
  const SyntheticSpec spec = make_synthetic_spec(small_cfg());
  CHECK_NOTHROW(spec.validate());

  SUBCASE("templates and drifts are unit norm and mutually separated") {
    for (const Tensor& t : spec.templates) {
      double n = 0.0;
      for (i64 i = 0; i < t.numel(); ++i) n += t[i] * t[i];
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
    }
  }
  SUBCASE("drifts are orthogonal to every template and to constants") {
    for (const Tensor& d : spec.drifts) {
      double c_sum = 0.0;
      for (i64 i = 0; i < d.numel(); ++i) c_sum += d[i];
      CHECK(std::abs(c_sum) < 1e-8);
      for (const Tensor& t : spec.templates) {
        double dt = 0.0;
        for (i64 i = 0; i < d.numel(); ++i) dt += d[i] * t[i];
        CHECK(std::abs(dt) < 1e-8);
      }
    }
  }
  SUBCASE("tampered components fail validation") {
    SyntheticSpec bad = spec;
    bad.templates[0][0] += 0.5;  // breaks unit norm
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    SyntheticSpec bad2 = spec;
    bad2.templates[1] = bad2.templates[0];  // breaks pairwise distinctness
    CHECK_THROWS_AS(bad2.validate(), ContractViolation);
  }
  SUBCASE("invalid knob combinations are rejected up front") {
    SyntheticConfig cfg = small_cfg();
    cfg.noise_sigma = -0.5;
    CHECK_THROWS_AS((void)make_synthetic_spec(cfg), ContractViolation);
    cfg = small_cfg();
    cfg.trials_per = 0;
    CHECK_THROWS_AS((void)make_synthetic_spec(cfg), ContractViolation);
  }
}

TEST_CASE("subject-level splits partition the trials") {
  SyntheticConfig cfg = small_cfg();
  cfg.n_subjects = 4;
  cfg.trials_per = 2;
  const auto trials = generate(make_synthetic_spec(cfg));

  SplitPlan plan;
  plan.train_subjects = {0, 1};
  plan.val_subjects = {2};
  plan.test_subjects = {3};
  const SplitResult parts = split(trials, plan);
  const i64 per_subject = cfg.n_classes * cfg.trials_per;
  CHECK(static_cast<i64>(parts.train.size()) == 2 * per_subject);
  CHECK(static_cast<i64>(parts.val.size()) == per_subject);
  CHECK(static_cast<i64>(parts.test.size()) == per_subject);
  for (const EegTrial& tr : parts.train) CHECK((tr.s == 0 || tr.s == 1));
  for (const EegTrial& tr : parts.val) CHECK(tr.s == 2);
  for (const EegTrial& tr : parts.test) CHECK(tr.s == 3);

  SUBCASE("an empty validation list is allowed") {
    SplitPlan p2;
    p2.train_subjects = {0, 1, 2};
    p2.test_subjects = {3};
    const SplitResult r2 = split(trials, p2);
    CHECK(r2.val.empty());
    CHECK(r2.train.size() + r2.test.size() == trials.size());
  }
  SUBCASE("a subject assigned twice is rejected") {
    SplitPlan p3;
    p3.train_subjects = {0, 1};
    p3.val_subjects = {1};
    p3.test_subjects = {2, 3};
    CHECK_THROWS_AS((void)split(trials, p3), ContractViolation);
  }
  SUBCASE("an unassigned subject is rejected") {
    SplitPlan p4;
    p4.train_subjects = {0, 1};
    p4.test_subjects = {3};  // subject 2 is dangling
    CHECK_THROWS_AS((void)split(trials, p4), ContractViolation);
  }
}

TEST_CASE("datasets round-trip through the container bitwise") {
  const SyntheticConfig cfg = small_cfg();
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  const Dataset ds = make_dataset(spec, generate(spec));
  const std::string path = tmp_path("ptsm_roundtrip.eegd");
  cleanup(path);
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  CHECK(back.channels == ds.channels);
  CHECK(back.samples == ds.samples);
  CHECK(back.n_classes == ds.n_classes);
  CHECK(back.n_subjects == ds.n_subjects);
  REQUIRE(back.trials.size() == ds.trials.size());
  for (size_t i = 0; i < ds.trials.size(); ++i) {
    CHECK(back.trials[i].y == ds.trials[i].y);
    CHECK(back.trials[i].s == ds.trials[i].s);
    CHECK(same_bits(back.trials[i].x, ds.trials[i].x));
  }
  CHECK(back.meta == ds.meta);

  SUBCASE("saving the loaded copy reproduces the file byte for byte") {
    const std::string path2 = tmp_path("ptsm_roundtrip2.eegd");
    cleanup(path2);
    save_dataset(back, path2);
    CHECK(slurp(path) == slurp(path2));
    cleanup(path2);
  }
  cleanup(path);
}

TEST_CASE("corrupted containers fail with the documented error kinds") {
  SyntheticConfig cfg = small_cfg();
  cfg.trials_per = 1;
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  const Dataset ds = make_dataset(spec, generate(spec));
  const std::string path = tmp_path("ptsm_corrupt.eegd");
  cleanup(path);
  save_dataset(ds, path);
  const std::vector<unsigned char> good = slurp(path);

  auto expect_kind = [&](const std::vector<unsigned char>& bytes, DatasetError::Kind kind) {
    spit(path, bytes);
    try {
      (void)load_dataset(path);
      FAIL("expected a DatasetError");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == kind);
    }
  };

  SUBCASE("wrong magic") {
    std::vector<unsigned char> bad = good;
    bad[0] = 'X';
    expect_kind(bad, DatasetError::Kind::BadMagic);
  }
  SUBCASE("unsupported version") {
    std::vector<unsigned char> bad = good;
    bad[4] = 9;
    expect_kind(bad, DatasetError::Kind::BadVersion);
  }
  SUBCASE("truncated payload") {
    std::vector<unsigned char> bad = good;
    bad.resize(bad.size() - 10);
    expect_kind(bad, DatasetError::Kind::Truncated);
  }
  SUBCASE("flipped payload byte") {
    std::vector<unsigned char> bad = good;
    bad[bad.size() / 2] ^= 0x40;
    expect_kind(bad, DatasetError::Kind::ChecksumMismatch);
  }
  SUBCASE("trailing garbage") {
    std::vector<unsigned char> bad = good;
    bad.push_back(0);
    expect_kind(bad, DatasetError::Kind::InvalidField);
  }
  SUBCASE("out-of-range label with a recomputed checksum") {
    std::vector<unsigned char> bad = good;
    bad[25] = 0xFF;  // first trial's label, low byte
    const std::uint32_t crc = binio::crc32(bad.data(), bad.size() - 4);
    bad[bad.size() - 4] = static_cast<unsigned char>(crc & 0xFF);
    bad[bad.size() - 3] = static_cast<unsigned char>((crc >> 8) & 0xFF);
    bad[bad.size() - 2] = static_cast<unsigned char>((crc >> 16) & 0xFF);
    bad[bad.size() - 1] = static_cast<unsigned char>((crc >> 24) & 0xFF);
    expect_kind(bad, DatasetError::Kind::InvalidField);
  }
  SUBCASE("missing file") {
    std::filesystem::remove(path);
    CHECK_THROWS_AS((void)load_dataset(path), DatasetError);
  }
  cleanup(path);
}

TEST_CASE("sidecar handling is lenient to absence, strict to corruption") {
  SyntheticConfig cfg = small_cfg();
  cfg.trials_per = 1;
  const SyntheticSpec spec = make_synthetic_spec(cfg);
  const Dataset ds = make_dataset(spec, generate(spec));
  const std::string path = tmp_path("ptsm_sidecar.eegd");
  cleanup(path);
  save_dataset(ds, path);

  SUBCASE("a deleted sidecar degrades to empty metadata") {
    std::filesystem::remove(path + ".json");
    const Dataset back = load_dataset(path);
    CHECK(back.meta.is_object());
    CHECK(back.meta.empty());
  }
  SUBCASE("an unparseable sidecar is an invalid-field error") {
    std::ofstream bad(path + ".json", std::ios::trunc);
    bad << "{not json";
    bad.close();
    try {
      (void)load_dataset(path);
      FAIL("expected a DatasetError");
    } catch (const DatasetError& e) {
      CHECK(e.kind() == DatasetError::Kind::InvalidField);
    }
  }
  cleanup(path);
}
