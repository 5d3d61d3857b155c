#include "ptsm/synthdata.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <string>

#include "ptsm/binio.hpp"
#include "ptsm/errors.hpp"

namespace ptsm {

namespace {

double dot(const Tensor& a, const Tensor& b) {
  check_contract(a.numel() == b.numel(), "dot length mismatch");
  double acc = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

void scale_inplace(Tensor& a, double c) {
  for (i64 i = 0; i < a.numel(); ++i) a[i] *= c;
}

double l2_dist(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

/// Centered 5-sample moving average with edge truncation; keeps waveforms
/// band-limited so the separability assumptions hold by construction.
Tensor smooth5(const Tensor& x) {
  const i64 t_len = x.numel();
  Tensor out(Shape{t_len});
  for (i64 t = 0; t < t_len; ++t) {
    const i64 lo = std::max<i64>(0, t - 2);
    const i64 hi = std::min<i64>(t_len - 1, t + 2);
    double acc = 0.0;
    for (i64 u = lo; u <= hi; ++u) acc += x[u];
    out[t] = acc / static_cast<double>(hi - lo + 1);
  }
  return out;
}

constexpr double kMinPairwiseDist = 0.1;
constexpr int kMaxDraws = 1000;

/// Draw smoothed unit-norm waveforms (or plain unit vectors) that stay at
/// least kMinPairwiseDist apart from each other in L2.
std::vector<Tensor> draw_distinct(Rng& rng, i64 len, i64 count, bool smoothed) {
  std::vector<Tensor> out;
  int attempts = 0;
  while (static_cast<i64>(out.size()) < count) {
    check_contract(++attempts <= kMaxDraws, "could not draw pairwise-distinct components");
    Tensor v = Tensor::randn(Shape{len}, rng);
    if (smoothed) v = smooth5(v);
    const double n = norm(v);
    if (n < 1e-9) continue;
    scale_inplace(v, 1.0 / n);
    bool ok = true;
    for (const Tensor& prev : out) {
      if (l2_dist(v, prev) <= kMinPairwiseDist) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  check_contract(channels >= 1 && samples >= 1, "synthetic spec needs positive dimensions");
  check_contract(n_classes >= 1 && n_subjects >= 1 && trials_per >= 1,
                 "synthetic spec needs at least one class, subject, and trial");
  check_contract(noise_sigma >= 0.0 && std::isfinite(noise_sigma),
                 "noise sigma must be finite and non-negative");
  check_contract(std::isfinite(task_gain) && task_gain >= 0.0, "task gain must be finite");
  check_contract(static_cast<i64>(templates.size()) == n_classes, "one template per class");
  check_contract(static_cast<i64>(signatures.size()) == n_subjects, "one signature per subject");
  check_contract(static_cast<i64>(drifts.size()) == n_subjects, "one drift per subject");
  check_contract(static_cast<i64>(subject_gains.size()) == n_subjects, "one gain per subject");
  check_contract(task_loading.numel() == channels, "loading length must match channels");
  check_contract(std::abs(norm(task_loading) - 1.0) < 1e-6, "loading must be unit norm");
  for (const Tensor& t : templates) {
    check_contract(t.numel() == samples, "template length must match samples");
    check_contract(std::abs(norm(t) - 1.0) < 1e-6, "templates must be unit norm");
  }
  for (const Tensor& s : signatures) {
    check_contract(s.numel() == channels, "signature length must match channels");
    check_contract(std::abs(norm(s) - 1.0) < 1e-6, "signatures must be unit norm");
  }
  for (const Tensor& d : drifts) {
    check_contract(d.numel() == samples, "drift length must match samples");
    check_contract(std::abs(norm(d) - 1.0) < 1e-6, "drifts must be unit norm");
  }
  for (double g : subject_gains)
    check_contract(std::isfinite(g) && g >= 0.0, "subject gains must be finite");
  for (i64 a = 0; a < n_classes; ++a)
    for (i64 b = a + 1; b < n_classes; ++b)
      check_contract(l2_dist(templates[a], templates[b]) > kMinPairwiseDist,
                     "templates must be pairwise distinct");
  for (i64 a = 0; a < n_subjects; ++a)
    for (i64 b = a + 1; b < n_subjects; ++b)
      check_contract(l2_dist(signatures[a], signatures[b]) > kMinPairwiseDist,
                     "signatures must be pairwise distinct");
}

SyntheticSpec make_synthetic_spec(const SyntheticConfig& cfg) {
  check_contract(cfg.channels >= 1 && cfg.samples >= 1, "need positive dimensions");
  check_contract(cfg.n_classes >= 1 && cfg.n_subjects >= 1 && cfg.trials_per >= 1,
                 "need at least one class, subject, and trial");
  check_contract(cfg.noise_sigma >= 0.0 && std::isfinite(cfg.noise_sigma),
                 "noise sigma must be finite and non-negative");
  check_contract(cfg.task_gain >= 0.0 && cfg.subject_gain >= 0.0 &&
                     std::isfinite(cfg.task_gain) && std::isfinite(cfg.subject_gain),
                 "gains must be finite and non-negative");

  SyntheticSpec spec;
  spec.channels = cfg.channels;
  spec.samples = cfg.samples;
  spec.n_classes = cfg.n_classes;
  spec.n_subjects = cfg.n_subjects;
  spec.trials_per = cfg.trials_per;
  spec.noise_sigma = cfg.noise_sigma;
  spec.task_gain = cfg.task_gain;
  spec.subject_gain_base = cfg.subject_gain;
  spec.seed = cfg.seed;

  Rng root(cfg.seed);
  Rng tmpl_rng = root.split(1);
  Rng sig_rng = root.split(2);
  Rng drift_rng = root.split(3);
  Rng gain_rng = root.split(4);

  spec.templates = draw_distinct(tmpl_rng, cfg.samples, cfg.n_classes, /*smoothed=*/true);

  spec.task_loading = Tensor::full(Shape{cfg.channels}, 1.0 / std::sqrt(static_cast<double>(cfg.channels)));

  spec.signatures = draw_distinct(sig_rng, cfg.channels, cfg.n_subjects, /*smoothed=*/false);

  // Orthonormal basis spanning the constant waveform and every template; each
  // drift is projected out of that span so within-subject means recover the
  // subject component exactly when noise is off.
  std::vector<Tensor> basis;
  {
    Tensor ones = Tensor::full(Shape{cfg.samples}, 1.0);
    scale_inplace(ones, 1.0 / norm(ones));
    basis.push_back(ones);
  }
  for (const Tensor& t : spec.templates) {
    Tensor v = t;
    for (const Tensor& b : basis) v.add_scaled(b, -dot(v, b));
    const double n = norm(v);
    if (n > 1e-8) {
      scale_inplace(v, 1.0 / n);
      basis.push_back(std::move(v));
    }
  }
  int attempts = 0;
  while (static_cast<i64>(spec.drifts.size()) < cfg.n_subjects) {
    check_contract(++attempts <= kMaxDraws, "could not draw subject drift waveforms");
    Tensor d = smooth5(Tensor::randn(Shape{cfg.samples}, drift_rng));
    for (const Tensor& b : basis) d.add_scaled(b, -dot(d, b));
    const double n = norm(d);
    if (n < 1e-6) continue;
    scale_inplace(d, 1.0 / n);
    spec.drifts.push_back(std::move(d));
  }

  spec.subject_gains.reserve(static_cast<size_t>(cfg.n_subjects));
  for (i64 s = 0; s < cfg.n_subjects; ++s)
    spec.subject_gains.push_back(cfg.subject_gain * gain_rng.uniform(0.8, 1.2));

  spec.validate();
  return spec;
}

std::vector<EegTrial> generate(const SyntheticSpec& spec, GeneratorReport* report) {
  spec.validate();
  const i64 c_n = spec.channels;
  const i64 t_n = spec.samples;
  Rng noise_rng = Rng(spec.seed).split(5);

  std::vector<EegTrial> trials;
  trials.reserve(static_cast<size_t>(spec.n_subjects * spec.n_classes * spec.trials_per));
  for (i64 s = 0; s < spec.n_subjects; ++s) {
    for (i64 k = 0; k < spec.n_classes; ++k) {
      for (i64 rep = 0; rep < spec.trials_per; ++rep) {
        EegTrial tr;
        tr.y = k;
        tr.s = s;
        tr.x = Tensor(Shape{c_n, t_n});
        for (i64 c = 0; c < c_n; ++c) {
          const double task_c = spec.task_gain * spec.task_loading[c];
          const double subj_c = spec.subject_gains[static_cast<size_t>(s)] * spec.signatures[static_cast<size_t>(s)][c];
          for (i64 t = 0; t < t_n; ++t) {
            double v = task_c * spec.templates[static_cast<size_t>(k)][t] +
                       subj_c * spec.drifts[static_cast<size_t>(s)][t];
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise_rng.normal();
            tr.x.at(c, t) = v;
          }
        }
        trials.push_back(std::move(tr));
      }
    }
  }

  // Per-channel z-scoring over the full set (two-pass, population std).
  Tensor mean(Shape{c_n});
  Tensor stdev(Shape{c_n});
  const double count = static_cast<double>(trials.size()) * static_cast<double>(t_n);
  for (i64 c = 0; c < c_n; ++c) {
    double acc = 0.0;
    for (const EegTrial& tr : trials)
      for (i64 t = 0; t < t_n; ++t) acc += tr.x.at(c, t);
    mean[c] = acc / count;
  }
  for (i64 c = 0; c < c_n; ++c) {
    double acc = 0.0;
    for (const EegTrial& tr : trials)
      for (i64 t = 0; t < t_n; ++t) {
        const double d = tr.x.at(c, t) - mean[c];
        acc += d * d;
      }
    stdev[c] = std::max(std::sqrt(acc / count), 1e-12);
  }
  for (EegTrial& tr : trials)
    for (i64 c = 0; c < c_n; ++c)
      for (i64 t = 0; t < t_n; ++t) tr.x.at(c, t) = (tr.x.at(c, t) - mean[c]) / stdev[c];

  if (report != nullptr) {
    report->channel_mean = mean;
    report->channel_std = stdev;
  }
  return trials;
}

void SplitPlan::validate() const {
  std::set<i64> seen;
  auto check_list = [&seen](const std::vector<i64>& ids) {
    for (i64 id : ids) {
      check_contract(id >= 0, "subject ids must be non-negative");
      check_contract(seen.insert(id).second, "split plan lists a subject twice");
    }
  };
  check_list(train_subjects);
  check_list(val_subjects);
  check_list(test_subjects);
}

SplitResult split(const std::vector<EegTrial>& trials, const SplitPlan& plan) {
  plan.validate();
  std::set<i64> train_ids(plan.train_subjects.begin(), plan.train_subjects.end());
  std::set<i64> val_ids(plan.val_subjects.begin(), plan.val_subjects.end());
  std::set<i64> test_ids(plan.test_subjects.begin(), plan.test_subjects.end());
  SplitResult out;
  for (const EegTrial& tr : trials) {
    if (train_ids.count(tr.s)) {
      out.train.push_back(tr);
    } else if (val_ids.count(tr.s)) {
      out.val.push_back(tr);
    } else if (test_ids.count(tr.s)) {
      out.test.push_back(tr);
    } else {
      throw ContractViolation("trial subject " + std::to_string(tr.s) +
                              " is not assigned by the split plan");
    }
  }
  return out;
}

nlohmann::json synthetic_meta(const SyntheticSpec& spec) {
  nlohmann::json j;
  j["format"] = "EEGD";
  j["version"] = 1;
  j["channels"] = spec.channels;
  j["samples"] = spec.samples;
  j["n_classes"] = spec.n_classes;
  j["n_subjects"] = spec.n_subjects;
  j["trials_per"] = spec.trials_per;
  j["noise_model"] = "gaussian_iid";
  j["noise_sigma"] = spec.noise_sigma;
  j["task_gain"] = spec.task_gain;
  j["subject_gain_base"] = spec.subject_gain_base;
  j["subject_gains"] = spec.subject_gains;
  j["seed"] = spec.seed;
  return j;
}

Dataset make_dataset(const SyntheticSpec& spec, std::vector<EegTrial> trials) {
  Dataset ds;
  ds.trials = std::move(trials);
  ds.channels = spec.channels;
  ds.samples = spec.samples;
  ds.n_classes = spec.n_classes;
  ds.n_subjects = spec.n_subjects;
  ds.meta = synthetic_meta(spec);
  return ds;
}

namespace {
constexpr unsigned char kMagic[4] = {'E', 'E', 'G', 'D'};
constexpr std::uint8_t kFormatVersion = 1;
constexpr i64 kMaxElements = 1LL << 30;  // refuse absurd headers before allocating
}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  check_contract(ds.channels >= 1 && ds.samples >= 1, "dataset needs positive dimensions");
  check_contract(ds.n_classes >= 1 && ds.n_subjects >= 1, "dataset needs class/subject counts");
  for (const EegTrial& tr : ds.trials) {
    check_contract(tr.x.rank() == 2 && tr.x.dim(0) == ds.channels && tr.x.dim(1) == ds.samples,
                   "trial shape does not match dataset header");
    check_contract(tr.y >= 0 && tr.y < ds.n_classes, "trial label out of range");
    check_contract(tr.s >= 0 && tr.s < ds.n_subjects, "trial subject out of range");
  }

  std::vector<unsigned char> buf;
  buf.reserve(32 + ds.trials.size() * (8 + static_cast<size_t>(ds.channels * ds.samples) * 8));
  binio::put_bytes(buf, kMagic, 4);
  binio::put_u8(buf, kFormatVersion);
  binio::put_u32(buf, static_cast<std::uint32_t>(ds.channels));
  binio::put_u32(buf, static_cast<std::uint32_t>(ds.samples));
  binio::put_u32(buf, static_cast<std::uint32_t>(ds.trials.size()));
  binio::put_u32(buf, static_cast<std::uint32_t>(ds.n_classes));
  binio::put_u32(buf, static_cast<std::uint32_t>(ds.n_subjects));
  for (const EegTrial& tr : ds.trials) {
    binio::put_u32(buf, static_cast<std::uint32_t>(tr.y));
    binio::put_u32(buf, static_cast<std::uint32_t>(tr.s));
    for (i64 i = 0; i < tr.x.numel(); ++i) binio::put_f64(buf, tr.x[i]);
  }
  binio::put_u32(buf, binio::crc32(buf.data(), buf.size()));

  binio::atomic_write_file(path, buf);
  binio::atomic_write_text(path + ".json", ds.meta.dump(2) + "\n");
}

Dataset load_dataset(const std::string& path) {
  std::vector<unsigned char> bytes = binio::read_file(path);
  if (bytes.size() < 4)
    throw DatasetError(DatasetError::Kind::Truncated, "file too short for a header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DatasetError(DatasetError::Kind::BadMagic, "not an EEGD file");
  if (bytes.size() < 5)
    throw DatasetError(DatasetError::Kind::Truncated, "file ends before the version byte");
  if (bytes[4] != kFormatVersion)
    throw DatasetError(DatasetError::Kind::BadVersion,
                       "unsupported EEGD version " + std::to_string(bytes[4]));

  binio::Reader r(bytes.data() + 5, bytes.size() - 5);
  const i64 channels = r.u32();
  const i64 samples = r.u32();
  const i64 n_trials = r.u32();
  const i64 n_classes = r.u32();
  const i64 n_subjects = r.u32();
  if (channels < 1 || samples < 1 || n_classes < 1 || n_subjects < 1)
    throw DatasetError(DatasetError::Kind::InvalidField, "header dimensions must be positive");
  if (channels * samples > kMaxElements || n_trials * channels * samples > kMaxElements)
    throw DatasetError(DatasetError::Kind::InvalidField, "header describes an implausibly large payload");

  const std::size_t expected = 5 + 20 +
                               static_cast<std::size_t>(n_trials) *
                                   (8 + static_cast<std::size_t>(channels * samples) * 8) +
                               4;
  if (bytes.size() < expected)
    throw DatasetError(DatasetError::Kind::Truncated, "payload shorter than the header promises");
  if (bytes.size() > expected)
    throw DatasetError(DatasetError::Kind::InvalidField, "trailing bytes after the checksum");

  const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                               (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  const std::uint32_t actual = binio::crc32(bytes.data(), bytes.size() - 4);
  if (stored != actual)
    throw DatasetError(DatasetError::Kind::ChecksumMismatch, "CRC32 does not match the payload");

  Dataset ds;
  ds.channels = channels;
  ds.samples = samples;
  ds.n_classes = n_classes;
  ds.n_subjects = n_subjects;
  ds.trials.reserve(static_cast<size_t>(n_trials));
  for (i64 i = 0; i < n_trials; ++i) {
    EegTrial tr;
    tr.y = r.u32();
    tr.s = r.u32();
    if (tr.y >= n_classes)
      throw DatasetError(DatasetError::Kind::InvalidField, "trial label out of range");
    if (tr.s >= n_subjects)
      throw DatasetError(DatasetError::Kind::InvalidField, "trial subject out of range");
    tr.x = Tensor(Shape{channels, samples});
    for (i64 j = 0; j < channels * samples; ++j) {
      const double v = r.f64();
      if (!std::isfinite(v))
        throw DatasetError(DatasetError::Kind::InvalidField, "trial contains non-finite samples");
      tr.x[j] = v;
    }
    ds.trials.push_back(std::move(tr));
  }

  std::ifstream side(path + ".json");
  if (side) {
    try {
      side >> ds.meta;
    } catch (const nlohmann::json::exception&) {
      throw DatasetError(DatasetError::Kind::InvalidField, "metadata sidecar is not valid JSON");
    }
  } else {
    ds.meta = nlohmann::json::object();
  }
  return ds;
}

}  // namespace ptsm
