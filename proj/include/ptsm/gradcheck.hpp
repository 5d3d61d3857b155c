#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ptsm/rng.hpp"
#include "ptsm/tensor.hpp"

namespace ptsm {

/// Scalar objective evaluated at a full parameter set. Must be deterministic:
/// two calls with the same tensors return bit-identical values.
using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

struct GradCheckEntry {
  std::string param;
  i64 index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  i64 worst_index = -1;
  std::vector<double> per_param_max;      // aligned with `names`
  std::vector<std::string> names;
  std::vector<GradCheckEntry> failures;   // entries with rel_err > tol
  i64 probes = 0;

  bool ok() const { return failures.empty(); }
};

/// Compare analytic gradients against central finite differences of f.
/// Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// With max_probes_per_param >= 0, that many entries per parameter are sampled
/// (all of them when the parameter is smaller); probe_rng picks the sample.
/// Throws NumericError naming the parameter if f is non-finite at a probe point.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params,
                           const std::vector<Tensor>& analytic, std::vector<std::string> names,
                           double step, double tol, i64 max_probes_per_param = -1,
                           Rng* probe_rng = nullptr);

}  // namespace ptsm
