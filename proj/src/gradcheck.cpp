#include "ptsm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ptsm/errors.hpp"

namespace ptsm {

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params,
                           const std::vector<Tensor>& analytic, std::vector<std::string> names,
                           double step, double tol, i64 max_probes_per_param, Rng* probe_rng) {
  check_contract(step > 0.0, "finite-difference step must be positive");
  check_contract(params.size() == analytic.size() && params.size() == names.size(),
                 "grad_check: params, gradients and names must align");

  GradCheckReport report;
  report.names = names;
  report.per_param_max.assign(names.size(), 0.0);

  std::vector<Tensor> work = params;
  for (size_t p = 0; p < work.size(); ++p) {
    check_contract(work[p].same_shape(analytic[p]),
                   "grad_check: gradient shape mismatch for " + names[p]);
    const i64 n = work[p].numel();

    std::vector<i64> probes;
    if (max_probes_per_param < 0 || n <= max_probes_per_param) {
      probes.resize(static_cast<size_t>(n));
      for (i64 i = 0; i < n; ++i) probes[static_cast<size_t>(i)] = i;
    } else {
      std::vector<i64> all(static_cast<size_t>(n));
      for (i64 i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      check_contract(probe_rng != nullptr, "grad_check: probe sampling needs an rng");
      for (i64 i = 0; i < max_probes_per_param; ++i) {
        const i64 j = i + probe_rng->uniform_int(n - i);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
      }
      probes.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_probes_per_param));
      std::sort(probes.begin(), probes.end());
    }

    for (i64 idx : probes) {
      const double saved = work[p][idx];
      work[p][idx] = saved + step;
      const double fp = f(work);
      work[p][idx] = saved - step;
      const double fm = f(work);
      work[p][idx] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError(names[p], "objective is non-finite at a finite-difference probe");

      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[p][idx];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
      ++report.probes;
      report.per_param_max[p] = std::max(report.per_param_max[p], rel);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = names[p];
        report.worst_index = idx;
      }
      if (rel > tol) report.failures.push_back({names[p], idx, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace ptsm
