#include "ptsm/metrics.hpp"

#include <cstdio>

#include "ptsm/errors.hpp"

namespace ptsm {

std::string percent_str(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}

MetricsReport compute_metrics(const std::vector<i64>& predictions,
                              const std::vector<i64>& labels, i64 n_classes) {
  check_contract(predictions.size() == labels.size(),
                 "predictions and labels must have equal length");
  check_contract(!labels.empty(), "metrics need at least one sample");
  check_contract(n_classes >= 2, "metrics need at least two classes");

  MetricsReport rep;
  rep.n = static_cast<i64>(labels.size());
  rep.n_classes = n_classes;
  rep.confusion = Tensor(Shape{n_classes, n_classes});
  for (size_t i = 0; i < labels.size(); ++i) {
    const i64 y = labels[i];
    const i64 p = predictions[i];
    check_contract(y >= 0 && y < n_classes, "label out of range");
    check_contract(p >= 0 && p < n_classes, "prediction out of range");
    rep.confusion.at(y, p) += 1.0;
  }

  double trace = 0.0;
  for (i64 k = 0; k < n_classes; ++k) trace += rep.confusion.at(k, k);
  rep.accuracy = trace / static_cast<double>(rep.n);

  const double n = static_cast<double>(rep.n);
  std::vector<double> sens_k(static_cast<size_t>(n_classes));
  std::vector<double> spec_k(static_cast<size_t>(n_classes));
  rep.per_class_f1.assign(static_cast<size_t>(n_classes), 0.0);
  double f1_sum = 0.0;
  for (i64 k = 0; k < n_classes; ++k) {
    double row = 0.0, col = 0.0;
    for (i64 j = 0; j < n_classes; ++j) {
      row += rep.confusion.at(k, j);
      col += rep.confusion.at(j, k);
    }
    const double tp = rep.confusion.at(k, k);
    const double fn = row - tp;
    const double fp = col - tp;
    const double tn = n - tp - fn - fp;
    if (row == 0.0 && col == 0.0) rep.absent_class = true;
    const double prec = (tp + fp) > 0.0 ? tp / (tp + fp) : 0.0;
    const double rec = (tp + fn) > 0.0 ? tp / (tp + fn) : 0.0;
    sens_k[static_cast<size_t>(k)] = rec;
    spec_k[static_cast<size_t>(k)] = (tn + fp) > 0.0 ? tn / (tn + fp) : 0.0;
    const double f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    rep.per_class_f1[static_cast<size_t>(k)] = f1;
    f1_sum += f1;
  }
  rep.macro_f1 = f1_sum / static_cast<double>(n_classes);

  if (n_classes == 2) {
    // Class 1 is the positive class.
    rep.sensitivity = sens_k[1];
    rep.specificity = spec_k[1];
  } else {
    double sens = 0.0, spec = 0.0;
    for (i64 k = 0; k < n_classes; ++k) {
      sens += sens_k[static_cast<size_t>(k)];
      spec += spec_k[static_cast<size_t>(k)];
    }
    rep.sensitivity = sens / static_cast<double>(n_classes);
    rep.specificity = spec / static_cast<double>(n_classes);
  }
  return rep;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["n_classes"] = n_classes;
  j["accuracy"] = accuracy;
  j["macro_f1"] = macro_f1;
  j["sensitivity"] = sensitivity;
  j["specificity"] = specificity;
  j["per_class_f1"] = per_class_f1;
  j["absent_class"] = absent_class;
  std::vector<std::vector<double>> conf(static_cast<size_t>(n_classes));
  for (i64 r = 0; r < n_classes; ++r) {
    conf[static_cast<size_t>(r)].resize(static_cast<size_t>(n_classes));
    for (i64 c = 0; c < n_classes; ++c)
      conf[static_cast<size_t>(r)][static_cast<size_t>(c)] = confusion.at(r, c);
  }
  j["confusion"] = conf;
  j["percent"] = {{"accuracy", percent_str(accuracy)},
                  {"macro_f1", percent_str(macro_f1)},
                  {"sensitivity", percent_str(sensitivity)},
                  {"specificity", percent_str(specificity)}};
  return j;
}

}  // namespace ptsm
