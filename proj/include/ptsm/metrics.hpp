#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "ptsm/tensor.hpp"

namespace ptsm {

struct MetricsReport {
  i64 n = 0;
  i64 n_classes = 0;
  Tensor confusion;  // (K, K); rows are true labels, columns predictions
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double sensitivity = 0.0;  // binary: class 1 recall; K>2: macro one-vs-rest
  double specificity = 0.0;  // binary: class 0 recall; K>2: macro one-vs-rest
  std::vector<double> per_class_f1;
  bool absent_class = false;  // a class appeared in neither predictions nor labels

  nlohmann::json to_json() const;
};

MetricsReport compute_metrics(const std::vector<i64>& predictions,
                              const std::vector<i64>& labels, i64 n_classes);

/// Render a fraction as a percentage with two decimals ("0.8" -> "80.00").
std::string percent_str(double fraction);

}  // namespace ptsm
