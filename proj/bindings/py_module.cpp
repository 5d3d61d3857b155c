// Python module exposing the main operations: synthetic data, training,
// prediction, few-shot personalization, masks, metrics, checkpoints, and the
// gradient audit. Arrays cross the boundary as float64/int64 numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "ptsm/checkpoint.hpp"
#include "ptsm/config.hpp"
#include "ptsm/errors.hpp"
#include "ptsm/experiment.hpp"
#include "ptsm/metrics.hpp"
#include "ptsm/synthdata.hpp"
#include "ptsm/trainer.hpp"
#include "ptsm/version.hpp"

namespace py = pybind11;
using namespace ptsm;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IArray = py::array_t<i64, py::array::c_style | py::array::forcecast>;

Tensor batch_tensor(const DArray& x) {
  if (x.ndim() != 3) throw ContractViolation("x must have shape (n, channels, samples)");
  Tensor t(Shape{x.shape(0), x.shape(1), x.shape(2)});
  std::memcpy(t.data(), x.data(), sizeof(double) * static_cast<size_t>(t.numel()));
  return t;
}

std::vector<EegTrial> to_trials(const DArray& x, const IArray& y, const IArray& s) {
  if (x.ndim() != 3) throw ContractViolation("x must have shape (n, channels, samples)");
  if (y.ndim() != 1 || s.ndim() != 1 || y.shape(0) != x.shape(0) || s.shape(0) != x.shape(0))
    throw ContractViolation("y and s must be 1-d arrays matching x's first dimension");
  const i64 n = x.shape(0), c = x.shape(1), t = x.shape(2);
  std::vector<EegTrial> out;
  out.reserve(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) {
    EegTrial tr;
    tr.x = Tensor(Shape{c, t});
    std::memcpy(tr.x.data(), x.data() + i * c * t, sizeof(double) * static_cast<size_t>(c * t));
    tr.y = y.at(i);
    tr.s = s.at(i);
    out.push_back(std::move(tr));
  }
  return out;
}

py::array_t<double> from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  for (i64 d = 0; d < t.rank(); ++d) shape.push_back(static_cast<py::ssize_t>(t.dim(d)));
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.data(), sizeof(double) * static_cast<size_t>(t.numel()));
  return out;
}

py::dict trials_to_dict(const std::vector<EegTrial>& trials) {
  if (trials.empty()) throw ContractViolation("empty trial list");
  const i64 n = static_cast<i64>(trials.size());
  const i64 c = trials[0].x.dim(0), t = trials[0].x.dim(1);
  py::array_t<double> x({n, c, t});
  py::array_t<i64> y(static_cast<py::ssize_t>(n)), s(static_cast<py::ssize_t>(n));
  for (i64 i = 0; i < n; ++i) {
    std::memcpy(x.mutable_data() + i * c * t, trials[static_cast<size_t>(i)].x.data(),
                sizeof(double) * static_cast<size_t>(c * t));
    y.mutable_at(i) = trials[static_cast<size_t>(i)].y;
    s.mutable_at(i) = trials[static_cast<size_t>(i)].s;
  }
  py::dict d;
  d["x"] = std::move(x);
  d["y"] = std::move(y);
  d["s"] = std::move(s);
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  py::module_ pyjson = py::module_::import("json");
  return pyjson.attr("loads")(j.dump());
}

/// Python-facing handle bundling a model with its optimizer state, so a
/// fit → save → load → predict round trip stays faithful.
class PyModel {
 public:
  explicit PyModel(const std::string& config_json)
      : state_(config_from_json(config_json)) {}
  explicit PyModel(TrainState st) : state_(std::move(st)) {}

  static PyModel load(const std::string& path) {
    return PyModel(state_from_checkpoint(load_checkpoint(path)));
  }
  void save(const std::string& path) {
    save_checkpoint(state_to_checkpoint(state_), path);
  }

  std::string config_json() { return config_to_json(state_.model.config()); }

  py::dict fit_arrays(const DArray& xt, const IArray& yt, const IArray& st, const DArray& xv,
                      const IArray& yv, const IArray& sv) {
    FitResult fr = fit(state_.model.config(), to_trials(xt, yt, st), to_trials(xv, yv, sv));
    state_ = std::move(fr.state);
    py::list history;
    for (const EpochLog& e : fr.history) {
      py::dict row;
      row["epoch"] = e.epoch;
      row["total"] = e.losses.total;
      row["task"] = e.losses.task;
      row["val_accuracy"] = e.val_accuracy;
      row["val_macro_f1"] = e.val_macro_f1;
      history.append(std::move(row));
    }
    py::dict out;
    out["best_epoch"] = fr.best_epoch;
    out["best_val_accuracy"] = fr.best_val_accuracy;
    out["history"] = std::move(history);
    return out;
  }

  py::array_t<double> predict_probs(const DArray& x) {
    return from_tensor(state_.model.predict_probs(batch_tensor(x)));
  }

  py::array_t<i64> predict(const DArray& x) {
    const std::vector<i64> y = state_.model.predict(batch_tensor(x));
    py::array_t<i64> out(static_cast<py::ssize_t>(y.size()));
    std::memcpy(out.mutable_data(), y.data(), sizeof(i64) * y.size());
    return out;
  }

  PyModel adapt(const DArray& x, const IArray& y, const IArray& s, i64 steps, double eta) {
    return PyModel(adapt_few_shot(state_, to_trials(x, y, s), steps, eta));
  }

  py::object masks(const DArray& x, const IArray& y, const IArray& s) {
    return json_to_py(masks_json(state_.model, to_trials(x, y, s)));
  }

  double accuracy(const DArray& x, const IArray& y, const IArray& s) {
    return evaluate_accuracy(state_.model, to_trials(x, y, s));
  }

  TrainState& state() { return state_; }

 private:
  TrainState state_;
};

}  // namespace

PYBIND11_MODULE(_ptsm, m) {
  m.doc() = "Cross-subject EEG decoder with learned spatio-temporal masks";
  m.attr("__version__") = kVersion;

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DatasetError>(m, "DatasetError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("default_config", []() { return config_to_json(PtsmConfig{}); },
        "Default configuration as a JSON string");
  m.def("config_hash", [](const std::string& text) { return config_hash(config_from_json(text)); },
        py::arg("config_json"));

  m.def(
      "generate",
      [](i64 channels, i64 samples, i64 classes, i64 subjects, i64 trials_per,
         double noise_sigma, double task_gain, double subject_gain, u64 seed) {
        SyntheticConfig c;
        c.channels = channels;
        c.samples = samples;
        c.n_classes = classes;
        c.n_subjects = subjects;
        c.trials_per = trials_per;
        c.noise_sigma = noise_sigma;
        c.task_gain = task_gain;
        c.subject_gain = subject_gain;
        c.seed = seed;
        return trials_to_dict(generate(make_synthetic_spec(c)));
      },
      py::arg("channels") = 8, py::arg("samples") = 128, py::arg("classes") = 2,
      py::arg("subjects") = 6, py::arg("trials_per") = 40, py::arg("noise_sigma") = 0.5,
      py::arg("task_gain") = 1.0, py::arg("subject_gain") = 1.0, py::arg("seed") = 1,
      "Draw a synthetic dataset; returns {'x': (n,C,T), 'y': (n,), 's': (n,)}");

  m.def(
      "save_dataset",
      [](const std::string& path, const DArray& x, const IArray& y, const IArray& s,
         i64 classes, i64 subjects) {
        Dataset ds;
        ds.trials = to_trials(x, y, s);
        ds.channels = x.shape(1);
        ds.samples = x.shape(2);
        ds.n_classes = classes;
        ds.n_subjects = subjects;
        ds.meta = nlohmann::json::object();
        save_dataset(ds, path);
      },
      py::arg("path"), py::arg("x"), py::arg("y"), py::arg("s"), py::arg("classes"),
      py::arg("subjects"));

  m.def(
      "load_dataset",
      [](const std::string& path) {
        Dataset ds = load_dataset(path);
        py::dict d = trials_to_dict(ds.trials);
        d["n_classes"] = ds.n_classes;
        d["n_subjects"] = ds.n_subjects;
        d["meta"] = json_to_py(ds.meta);
        return d;
      },
      py::arg("path"));

  m.def(
      "compute_metrics",
      [](const std::vector<i64>& predictions, const std::vector<i64>& labels, i64 n_classes) {
        return json_to_py(compute_metrics(predictions, labels, n_classes).to_json());
      },
      py::arg("predictions"), py::arg("labels"), py::arg("n_classes"));

  m.def(
      "gradcheck",
      [](double tol, u64 seed) {
        py::list out;
        for (const GradcheckCase& c : run_loss_gradchecks(tol, seed)) {
          py::dict d;
          d["name"] = c.name;
          d["max_rel_err"] = c.max_rel_err;
          d["probes"] = c.probes;
          d["ok"] = c.ok;
          out.append(std::move(d));
        }
        return out;
      },
      py::arg("tol") = 1e-4, py::arg("seed") = 1234,
      "Finite-difference audit of every loss term; list of per-case reports");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("config_json"),
           "Fresh model from a JSON configuration")
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("save", &PyModel::save, py::arg("path"))
      .def("config", &PyModel::config_json)
      .def("fit", &PyModel::fit_arrays, py::arg("x_train"), py::arg("y_train"),
           py::arg("s_train"), py::arg("x_val"), py::arg("y_val"), py::arg("s_val"))
      .def("predict_probs", &PyModel::predict_probs, py::arg("x"))
      .def("predict", &PyModel::predict, py::arg("x"))
      .def("adapt", &PyModel::adapt, py::arg("x"), py::arg("y"), py::arg("s"),
           py::arg("steps") = 50, py::arg("eta") = 1e-3,
           "Few-shot personalization; updates only the personal mask generator")
      .def("masks", &PyModel::masks, py::arg("x"), py::arg("y"), py::arg("s"))
      .def("accuracy", &PyModel::accuracy, py::arg("x"), py::arg("y"), py::arg("s"));
}
