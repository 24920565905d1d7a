#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>
#include <variant>

#include "satlab/experiment.hpp"

namespace py = pybind11;
using namespace satlab;
using nlohmann::json;

namespace {

json to_cpp(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

ExperimentConfig experiment(const py::object& source) {
  if (py::isinstance<py::dict>(source)) return experiment_config_from_json(to_cpp(source));
  return load_experiment_config(source.cast<std::filesystem::path>());
}

TokenGrid grid(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& tokens) {
  if (tokens.ndim() != 2) throw std::invalid_argument("tokens must be a 2-D [batch, length] array");
  const auto* p = tokens.data();
  return TokenGrid(tokens.shape(0), tokens.shape(1), std::vector<std::int32_t>(p, p + tokens.size()));
}

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

class Model {
 public:
  using Weights = std::variant<ModelWeights<float>, ModelWeights<double>>;

  explicit Model(Weights w) : w_(std::move(w)) {}

  static Model create(const py::dict& config, const std::string& dtype) {
    const auto c = model_config_from_json(to_cpp(config));
    if (dtype == "float32") return Model(build_model<float>(c));
    if (dtype == "float64") return Model(build_model<double>(c));
    throw std::invalid_argument("dtype must be float32 or float64");
  }

  static Model load(const std::filesystem::path& path) {
    const auto header = read_checkpoint_header(path);
    if (header.at("dtype") == "float64") return Model(load_checkpoint<double>(path).weights);
    return Model(load_checkpoint<float>(path).weights);
  }

  std::string dtype() const { return w_.index() == 0 ? "float32" : "float64"; }

  py::object config() const {
    return std::visit([](const auto& w) { return to_py(to_json(w.config)); }, w_);
  }

  std::size_t parameter_count() const {
    return std::visit([](const auto& w) { return w.parameter_count(); }, w_);
  }

  std::vector<std::string> parameter_names() const {
    return std::visit(
        [](const auto& w) {
          std::vector<std::string> names;
          for (const auto* p : w.parameters()) names.push_back(p->name);
          return names;
        },
        w_);
  }

  py::array parameter(const std::string& name) {
    return std::visit(
        [&](auto& w) -> py::array {
          const auto* p = w.find(name);
          if (!p) throw py::key_error(name);
          return to_numpy(p->value);
        },
        w_);
  }

  py::array forward(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& tokens) const {
    const auto g = grid(tokens);
    return std::visit([&](const auto& w) -> py::array { return to_numpy(satlab::forward(w, g)); }, w_);
  }

  py::dict diagnostics(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& tokens) const {
    const auto g = grid(tokens);
    return std::visit(
        [&](const auto& w) {
          const auto out = forward_with_diagnostics(w, g);
          py::dict d;
          d["logits"] = to_numpy(out.logits);
          d["hidden"] = to_numpy(out.diagnostics.hidden);
          d["alpha"] = out.diagnostics.has_alpha() ? py::object(to_numpy(out.diagnostics.alpha)) : py::none();
          return d;
        },
        w_);
  }

  double loss(const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& tokens,
              const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& targets) const {
    const auto x = grid(tokens);
    const auto y = grid(targets);
    if (x.batch != y.batch || x.length != y.length) throw std::invalid_argument("tokens and targets differ in shape");
    return std::visit([&](const auto& w) { return token_nll_sum(satlab::forward(w, x), y) / double(y.size()); }, w_);
  }

 private:
  Weights w_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Byte-level decoder experiments: models, training, evaluation and gate analysis.";

  static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
  static py::exception<IntegrityError> integrity_error(m, "IntegrityError", PyExc_RuntimeError);
  static py::exception<DivergenceError> divergence_error(m, "DivergenceError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      config_error(e.what());
    } catch (const IntegrityError& e) {
      integrity_error(e.what());
    } catch (const DivergenceError& e) {
      divergence_error(e.what());
    }
  });

  py::class_<Model>(m, "Model")
      .def(py::init(&Model::create), py::arg("config"), py::arg("dtype") = "float32",
           "Fresh weights from a model config dict.")
      .def_static("load", &Model::load, py::arg("checkpoint"))
      .def_property_readonly("dtype", &Model::dtype)
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("parameter_names", &Model::parameter_names)
      .def("parameter", &Model::parameter, py::arg("name"), "Copy of one parameter tensor.")
      .def("forward", &Model::forward, py::arg("tokens"), "Logits [B, T, vocab] for int tokens [B, T].")
      .def("diagnostics", &Model::diagnostics, py::arg("tokens"),
           "Dict with logits, hidden [L+1, B, T, d] and alpha [L-1, B, T, N_kv] (None without gates).")
      .def("loss", &Model::loss, py::arg("tokens"), py::arg("targets"), "Mean next-byte cross-entropy.");

  m.def("count_params", [](const py::dict& c) { return count_params(model_config_from_json(to_cpp(c))); },
        py::arg("config"));
  m.def("load_config", [](const std::filesystem::path& p) { return to_py(to_json(load_experiment_config(p))); },
        py::arg("path"), "Validated experiment config with every default filled in.");
  m.def("run_dir", [](const py::object& c) { return experiment(c).run_dir(); }, py::arg("config"));

  m.def(
      "train",
      [](const py::object& c) {
        const auto cfg = experiment(c);
        py::gil_scoped_release release;
        return cmd_train(cfg, std::cout);
      },
      py::arg("config"), "Train from a config dict or path; returns the exit status.");
  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data,
         std::optional<std::filesystem::path> out) { return to_py(run_eval({checkpoint, data, out})); },
      py::arg("checkpoint"), py::arg("data"), py::arg("out") = py::none());
  m.def(
      "analyze",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, const std::string& which,
         std::optional<std::filesystem::path> out_dir, std::optional<std::filesystem::path> compare,
         bool per_head_mean) {
        AnalyzeRequest req{checkpoint, data, parse_analysis(which), out_dir.value_or(checkpoint.parent_path()),
                           compare, per_head_mean};
        return run_analyze(req);
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("which"), py::arg("out_dir") = py::none(),
      py::arg("compare") = py::none(), py::arg("per_head_mean") = false, "Returns the files written.");
  m.def(
      "gradcheck",
      [](const py::object& c) {
        const auto cfg = experiment(c);
        const auto tol = cfg.gradcheck ? cfg.gradcheck->tolerance : GradCheckSpec{}.tolerance;
        const auto r = run_gradcheck(cfg);
        py::dict d;
        d["passed"] = r.passed(tol);
        d["max_rel_err"] = r.max_rel_err;
        d["worst_param"] = r.worst_param;
        d["coordinates"] = r.coordinates;
        d["covered"] = r.covered;
        return d;
      },
      py::arg("config"));
  m.def(
      "sweep",
      [](const py::object& c) {
        const auto cfg = experiment(c);
        py::gil_scoped_release release;
        return cmd_sweep(cfg, std::cout);
      },
      py::arg("config"));
}
