#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/experiment.hpp"

namespace py = pybind11;
using mimic::num::Shape;
using mimic::num::Tensor;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  const auto* p = a.data();
  std::vector<double> data(p, p + a.size());
  if (a.ndim() == 1) return Tensor::vector(std::move(data));
  if (a.ndim() == 2)
    return Tensor::matrix(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                          std::move(data));
  throw std::invalid_argument("expected a 1-d or 2-d array, got " + std::to_string(a.ndim()) + "-d");
}

// Empty demonstration blocks arrive as (0, d_h) arrays.
Tensor to_keys(const Array& a, std::size_t d_head) {
  if (a.ndim() == 2 && a.shape(0) == 0) return Tensor::zeros(Shape{0, d_head});
  return to_tensor(a);
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const std::vector<double>& v) {
  py::array_t<double> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

mimic::experiment::ExperimentConfig config_from(const std::string& text) {
  return mimic::experiment::parse_config(nlohmann::json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  py::register_exception<mimic::experiment::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("version", &mimic::experiment::version_string);

  m.def("standard_attention", [](const Array& q, const Array& keys, const Array& values) {
    return to_array(mimic::attention::standard_sa(to_tensor(q), to_tensor(keys), to_tensor(values)));
  });
  m.def("mu", [](const Array& q, const Array& demo_keys, const Array& keys) {
    const auto tq = to_tensor(q);
    return mimic::attention::mu(tq, to_keys(demo_keys, tq.size()), to_tensor(keys));
  });
  m.def("decompose", [](const Array& q, const Array& demo_keys, const Array& demo_values, const Array& keys,
                        const Array& values) {
    const auto tq = to_tensor(q);
    const auto r = mimic::attention::decomposed_icl_sa(tq, to_keys(demo_keys, tq.size()),
                                                       to_keys(demo_values, tq.size()), to_tensor(keys),
                                                       to_tensor(values));
    py::dict d;
    d["mu"] = r.mu;
    d["sa_query"] = to_array(r.sa_query);
    d["sa_icd"] = to_array(r.sa_icd);
    d["combined"] = to_array(r.combined);
    d["full_reference"] = to_array(r.full_reference);
    d["max_abs_diff"] = r.max_abs_diff;
    return d;
  });

  m.def("desk_config_json", [] { return nlohmann::json(mimic::experiment::ExperimentConfig::desk()).dump(); });
  m.def("normalize_config_json", [](const std::string& text) { return nlohmann::json(config_from(text)).dump(); });
  m.def("config_hash", [](const std::string& text) { return mimic::experiment::config_hash(config_from(text)); });
  m.def("verify_json", [](std::uint64_t seed, std::optional<std::string> corrupt_op) {
    py::gil_scoped_release release;
    return mimic::experiment::run_verify(seed, corrupt_op).to_json().dump();
  }, py::arg("seed") = 0, py::arg("corrupt_op") = py::none());

  py::class_<mimic::model::Model>(m, "Model")
      .def(py::init([](const std::string& model_json) {
        return mimic::model::Model(nlohmann::json::parse(model_json).get<mimic::model::ModelConfig>());
      }))
      .def_static("load", [](const std::string& path) { return mimic::model::Model::load(path); })
      .def("save", [](const mimic::model::Model& self, const std::string& path) { self.save(path); })
      .def_property_readonly("checksum", &mimic::model::Model::checksum)
      .def_property_readonly("parameter_count", &mimic::model::Model::parameter_count)
      .def_property_readonly("config_json", [](const mimic::model::Model& self) {
        return nlohmann::json(self.config()).dump();
      })
      .def("logits", [](const mimic::model::Model& self, const std::vector<int>& tokens) {
        return to_array(self.forward_with_trace(tokens).logits);
      })
      .def("hidden_states", [](const mimic::model::Model& self, const std::vector<int>& tokens) {
        std::vector<py::array_t<double>> out;
        for (const auto& h : self.forward_with_trace(tokens).hidden) out.push_back(to_array(h));
        return out;
      });
}
