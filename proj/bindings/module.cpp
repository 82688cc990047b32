#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sagekeep/pipeline.hpp"
#include "sagekeep/rng.hpp"

namespace py = pybind11;
using namespace sagekeep;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() < 1 || a.ndim() > 4)
        throw DataError("array rank must be 1..4, got " + std::to_string(a.ndim()));
    std::vector<std::size_t> shape(static_cast<std::size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i)
        shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i)
        shape[i] = static_cast<py::ssize_t>(t.shape()[i]);
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Adversarial token-importance maps (offline) and significance-preserving "
              "augmentation (online) over a small frozen segmentation oracle";

    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    // ---- tensor io ----
    m.def("write_kct1",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
             const std::string& path) { write_kct1(tensor_from_array(a), path); },
          py::arg("array"), py::arg("path"));
    m.def("read_kct1",
          [](const std::string& path) { return array_from_tensor(read_kct1(path)); },
          py::arg("path"));

    // ---- importance maps ----
    py::class_<ImportanceMap>(m, "ImportanceMap")
        .def_property_readonly("grid",
                               [](const ImportanceMap& w) { return array_from_tensor(w.grid); })
        .def_readonly("token_size", &ImportanceMap::token_size)
        .def_readonly("source_image_id", &ImportanceMap::source_image_id)
        .def_readonly("oracle_id", &ImportanceMap::oracle_id);
    m.def("read_kcw1", &read_kcw1, py::arg("path"));
    m.def("write_kcw1", &write_kcw1, py::arg("map"), py::arg("path"));

    // ---- oracle ----
    py::class_<OracleNet>(m, "OracleNet")
        .def_readonly("id", &OracleNet::id)
        .def_readonly("num_classes", &OracleNet::num_classes)
        .def_readonly("frozen", &OracleNet::frozen)
        .def("forward",
             [](const OracleNet& net,
                const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
                 return array_from_tensor(forward(net, tensor_from_array(x)));
             },
             py::arg("x"))
        .def("input_gradient",
             [](const OracleNet& net,
                const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
                const py::array_t<double, py::array::c_style | py::array::forcecast>& y,
                double lambda_ce, double lambda_dice) {
                 InputGradient g = input_gradient(net, tensor_from_array(x),
                                                  tensor_from_array(y), lambda_ce, lambda_dice);
                 return py::make_tuple(g.loss, array_from_tensor(g.grad_x));
             },
             py::arg("x"), py::arg("y"), py::arg("lambda_ce") = 1.0,
             py::arg("lambda_dice") = 1.0);
    m.def("make_default_oracle", &make_default_oracle, py::arg("variant"),
          py::arg("in_channels") = 1, py::arg("num_classes") = 2);
    m.def("save_weights", &save_weights, py::arg("net"), py::arg("path"));
    m.def("load_weights", &load_weights, py::arg("path"));

    // ---- sage ----
    py::class_<SageConfig>(m, "SageConfig")
        .def(py::init<>())
        .def_readwrite("epsilon", &SageConfig::epsilon)
        .def_readwrite("steps", &SageConfig::steps)
        .def_readwrite("alpha_init", &SageConfig::alpha_init)
        .def_readwrite("alpha_end", &SageConfig::alpha_end)
        .def_readwrite("mu_sparse", &SageConfig::mu_sparse)
        .def_readwrite("beta_delta", &SageConfig::beta_delta)
        .def_readwrite("lambda_ce", &SageConfig::lambda_ce)
        .def_readwrite("lambda_dice", &SageConfig::lambda_dice)
        .def_readwrite("lr", &SageConfig::lr)
        .def_readwrite("token_size", &SageConfig::token_size)
        .def_readwrite("seed", &SageConfig::seed);
    m.def("anneal", &anneal, py::arg("step"), py::arg("config"));
    m.def("run_sage",
          [](const OracleNet& oracle,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& y,
             const SageConfig& cfg, const std::string& image_id) {
              return run_sage(oracle, tensor_from_array(x), tensor_from_array(y), cfg, image_id);
          },
          py::arg("oracle"), py::arg("x"), py::arg("y"), py::arg("config"),
          py::arg("image_id") = "");
    m.def("brute_force_importance",
          [](const OracleNet& oracle,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& y,
             double epsilon, std::size_t token_size) {
              return brute_force_importance(oracle, tensor_from_array(x), tensor_from_array(y),
                                            epsilon, token_size);
          },
          py::arg("oracle"), py::arg("x"), py::arg("y"), py::arg("epsilon"),
          py::arg("token_size"));

    // ---- keep + augment ----
    py::class_<KeepConfig>(m, "KeepConfig")
        .def(py::init<>())
        .def_readwrite("tau_core", &KeepConfig::tau_core)
        .def_readwrite("tau_low", &KeepConfig::tau_low)
        .def_readwrite("rho_mask", &KeepConfig::rho_mask)
        .def_readwrite("fill", &KeepConfig::fill)
        .def_readwrite("seed", &KeepConfig::seed);
    m.def("augment_spec_from_json", &augment_spec_from_json, py::arg("json_text"));
    m.def("keep_augment",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& y,
             const ImportanceMap& map, const std::string& augment_json, const KeepConfig& cfg,
             std::uint64_t seed) {
              Rng rng(seed);
              KeepResult r = keep_augment(tensor_from_array(x), tensor_from_array(y), map,
                                          augment_spec_from_json(augment_json), cfg, rng);
              py::dict out;
              out["image"] = array_from_tensor(r.image);
              out["labels"] = array_from_tensor(r.labels);
              out["core_mask"] = array_from_tensor(r.core_mask);
              out["context_mask"] = array_from_tensor(r.context_mask);
              if (r.mix_weight) out["mix_weight"] = *r.mix_weight;
              return out;
          },
          py::arg("x"), py::arg("y"), py::arg("map"), py::arg("augment_json"), py::arg("config"),
          py::arg("seed") = 0);

    // ---- metrics ----
    m.def("overlap_metrics",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
             std::size_t cls) {
              const OverlapMetrics v =
                  overlap_metrics(tensor_from_array(pred), tensor_from_array(gt), cls);
              py::dict out;
              out["dice"] = v.dice;
              out["iou"] = v.iou;
              out["acc"] = v.acc;
              out["pre"] = v.pre;
              out["sen"] = v.sen;
              out["spe"] = v.spe;
              return out;
          },
          py::arg("pred"), py::arg("gt"), py::arg("cls"));
    m.def("surface_distances",
          [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
             double spacing_y, double spacing_x) -> py::object {
              const auto sd = surface_distances(tensor_from_array(pred), tensor_from_array(gt),
                                                spacing_y, spacing_x);
              if (!sd) return py::none();
              return py::make_tuple(sd->hd95, sd->asd);
          },
          py::arg("pred_mask"), py::arg("gt_mask"), py::arg("spacing_y") = 1.0,
          py::arg("spacing_x") = 1.0);

    // ---- pipeline entry points ----
    py::class_<SyntheticTask>(m, "SyntheticTask")
        .def(py::init<>())
        .def_readwrite("seed", &SyntheticTask::seed)
        .def_readwrite("core_row", &SyntheticTask::core_row)
        .def_readwrite("core_col", &SyntheticTask::core_col)
        .def_readwrite("contrast", &SyntheticTask::contrast)
        .def_readwrite("image_size", &SyntheticTask::image_size)
        .def_readwrite("token_size", &SyntheticTask::token_size);
    m.def("synth_dataset",
          [](const SyntheticTask& task, std::size_t n, const std::string& out_dir) {
              synth_dataset(task, n, out_dir);
          },
          py::arg("task"), py::arg("n"), py::arg("out_dir"));
}
