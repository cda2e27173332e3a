#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "schanger/analysis.hpp"
#include "schanger/data_io.hpp"
#include "schanger/errors.hpp"
#include "schanger/evaluation.hpp"
#include "schanger/networks.hpp"
#include "schanger/ops.hpp"
#include "schanger/scn.hpp"
#include "schanger/training.hpp"

namespace py = pybind11;
using namespace schanger;

namespace {

using FloatArray =
    py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_numpy(const FloatArray& arr) {
  if (arr.ndim() != 4) {
    throw ShapeError("expected an array of shape (n, c, h, w)");
  }
  Shape s{static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)),
          static_cast<int>(arr.shape(2)), static_cast<int>(arr.shape(3))};
  std::vector<float> data(arr.data(), arr.data() + s.numel());
  return Tensor::from_data(s, std::move(data));
}

py::array_t<float> numpy_from_tensor(const Tensor& t) {
  const Shape& s = t.shape();
  py::array_t<float> out({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

struct PyModel {
  std::shared_ptr<BuiltModel> model;

  std::string arch() const { return model->graph.arch; }
  std::string variant() const { return model->graph.variant.name; }
  int64_t param_count() const { return count_params(model->graph); }
  int64_t macs(int input_size) const {
    return count_macs(model->graph, input_size, input_size);
  }

  py::array_t<float> logits(const FloatArray& a,
                            const py::object& b) const {
    NoGradGuard ng;
    Tensor ta = normalize_input(tensor_from_numpy(a));
    ParamStore& store = const_cast<ParamStore&>(model->store);
    if (model->graph.arch == "schanger") {
      if (b.is_none()) {
        throw ConfigError("a Siamese model needs both temporal inputs");
      }
      Tensor tb = normalize_input(tensor_from_numpy(b.cast<FloatArray>()));
      return numpy_from_tensor(
          schanger_forward(model->graph, store, ta, tb, false, nullptr)
              .front());
    }
    if (!b.is_none()) {
      throw ConfigError("a single-temporal model takes one input");
    }
    return numpy_from_tensor(
        spnet_forward(model->graph, store, ta, false, nullptr).front());
  }
};

PyModel build(const std::string& arch, const std::string& variant,
              uint64_t seed) {
  VariantConfig cfg = variant_by_name(variant);
  BuiltModel m;
  if (arch == "spnet") {
    m = build_spnet(cfg, seed);
  } else if (arch == "schanger") {
    m = build_schanger(cfg, seed);
  } else {
    throw ConfigError("unknown architecture " + arch);
  }
  return PyModel{std::make_shared<BuiltModel>(std::move(m))};
}

py::dict analysis_dict(const ModelGraph& graph, int input_size) {
  AnalysisReport rep = analyze_graph(graph, input_size, input_size);
  py::dict d;
  d["params"] = rep.params;
  d["macs"] = rep.macs;
  d["flops_2x"] = rep.flops_primary;
  d["flops_1x"] = rep.flops_alternate;
  d["has_reference"] = rep.has_reference;
  if (rep.has_reference) {
    d["params_err"] = rep.params_err;
    d["flops_err_2x"] = rep.flops_err_primary;
    d["flops_err_1x"] = rep.flops_err_alternate;
    d["params_ok"] = rep.params_ok;
    d["flops_ok"] = rep.flops_ok;
  }
  return d;
}

py::dict metrics_dict(const EvalResult& r) {
  py::dict d;
  d["samples"] = r.samples;
  d["tp"] = r.confusion.tp;
  d["fp"] = r.confusion.fp;
  d["fn"] = r.confusion.fn;
  d["tn"] = r.confusion.tn;
  d["precision"] = r.metrics.precision;
  d["recall"] = r.metrics.recall;
  d["f1"] = r.metrics.f1;
  d["iou"] = r.metrics.iou;
  d["accuracy"] = r.metrics.accuracy;
  return d;
}

}  // namespace

PYBIND11_MODULE(_schanger, m) {
  m.doc() = "Change-detection model toolkit core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError",
                                       PyExc_ArithmeticError);
  py::register_exception<ReconcileError>(m, "ReconcileError",
                                         PyExc_RuntimeError);

  py::class_<PyModel>(m, "Model")
      .def_property_readonly("arch", &PyModel::arch)
      .def_property_readonly("variant", &PyModel::variant)
      .def("param_count", &PyModel::param_count)
      .def("macs", &PyModel::macs, py::arg("input_size") = 256)
      .def("logits", &PyModel::logits, py::arg("a"),
           py::arg("b") = py::none(),
           "Fused-head logits for [0, 1] image arrays of shape (n, c, h, w)");

  m.def("build", &build, py::arg("arch"), py::arg("variant"),
        py::arg("seed") = 0, "Construct a freshly initialized model");

  m.def(
      "load",
      [](const std::string& path) {
        StoreMeta meta = peek_checkpoint_meta(path);
        PyModel pm = build(meta.arch, meta.variant, meta.seed);
        load_checkpoint(pm.model->store, path);
        return pm;
      },
      py::arg("path"), "Load a checkpoint file");

  m.def(
      "save",
      [](const PyModel& pm, const std::string& path) {
        save_checkpoint(pm.model->store, path);
      },
      py::arg("model"), py::arg("path"));

  m.def(
      "inflate",
      [](const PyModel& pm, uint64_t seed) {
        InflationResult r = inflate(*pm.model, seed);
        py::dict report;
        report["copied"] = r.report.copied_param_count;
        report["new"] = r.report.new_param_count;
        report["new_fraction"] = r.report.new_fraction();
        PyModel out{std::make_shared<BuiltModel>(std::move(r.model))};
        return py::make_tuple(out, report);
      },
      py::arg("model"), py::arg("seed") = 0,
      "Inflate a single-temporal model into the Siamese change model");

  m.def(
      "analyze",
      [](const std::string& arch, const std::string& variant,
         int input_size) {
        PyModel pm = build(arch, variant, 0);
        return analysis_dict(pm.model->graph, input_size);
      },
      py::arg("arch") = "schanger", py::arg("variant") = "small",
      py::arg("input_size") = 256);

  m.def(
      "synth",
      [](const std::string& root, const std::string& split, int count,
         int size, double density, uint64_t seed) {
        SynthConfig cfg;
        cfg.count = count;
        cfg.size = size;
        cfg.change_density = density;
        cfg.seed = seed;
        synth_generate(root, split, cfg);
      },
      py::arg("root"), py::arg("split") = "train", py::arg("count") = 20,
      py::arg("size") = 64, py::arg("density") = 0.10, py::arg("seed") = 0);

  m.def(
      "train",
      [](PyModel& pm, const std::string& root, const std::string& split,
         int epochs, int batch, double lr, uint64_t seed) {
        Dataset ds = load_dataset(root, split);
        std::vector<TrainSample> samples = pm.model->graph.arch == "spnet"
                                               ? load_single_temporal(ds)
                                               : load_pairs(ds);
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        cfg.seed = seed;
        TrainResult r = train_model(*pm.model, samples, cfg);
        py::list history;
        for (const auto& e : r.history) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["mean_loss"] = e.mean_loss;
          d["lr"] = e.last_lr;
          history.append(d);
        }
        return history;
      },
      py::arg("model"), py::arg("root"), py::arg("split") = "train",
      py::arg("epochs") = 1, py::arg("batch") = 8, py::arg("lr") = 5e-4,
      py::arg("seed") = 0);

  m.def(
      "evaluate",
      [](const PyModel& pm, const std::string& root, const std::string& split,
         int tile) {
        Dataset ds = load_dataset(root, split);
        std::vector<TrainSample> samples = pm.model->graph.arch == "spnet"
                                               ? load_single_temporal(ds)
                                               : load_pairs(ds);
        EvalConfig cfg;
        cfg.tile = tile;
        return metrics_dict(evaluate(*pm.model, samples, cfg));
      },
      py::arg("model"), py::arg("root"), py::arg("split") = "val",
      py::arg("tile") = 0);

  m.def(
      "conv2d",
      [](const FloatArray& x, const FloatArray& w, int stride, int pad,
         int dilation, int groups) {
        NoGradGuard ng;
        ConvSpec spec;
        spec.stride = stride;
        spec.pad = pad;
        spec.dilation = dilation;
        spec.groups = groups;
        return numpy_from_tensor(conv2d(tensor_from_numpy(x),
                                        tensor_from_numpy(w), nullptr, spec));
      },
      py::arg("x"), py::arg("w"), py::arg("stride") = 1, py::arg("pad") = 0,
      py::arg("dilation") = 1, py::arg("groups") = 1,
      "Reference convolution on raw arrays");

  m.def(
      "grad_check_probe",
      [](uint64_t seed) {
        Rng rng(seed);
        Shape sx{1, 2, 5, 5};
        Shape sw{3, 2, 3, 3};
        std::vector<float> xs, ws;
        for (int i = 0; i < sx.numel(); ++i) {
          xs.push_back(static_cast<float>(rng.normal()));
        }
        for (int i = 0; i < sw.numel(); ++i) {
          ws.push_back(static_cast<float>(rng.normal() * 0.5));
        }
        std::vector<Tensor> inputs = {Tensor::from_data(sx, xs),
                                      Tensor::from_data(sw, ws)};
        return grad_check(
            [](std::vector<Tensor>& in) {
              ConvSpec spec;
              spec.pad = 1;
              return mean_all(gelu(conv2d(in[0], in[1], nullptr, spec)));
            },
            inputs, 1e-3f);
      },
      py::arg("seed") = 0,
      "Max relative error between analytic and numeric gradients for a "
      "small convolution graph");
}
