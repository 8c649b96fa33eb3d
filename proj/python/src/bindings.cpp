#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "tg/cli.hpp"
#include "tg/gradcheck_suite.hpp"
#include "tg/logits.hpp"
#include "tg/models.hpp"
#include "tg/ops.hpp"
#include "tg/run_config.hpp"
#include "tg/video_ops.hpp"

namespace py = pybind11;
using namespace tg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a, bool requires_grad = false) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()), requires_grad);
}

Array to_array(std::span<const double> data, const Shape& shape) {
  Array out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

Array to_array(const Tensor& t) { return to_array(t.data(), t.shape()); }

RunConfig parse_config(const std::string& text) { return RunConfig::parse(text, "<python>"); }

// A model plus the config it was built from.
class PyModel {
 public:
  PyModel(const std::string& config_text, std::uint64_t seed) {
    RunConfig cfg = parse_config(config_text);
    cfg.model.validate();
    model_ = build_model(cfg.model, seed);
  }
  Array forward(const Array& batch) {
    NoGradGuard guard;
    return to_array(model_->forward(to_tensor(batch)));
  }
  void set_training(bool on) { model_->set_training(on); }
  void set_stage(Index clip_len, bool shift) { model_->set_stage(clip_len, shift); }
  Index num_parameters() const { return count_parameters(*model_); }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const Parameter& p : model_->parameters()) out.push_back(p.name);
    return out;
  }
  std::string config_text() const { return model_->config().to_text(); }

 private:
  std::unique_ptr<Model> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Video action recognition core: autograd ops, temporal shift, SlowFast and TSM models";
  tune_allocator();

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def(
      "conv3d",
      [](const Array& x, const Array& w, std::optional<Array> b, Triple stride, Triple padding) {
        return to_array(conv3d(to_tensor(x), to_tensor(w), b ? to_tensor(*b) : Tensor(), stride, padding));
      },
      py::arg("x"), py::arg("w"), py::arg("b") = py::none(), py::arg("stride") = Triple{1, 1, 1},
      py::arg("padding") = Triple{0, 0, 0});

  m.def(
      "conv3d_backward",
      [](const Array& x, const Array& w, const Array& dy, Triple stride, Triple padding) {
        Tensor tx = to_tensor(x, true), tw = to_tensor(w, true);
        const Tensor y = conv3d(tx, tw, {}, stride, padding);
        const Tensor g = to_tensor(dy);
        if (g.shape() != y.shape()) throw ShapeError("conv3d_backward: dy has shape " + shape_str(g.shape()) +
                                                     ", output is " + shape_str(y.shape()));
        y.backward(g.data());
        return py::make_tuple(to_array(tx.grad(), tx.shape()), to_array(tw.grad(), tw.shape()));
      },
      py::arg("x"), py::arg("w"), py::arg("dy"), py::arg("stride") = Triple{1, 1, 1},
      py::arg("padding") = Triple{0, 0, 0}, "Gradients (dx, dw) of <dy, conv3d(x, w)>.");

  m.def(
      "maxpool3d", [](const Array& x, Triple k, Triple s) { return to_array(maxpool3d(to_tensor(x), k, s)); },
      py::arg("x"), py::arg("kernel"), py::arg("stride"));

  m.def(
      "temporal_shift",
      [](const Array& x, const std::string& forward, const std::string& backward) {
        ShiftSpec spec{Rational::parse(forward), Rational::parse(backward), true};
        return to_array(tsm_shift(to_tensor(x), spec));
      },
      py::arg("x"), py::arg("forward") = "1/8", py::arg("backward") = "1/8",
      "Shift over [N, C, T, H, W]; fractions are written 'p/q'.");

  m.def(
      "residual_frames", [](const Array& x) { return to_array(residual_frames(to_tensor(x))); }, py::arg("x"));

  m.def("matched_mid_channels", &matched_mid_channels, py::arg("in_channels"), py::arg("out_channels"),
        py::arg("k"));
  m.def(
      "conv2plus1d_weight_counts",
      [](Index cin, Index cout, Index k) {
        const Conv2Plus1DSpec s{cin, cout, k, std::nullopt};
        s.validate();
        return py::make_tuple(s.factored_weight_count(), s.full3d_weight_count());
      },
      py::arg("in_channels"), py::arg("out_channels"), py::arg("k"), "(factored, full 3D) weight counts.");

  m.def(
      "gradcheck",
      [](const std::string& filter, std::uint64_t seed) {
        py::list out;
        for (const auto& r : run_gradcheck_suite(filter, seed)) {
          py::dict d;
          d["name"] = r.name;
          d["max_error"] = r.max_error;
          d["passed"] = r.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("filter") = "*", py::arg("seed") = 42);

  m.def(
      "softmax", [](const std::vector<double>& v) { return softmax(v); }, py::arg("logits"));
  m.def(
      "argmax", [](const std::vector<double>& v) { return argmax(v); }, py::arg("logits"));
  m.def(
      "ensemble",
      [](const std::string& spec, const std::vector<py::dict>& records,
         const std::vector<std::pair<std::string, int>>& labels) {
        std::vector<LogitRecord> rs;
        for (const py::dict& d : records) {
          LogitRecord r;
          r.video_id = d["video_id"].cast<std::string>();
          r.model_id = d["model_id"].cast<std::string>();
          r.variant = d["variant"].cast<std::string>();
          r.stride = d.contains("stride") ? d["stride"].cast<int>() : 1;
          r.logits = d["logits"].cast<std::vector<double>>();
          rs.push_back(std::move(r));
        }
        const EnsembleResult e = ensemble(EnsembleSpec::parse(spec), rs, labels);
        py::dict fused;
        for (const LogitRecord& r : e.fused) fused[py::str(r.video_id)] = r.logits;
        return py::make_tuple(fused, e.accuracy);
      },
      py::arg("spec"), py::arg("records"), py::arg("labels"),
      "Pre-softmax fusion. Records are dicts with video_id, model_id, variant, [stride], logits.");

  m.def(
      "count_parameters",
      [](const std::string& config_text) {
        RunConfig cfg = parse_config(config_text);
        return count_parameters(*build_model(cfg.model, 0));
      },
      py::arg("config_text"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"tempograd"};
        for (const std::string& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a tempograd subcommand; returns (exit code, stdout, stderr).");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_text"), py::arg("seed") = 0)
      .def("forward", &PyModel::forward, py::arg("batch"))
      .def("set_training", &PyModel::set_training, py::arg("on"))
      .def("set_stage", &PyModel::set_stage, py::arg("clip_len"), py::arg("shift"))
      .def_property_readonly("num_parameters", &PyModel::num_parameters)
      .def_property_readonly("parameter_names", &PyModel::parameter_names)
      .def_property_readonly("config_text", &PyModel::config_text);
}
