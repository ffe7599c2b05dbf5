#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "json.hpp"
#include "xane3/cli/cli.hpp"
#include "xane3/data/synth.hpp"
#include "xane3/errors.hpp"
#include "xane3/graph/dataset.hpp"
#include "xane3/model/checkpoint.hpp"
#include "xane3/spectra/spectra.hpp"
#include "xane3/train/trainer.hpp"
#include "xane3/verify/verify.hpp"

namespace py = pybind11;
using namespace xane3;
using nlohmann::json;

namespace {

// Arrays built from a pointer own a C-ordered copy of the values.
py::array_t<double> to_array(std::span<const double> v) {
  return py::array_t<double>(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())}, v.data());
}

py::array_t<double> to_array(std::span<const double> v, std::size_t rows, std::size_t cols) {
  if (v.size() != rows * cols) throw ShapeError("array size does not match its shape");
  return py::array_t<double>(std::vector<py::ssize_t>{static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)},
                             v.data());
}

std::vector<double> to_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1) throw ShapeError("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

// Dataset records cross the boundary in their JSON Lines text form.
std::vector<graph::Record> parse_records(const std::vector<std::string>& lines) {
  std::vector<graph::Record> out;
  for (const auto& l : lines) out.push_back(graph::parse_record(l));
  return out;
}

py::dict terms_dict(const objective::LossTerms& t) {
  py::dict d;
  d["loss_spec"] = t.spec;
  d["loss_grad"] = t.grad;
  d["loss_curv"] = t.curv;
  d["loss_e0"] = t.e0;
  return d;
}

class PyModel {
 public:
  PyModel(const std::string& config_json, std::uint64_t seed)
      : model_(std::make_unique<model::Model>(model::model_config_from_json(json::parse(config_json)), seed)) {}
  explicit PyModel(model::LoadedCheckpoint ck) : model_(std::move(ck.model)), e0_(ck.e0) {}

  static PyModel load(const std::string& dir) { return PyModel(model::load_checkpoint(dir)); }

  std::string config() const { return model::to_json(model_->config()).dump(); }
  std::size_t parameter_count() const { return model_->params().count(); }
  std::vector<std::pair<std::string, std::size_t>> parameter_report() const { return model_->parameter_report(); }

  py::tuple predict(const std::vector<std::string>& lines) const {
    const auto records = parse_records(lines);
    if (records.empty()) throw ValueError("predict needs at least one record");
    std::vector<graph::AtomicGraph> graphs;
    for (const auto& r : records) graphs.push_back(model_->prepare(r.structure, r.absorber()));
    ad::NoGradGuard guard;
    const auto out = model_->forward(graph::make_batch(graphs));
    std::vector<double> e0(records.size());
    for (std::size_t g = 0; g < records.size(); ++g) e0[g] = e0_.inverse(out.e0[g]);
    return py::make_tuple(to_array(out.spectrum.data(), records.size(), model_->config().grid.n), to_array(e0));
  }

  void perturb(double scale, std::uint64_t seed) { verify::perturb_parameters(*model_, scale, seed); }

  double invariance(std::size_t structures, std::size_t motions, std::uint64_t seed) const {
    return verify::spectrum_invariance(*model_, verify::sample_structures(structures, seed), motions, seed + 1)
        .max_deviation;
  }

 private:
  std::unique_ptr<model::Model> model_;
  model::ZScore e0_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "XANES spectrum prediction with an E(3)-equivariant graph network";

  static py::exception<Error> base_error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      base_error((e.kind() + ": " + e.what()).c_str());
    }
  });

  m.def(
      "energy_grid",
      [] { return to_array(spectra::SpectrumGrid{}.energies()); },
        "Canonical grid energies relative to the edge, in eV.");
  m.def(
      "normalize_edge_step",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& energies,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& mu, double e0) {
        spectra::RawSpectrum raw{to_vector(energies), to_vector(mu), e0};
        return to_array(spectra::normalize_edge_step(raw));
      },
      py::arg("energies"), py::arg("mu"), py::arg("e0"), "Resample onto the canonical grid and normalize the edge step.");
  m.def(
      "finite_derivatives",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& y) {
        const auto d = spectra::finite_derivatives(to_vector(y));
        return py::make_tuple(to_array(d.first), to_array(d.second));
      },
      py::arg("spectrum"), "Forward first and second differences on the canonical grid.");

  m.def(
      "synth_records",
      [](std::size_t n, std::uint64_t seed) {
        synth::DatasetOptions o;
        o.n = n;
        o.seed = seed;
        std::vector<std::string> out;
        for (const auto& r : synth::generate_dataset(o)) out.push_back(graph::format_record(r));
        return out;
      },
      py::arg("n"), py::arg("seed"), "Synthetic records as JSON Lines strings.");
  m.def(
      "variance_baseline",
      [](const std::vector<std::string>& lines) { return synth::variance_baseline(parse_records(lines)).variance; },
      py::arg("records"), "MSE of predicting the mean spectrum.");

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_json") = "{}", py::arg("seed") = 0)
      .def_static("load", &PyModel::load, py::arg("checkpoint_dir"))
      .def_property_readonly("config_json", &PyModel::config)
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def("parameter_report", &PyModel::parameter_report)
      .def("predict", &PyModel::predict, py::arg("records"),
           "Spectra (records, grid) and edge energies in eV for JSON Lines records.")
      .def("perturb", &PyModel::perturb, py::arg("scale"), py::arg("seed"))
      .def("invariance", &PyModel::invariance, py::arg("structures") = 5, py::arg("motions") = 20, py::arg("seed") = 0,
           "Largest spectrum change under random rigid motions of synthetic structures.");

  m.def(
      "train",
      [](const std::string& config_json, const std::vector<std::string>& lines, const std::string& out) {
        const auto config = train::run_config_from_json(json::parse(config_json));
        train::TrainOptions opts;
        opts.out = out;
        const auto r = train::train_run(config, parse_records(lines), opts);
        py::dict d;
        d["epochs_run"] = r.epochs_run;
        d["best_epoch"] = r.best_epoch;
        d["best_val"] = r.best_val;
        d["val"] = terms_dict(r.val);
        d["test"] = terms_dict(r.test);
        return d;
      },
      py::arg("config_json"), py::arg("records"), py::arg("out") = "",
      "Train on JSON Lines records; writes the best checkpoint and metrics under `out` when given.");

  m.def("cg_residual", &verify::cg_residual, py::arg("l_max") = 2, py::arg("rotations") = 10, py::arg("seed") = 0);
  m.def(
      "tiny_gradcheck",
      [](std::uint64_t seed) {
        const auto r = verify::tiny_gradcheck(seed);
        py::dict d;
        d["max_rel_error"] = r.max_rel_error;
        d["worst_param"] = r.worst_param;
        d["checked"] = r.checked;
        return d;
      },
      py::arg("seed") = 0);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a command line; returns (exit code, stdout, stderr).");
}
