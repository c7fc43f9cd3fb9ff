#include "mammovl/birads.hpp"
#include "mammovl/checkpoint.hpp"
#include "mammovl/cli.hpp"
#include "mammovl/data/extract.hpp"
#include "mammovl/data/image.hpp"
#include "mammovl/data/manifest.hpp"
#include "mammovl/errors.hpp"
#include "mammovl/evaluation.hpp"
#include "mammovl/objectives.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace mammovl;

namespace {

py::dict sample_dict(const data::LabeledSample& s) {
  py::dict d;
  d["image_path"] = s.image_path;
  d["patient_id"] = s.patient_id;
  d["view"] = s.view;
  d["birads"] = s.birads.value();
  d["density"] = s.density ? py::object(py::int_(*s.density)) : py::object(py::none());
  d["dataset"] = s.dataset;
  return d;
}

data::LabeledSample sample_from(const py::handle& h) {
  const auto d = h.cast<py::dict>();
  data::LabeledSample s;
  s.image_path = d.contains("image_path") ? d["image_path"].cast<std::string>() : "";
  s.patient_id = d["patient_id"].cast<std::string>();
  s.view = d.contains("view") ? d["view"].cast<std::string>() : "LCC";
  s.birads = BiradsLabel::from_int(d["birads"].cast<int>());
  if (d.contains("density") && !d["density"].is_none()) s.density = d["density"].cast<int>();
  s.dataset = d.contains("dataset") ? d["dataset"].cast<std::string>() : "";
  return s;
}

std::vector<data::LabeledSample> samples_from(const py::iterable& rows) {
  std::vector<data::LabeledSample> out;
  for (const auto& r : rows) out.push_back(sample_from(r));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Vision-language pretraining and BI-RADS fine-tuning for mammography";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataValidationError>(m, "DataValidationError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<ExtractionError>(m, "ExtractionError", PyExc_RuntimeError);
  py::register_exception<NumericalAbort>(m, "NumericalAbort", PyExc_ArithmeticError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool; returns (exit_code, stdout, stderr).");

  m.def(
      "contrastive_loss",
      [](const MatrixD& s, double temperature) { return contrastive_loss(SimilarityMatrix{s}, temperature); },
      py::arg("similarity"), py::arg("temperature") = 1.0);
  m.def(
      "contrastive_loss_grad",
      [](const MatrixD& s, double temperature) {
        const auto r = contrastive_loss_with_grad(SimilarityMatrix{s}, temperature);
        return py::make_tuple(r.loss, r.grad_s);
      },
      py::arg("similarity"), py::arg("temperature") = 1.0);
  m.def(
      "similarity_matrix",
      [](const MatrixD& v, const MatrixD& t) { return similarity_matrix(v, t).s; }, py::arg("image_embeddings"),
      py::arg("text_embeddings"));

  m.def(
      "f1_scores",
      [](const std::vector<int>& predictions, const std::vector<int>& truths, int k) {
        return f1_scores(predictions, truths, k).f1;
      },
      py::arg("predictions"), py::arg("truths"), py::arg("k"));
  m.def(
      "macro_f1", [](const std::vector<double>& per_class) { return macro_f1(per_class); }, py::arg("per_class"));
  m.def(
      "map_label",
      [](int birads, const std::string& scheme) -> std::optional<int> {
        return map_label(BiradsLabel::from_int(birads), ClassScheme::parse(scheme));
      },
      py::arg("birads"), py::arg("scheme"), "Class index under FIVE or THREE; None when excluded.");
  m.def(
      "kfold_split",
      [](const py::iterable& samples, int k, std::uint64_t seed, const std::string& granularity) {
        const auto s = samples_from(samples);
        SplitGranularity g = granularity == "image" ? SplitGranularity::image : SplitGranularity::patient;
        if (granularity != "image" && granularity != "patient")
          throw ConfigError("granularity must be patient or image");
        return kfold_split(s, k, seed, g).sample_fold;
      },
      py::arg("samples"), py::arg("k") = 4, py::arg("seed") = 0, py::arg("granularity") = "patient",
      "Fold of each sample dict (needs patient_id and birads).");

  m.def(
      "load_manifest",
      [](const std::filesystem::path& path) {
        py::list rows;
        for (const auto& s : data::load_manifest(path).samples) rows.append(sample_dict(s));
        return rows;
      },
      py::arg("path"));
  m.def(
      "filter_views",
      [](const py::iterable& samples) {
        data::Manifest mf;
        mf.samples = samples_from(samples);
        py::list rows;
        for (const auto& s : data::filter_views(mf).manifest.samples) rows.append(sample_dict(s));
        return rows;
      },
      py::arg("samples"));
  m.def(
      "cap_class_counts",
      [](const py::iterable& samples, std::size_t cap, const std::vector<int>& labels, std::uint64_t seed) {
        data::Manifest mf;
        mf.samples = samples_from(samples);
        py::list rows;
        for (const auto& s : data::cap_class_counts(mf, cap, labels, seed).samples) rows.append(sample_dict(s));
        return rows;
      },
      py::arg("samples"), py::arg("cap") = 25000, py::arg("labels") = std::vector<int>{1, 2}, py::arg("seed") = 0);

  m.def(
      "letterbox_geometry",
      [](int height, int width, int target_height, int target_width) {
        const auto g = data::letterbox_geometry(height, width, {target_height, target_width});
        py::dict d;
        d["scale"] = g.scale;
        d["content_height"] = g.content_height;
        d["content_width"] = g.content_width;
        d["pad_top"] = g.pad_top;
        d["pad_left"] = g.pad_left;
        return d;
      },
      py::arg("height"), py::arg("width"), py::arg("target_height") = 1024, py::arg("target_width") = 768);

  m.def(
      "extract_pairs",
      [](const std::filesystem::path& pdf, const std::string& profile) {
        const auto r = data::extract_pairs(pdf, data::find_profile(profile));
        py::list pairs, rejects;
        for (const auto& p : r.pairs) {
          py::dict d;
          d["pair_id"] = p.pair_id;
          d["caption"] = p.caption;
          d["source"] = p.source;
          d["page"] = p.page;
          d["ocr_flag"] = p.ocr_flag;
          pairs.append(d);
        }
        for (const auto& x : r.rejects) rejects.append(py::make_tuple(x.figure_ref, x.reason));
        return py::make_tuple(pairs, rejects);
      },
      py::arg("pdf"), py::arg("profile") = "default", "Returns (pairs, rejects) without writing anything.");
  m.def("profile_names", &data::profile_names);

  m.def(
      "checkpoint_info",
      [](const std::filesystem::path& path) {
        const auto c = load_checkpoint(path);
        py::dict d;
        d["kind"] = c.kind;
        d["epoch"] = c.epoch;
        d["validation_loss"] = c.validation_loss;
        d["sha256"] = c.sha256;
        d["tensors"] = c.tensors.size();
        return d;
      },
      py::arg("path"), "Loads and verifies a checkpoint header and payload hash.");
}
