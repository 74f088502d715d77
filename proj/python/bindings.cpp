// Thin Python surface over the C++ core. Structured results cross as JSON text
// and are decoded on the Python side.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ocrlens/activation_store.hpp"
#include "ocrlens/delta_pca.hpp"
#include "ocrlens/error.hpp"
#include "ocrlens/eval.hpp"
#include "ocrlens/intervene.hpp"
#include "ocrlens/sweep.hpp"

namespace py = pybind11;
using namespace ocrlens;

namespace {

ToyModelConfig config_of(const std::string& json_text) {
  return json_text.empty() ? ToyModelConfig{} : config_from_json(nlohmann::json::parse(json_text));
}

py::array_t<float> record_array(const ActivationRecord& r) {
  py::array_t<float> out({static_cast<py::ssize_t>(r.tokens), static_cast<py::ssize_t>(r.hidden)});
  std::copy(r.values.begin(), r.values.end(), out.mutable_data());
  return out;
}

py::dict sample_dict(const PairedSample& s) {
  py::dict original, inpainted;
  for (const auto& r : s.original) original[py::int_(r.layer)] = record_array(r);
  for (const auto& r : s.inpainted) inpainted[py::int_(r.layer)] = record_array(r);
  py::dict d;
  d["sample_id"] = s.sample_id;
  d["aligned_positions"] = s.aligned_positions;
  d["original"] = original;
  d["inpainted"] = inpainted;
  return d;
}

}  // namespace

PYBIND11_MODULE(_ocrlens, m) {
  m.doc() = "ocrlens core bindings";

  static py::exception<Error> error_type(m, "OcrlensError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object type = py::reinterpret_borrow<py::object>(error_type);
      py::object err = type(py::str(e.what()));
      err.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(error_type.ptr(), err.ptr());
    }
  });

  m.def("normalize_answer", [](const std::string& s) { return normalize_answer(s); });
  m.def("match_answer", [](const std::string& gt, const std::string& pred) {
    const MatchVerdict v = match_answer(gt, pred);
    return py::make_tuple(v.matched, v.flagged);
  });

  m.def("canonical_spec", [](const std::string& text) { return to_string(parse_spec(text)); });

  m.def(
      "project_out",
      [](const std::vector<double>& h, const std::vector<std::vector<double>>& components, std::size_t n,
         double alpha) {
        PrincipalSubspace s;
        const std::size_t d = h.size();
        s.components = Matrix(components.size(), d);
        for (std::size_t i = 0; i < components.size(); ++i) {
          if (components[i].size() != d) throw Error(ErrorCode::DimensionMismatch, "component width differs from h");
          std::copy(components[i].begin(), components[i].end(), s.components.row(i).begin());
        }
        return project_out(h, s, n, alpha);
      },
      py::arg("h"), py::arg("components"), py::arg("n"), py::arg("alpha") = 1.0);

  m.def(
      "decode",
      [](const std::string& config_json, const std::string& scene_json, const std::string& spec) {
        const ToyModel model = build_model(config_of(config_json));
        const ToyScene scene = scene_from_json(nlohmann::json::parse(scene_json));
        const InterventionSpec parsed = parse_spec(spec);
        if (parsed.kind == InterventionKind::pca_projection) {
          throw Error(ErrorCode::MissingDirections, "decode takes baseline or head specs");
        }
        return greedy_decode(model, model.embed(scene), make_hooks(parsed, model, nullptr)).answer;
      },
      py::arg("config_json"), py::arg("scene_json"), py::arg("spec") = "baseline");

  m.def(
      "generate_scenes",
      [](const std::string& question, std::size_t count, std::uint64_t seed, double text_probability) {
        SceneDistribution d;
        d.question = parse_question(question);
        d.text_probability = text_probability;
        return scenes_to_json(generate_scenes(d, count, seed)).dump();
      },
      py::arg("question") = "read_text", py::arg("count") = 16, py::arg("seed") = 0,
      py::arg("text_probability") = 1.0);

  m.def("read_actb", [](const std::filesystem::path& path) {
    const ActbContents c = read_actb_file(path);
    py::list samples;
    for (const auto& s : c.samples) samples.append(sample_dict(s));
    return py::make_tuple(manifest_to_json(c.manifest).dump(), samples);
  });

  m.def("load_directions", [](const std::filesystem::path& path) {
    const DirectionSet set = load_directions_file(path);
    py::dict layers;
    for (const auto& s : set.subspaces) {
      py::array_t<double> comps({static_cast<py::ssize_t>(s.size()), static_cast<py::ssize_t>(s.hidden())});
      std::copy(s.components.data().begin(), s.components.data().end(), comps.mutable_data());
      py::dict entry;
      entry["components"] = comps;
      entry["variance_ratios"] = s.variance_ratios;
      layers[py::int_(s.layer)] = entry;
    }
    return py::make_tuple(set.model_id, std::string(to_string(set.pooling)), layers);
  });

  m.def(
      "layer_sweep",
      [](const std::string& config_json, std::vector<int> layers, std::vector<int> components,
         std::vector<double> alphas, std::size_t count, std::uint64_t seed, const std::string& report) {
        LayerSweepConfig c;
        c.model = config_of(config_json);
        c.layers = std::move(layers);
        c.components = std::move(components);
        c.alphas = std::move(alphas);
        c.scene_count = count;
        c.seed = seed;
        py::gil_scoped_release release;
        return render_report(run_layer_sweep(c), parse_report_format(report));
      },
      py::arg("config_json") = "", py::arg("layers") = std::vector<int>{}, py::arg("components") = std::vector<int>{3},
      py::arg("alphas") = std::vector<double>{1.0}, py::arg("count") = 160, py::arg("seed") = 0,
      py::arg("report") = "json");
}
