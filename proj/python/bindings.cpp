#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "vasc/augment.hpp"
#include "vasc/dataset.hpp"
#include "vasc/error.hpp"
#include "vasc/interpret.hpp"
#include "vasc/metrics.hpp"
#include "vasc/model.hpp"
#include "vasc/portable.hpp"
#include "vasc/run_config.hpp"
#include "vasc/study.hpp"
#include "vasc/surrogate.hpp"
#include "vasc/taxonomy.hpp"

namespace py = pybind11;
using namespace vasc;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// Images cross the boundary as H x W x C float arrays in [0, 1].
Image to_image(const FloatArray& a) {
  if (a.ndim() != 3) throw Error(ErrorKind::Shape, "image must be a H x W x C array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

FloatArray from_image(const Image& img) {
  FloatArray a({img.height, img.width, img.channels});
  std::copy(img.data.begin(), img.data.end(), a.mutable_data());
  return a;
}

std::vector<ScoredLabel> scored(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorKind::Shape, "scores and labels differ in length");
  std::vector<ScoredLabel> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {scores[i], labels[i]};
  return out;
}

Taxonomy taxonomy_for(int classes) {
  if (classes == 6) return default_taxonomy().subset_six();
  if (classes == 12) return default_taxonomy();
  throw Error(ErrorKind::Configuration, "classes must be 6 or 12");
}

SaliencyConfig saliency_config(int steps, int samples, double sigma, const std::string& baseline,
                               std::optional<std::size_t> target, std::uint64_t seed) {
  SaliencyConfig cfg;
  cfg.ig_steps = steps;
  cfg.smoothgrad_samples = samples;
  cfg.smoothgrad_noise_sigma = sigma;
  cfg.baseline = baseline_kind_from_string(baseline);
  cfg.target = target;
  cfg.seed = seed;
  return cfg;
}

py::dict saliency_dict(const SaliencyMap& m) {
  py::array_t<double> grid({m.height, m.width});
  std::copy(m.grid.begin(), m.grid.end(), grid.mutable_data());
  py::dict d;
  d["grid"] = grid;
  d["target"] = m.target;
  d["score_input"] = m.score_input;
  d["score_baseline"] = m.score_baseline;
  d["residual"] = m.residual;
  d["relative_residual"] = m.relative_residual;
  d["steps"] = m.steps;
  d["samples"] = m.samples;
  return d;
}

}  // namespace

PYBIND11_MODULE(_vasc, m) {
  m.doc() = "Vascular lesion classification core";

  PYBIND11_CONSTINIT static py::gil_safe_call_once_and_store<py::object> error;
  error.call_once_and_store_result([&] { return py::exception<Error>(m, "VascError"); });
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error.get_stored(), (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  // taxonomy
  m.def("class_ids", [](int classes) { return taxonomy_for(classes).class_ids(); }, py::arg("classes") = 12);
  m.def("taxonomy_text", [] { return std::string(default_taxonomy_text()); });
  m.def("resolve_label", [](const std::string& raw) { return default_taxonomy().resolve_label(raw); });
  m.def("normalize_label", &normalize_label);

  // metrics
  m.def("roc_curve", [](const std::vector<double>& s, const std::vector<bool>& y) {
    const auto curve = roc_curve(scored(s, y));
    std::vector<std::tuple<double, double, double>> pts;
    for (const auto& p : curve.points) pts.emplace_back(p.fpr, p.tpr, p.threshold);
    return pts;
  }, py::arg("scores"), py::arg("labels"), "ROC points as (fpr, tpr, threshold)");
  m.def("auc", [](const std::vector<double>& s, const std::vector<bool>& y) { return auc(roc_curve(scored(s, y))); },
        py::arg("scores"), py::arg("labels"));
  m.def("pairwise_auc", [](const std::vector<double>& s, const std::vector<bool>& y) { return pairwise_auc(scored(s, y)); },
        py::arg("scores"), py::arg("labels"));
  m.def("auc_ci", [](const std::vector<double>& s, const std::vector<bool>& y, int n_boot, std::uint64_t seed) {
    BootstrapOptions o;
    o.n_boot = n_boot;
    o.seed = seed;
    const auto ci = auc_confidence_interval(scored(s, y), o);
    return std::make_pair(ci.lo, ci.hi);
  }, py::arg("scores"), py::arg("labels"), py::arg("n_boot") = 2000, py::arg("seed") = 0);
  m.def("youden_threshold", [](const std::vector<double>& s, const std::vector<bool>& y) {
    return youden_threshold(scored(s, y));
  }, py::arg("scores"), py::arg("labels"));
  m.def("weighted_f1", [](const std::vector<double>& s, const std::vector<bool>& y, double t) {
    return weighted_f1(scored(s, y), t);
  }, py::arg("scores"), py::arg("labels"), py::arg("threshold"));
  m.def("macro_average", [](const std::vector<double>& aucs, const std::vector<double>& f1s) {
    std::vector<ClassMetrics> rows(aucs.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].auc = aucs[i];
      rows[i].f1_weighted = f1s.at(i);
    }
    return macro_average(rows);
  }, py::arg("aucs"), py::arg("f1s"));
  m.def("evaluate_predictions", [](const std::string& predictions_tsv, int n_boot, std::uint64_t seed) {
    std::vector<std::string> ids;
    const auto preds = predictions_from_tsv(predictions_tsv, &ids);
    const Taxonomy tax = taxonomy_for(static_cast<int>(ids.size()));
    BootstrapOptions o;
    o.n_boot = n_boot;
    o.seed = seed;
    return results_to_json(evaluate_predictions(preds, tax, o));
  }, py::arg("predictions_tsv"), py::arg("n_boot") = 2000, py::arg("seed") = 0,
     "Metrics JSON from a predictions TSV");

  // dataset
  m.def("split", [](const std::filesystem::path& manifest, std::uint64_t seed, int folds, int cap) {
    const Manifest mf = load_manifest(manifest);
    const auto holdout = make_test_holdout(mf, default_taxonomy().subset_six(), derive_seed(seed, 10), cap);
    const auto plan = make_grouped_folds(holdout.cv, folds, derive_seed(seed, 11));
    SplitPlan full = plan;
    full.test_group_ids = holdout.test_group_ids;
    full.per_class_cv_cap = cap;
    return split_plan_to_json(full);
  }, py::arg("manifest"), py::arg("seed") = 2024, py::arg("folds") = 10, py::arg("per_class_cv_cap") = 1000,
     "Grouped test holdout plus k folds, as split-plan JSON");
  m.def("generate_surrogate", [](const std::filesystem::path& dir, int classes, int per_class, int image_size,
                                 std::uint64_t seed, bool force) {
    SurrogateSpec spec;
    spec.class_count = classes;
    spec.images_per_class = per_class;
    spec.image_size = image_size;
    spec.seed = seed;
    return generate_surrogate(spec, default_taxonomy(), dir, force).manifest.size();
  }, py::arg("dir"), py::arg("classes") = 6, py::arg("per_class") = 120, py::arg("image_size") = 128,
     py::arg("seed") = 2024, py::arg("force") = false);

  // augmentation
  m.def("augment", [](const FloatArray& image, double angle, bool hflip, bool vflip, double shear, double zoom,
                      int output_size) {
    AugmentationPolicy policy;
    policy.output_size = output_size;
    return from_image(apply_transform(to_image(image), {angle, hflip, vflip, shear, zoom}, policy));
  }, py::arg("image"), py::arg("angle") = 0.0, py::arg("hflip") = false, py::arg("vflip") = false,
     py::arg("shear") = 0.0, py::arg("zoom") = 1.0, py::arg("output_size") = 299);
  m.def("read_image", [](const std::filesystem::path& p) { return from_image(read_pnm(p)); });
  m.def("write_image", [](const std::filesystem::path& p, const FloatArray& a) { write_pnm(p, to_image(a)); });

  // model
  py::class_<Classifier>(m, "Classifier")
      .def_static("load", &Classifier::load)
      .def_static("build", [](int classes, int input_size, std::uint64_t seed) {
        BackboneSpec b;
        b.input_size = input_size;
        HeadConfig h;
        h.num_classes = classes;
        return build_classifier(b, h, taxonomy_for(classes), seed);
      }, py::arg("classes") = 6, py::arg("input_size") = kModelInputSize, py::arg("seed") = 7)
      .def_property_readonly("class_ids", &Classifier::class_ids)
      .def_property_readonly("input_size", [](const Classifier& c) { return c.backbone().spec().input_size; })
      .def("save", &Classifier::save)
      .def("predict", [](const Classifier& c, const FloatArray& a) {
        return c.predict(preprocess_resize(to_image(a), c.backbone().spec().input_size));
      }, "Class probabilities for one H x W x C image")
      .def("features", [](const Classifier& c, const std::vector<FloatArray>& images) {
        std::vector<Image> in;
        for (const auto& a : images) in.push_back(preprocess_resize(to_image(a), c.backbone().spec().input_size));
        return extract_penultimate_features(c, in);
      }, "Penultimate-layer features, one row per image")
      .def("integrated_gradients", [](const Classifier& c, const FloatArray& a, int steps, const std::string& baseline,
                                      std::optional<std::size_t> target) {
        const Image img = preprocess_resize(to_image(a), c.backbone().spec().input_size);
        return saliency_dict(integrated_gradients(c, img, saliency_config(steps, 1, 0.0, baseline, target, 0)));
      }, py::arg("image"), py::arg("steps") = 50, py::arg("baseline") = "black", py::arg("target") = py::none())
      .def("smoothgrad", [](const Classifier& c, const FloatArray& a, int steps, int samples, double sigma,
                            const std::string& baseline, std::optional<std::size_t> target, std::uint64_t seed) {
        const Image img = preprocess_resize(to_image(a), c.backbone().spec().input_size);
        return saliency_dict(smoothgrad_smooth(c, img, saliency_config(steps, samples, sigma, baseline, target, seed)));
      }, py::arg("image"), py::arg("steps") = 50, py::arg("samples") = 25, py::arg("sigma") = 0.15,
         py::arg("baseline") = "black", py::arg("target") = py::none(), py::arg("seed") = 11)
      .def("export", [](const Classifier& c, const std::filesystem::path& p) { return export_portable(c, p).checksum; },
           "Writes a portable artifact and returns its checksum");

  m.def("tsne", [](const Eigen::MatrixXd& features, std::vector<std::string> labels, double perplexity,
                   int iterations, std::uint64_t seed) {
    EmbedConfig cfg;
    cfg.perplexity = perplexity;
    cfg.iterations = iterations;
    cfg.seed = seed;
    std::vector<std::string> ids;
    for (Eigen::Index i = 0; i < features.rows(); ++i) ids.push_back(std::to_string(i));
    if (labels.empty()) labels.assign(ids.size(), "");
    const auto r = tsne_embed(features, ids, labels, cfg);
    Eigen::MatrixXd xy(static_cast<Eigen::Index>(r.points.size()), 2);
    for (std::size_t i = 0; i < r.points.size(); ++i) {
      xy(static_cast<Eigen::Index>(i), 0) = r.points[i].x;
      xy(static_cast<Eigen::Index>(i), 1) = r.points[i].y;
    }
    return py::make_tuple(xy, r.kl_trace);
  }, py::arg("features"), py::arg("labels") = std::vector<std::string>{}, py::arg("perplexity") = 5.0,
     py::arg("iterations") = 1000, py::arg("seed") = 5, "Returns (points, kl_trace)");

  // portable inference
  py::class_<PortableModel>(m, "PortableModel")
      .def_static("load", &PortableModel::load)
      .def_property_readonly("class_ids", &PortableModel::class_ids)
      .def_property_readonly("input_size", &PortableModel::input_size)
      .def("predict", [](const PortableModel& pm, const FloatArray& a) {
        return pm.predict(preprocess_resize(to_image(a), pm.input_size()));
      })
      .def("bench", [](const PortableModel& pm, int runs, int warmup) {
        return latency_to_json(benchmark_latency(pm, runs, warmup));
      }, py::arg("runs") = 100, py::arg("warmup") = 10, "Latency report JSON");

  // configuration
  m.def("default_config", [](std::uint64_t seed) { return run_config_to_json(RunConfig::with_seed(seed)); },
        py::arg("seed") = 2024);
  m.def("validate_config", [](const std::string& text) { return run_config_to_json(run_config_from_json(text)); });

  // reader study service, in process
  py::class_<StudyService>(m, "StudyService")
      .def(py::init([](const std::string& items_json, int classes, const std::filesystem::path& log_dir,
                       std::uint64_t seed) {
        StudyDesign design;
        design.seed = seed;
        return std::make_unique<StudyService>(design, study_items_from_json(items_json), taxonomy_for(classes),
                                              log_dir);
      }), py::arg("items_json"), py::arg("classes"), py::arg("log_dir"), py::arg("seed") = 0)
      .def("create_session", [](StudyService& s, const std::string& reader) {
        return status_to_json(s.create_session(reader));
      })
      .def("next_item", [](const StudyService& s, const std::string& id) { return view_to_json(s.next_item(id)); })
      .def("submit", [](StudyService& s, const std::string& id, const std::string& item, const std::string& choice) {
        return ack_to_json(s.submit_response(id, item, choice));
      }, py::arg("session_id"), py::arg("item_id"), py::arg("chosen_class_id"))
      .def("status", [](const StudyService& s, const std::string& id) { return status_to_json(s.status(id)); })
      .def("report", [](const StudyService& s) { return study_report_to_json(s.report(), s.taxonomy()); });
}
