// Command-line entry point: one subcommand per pipeline stage.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vasc/augment.hpp"
#include "vasc/dataset.hpp"
#include "vasc/error.hpp"
#include "vasc/interpret.hpp"
#include "vasc/metrics.hpp"
#include "vasc/parallel.hpp"
#include "vasc/pipeline.hpp"
#include "vasc/plot.hpp"
#include "vasc/portable.hpp"
#include "vasc/run_config.hpp"
#include "vasc/study.hpp"
#include "vasc/study_server.hpp"
#include "vasc/surrogate.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vasc;

namespace {

// ---------------------------------------------------------------- helpers

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Exclusive ownership of an output directory for the lifetime of a command.
/// Also records the RunConfig and the digest of the manifest that fed it.
class OutputDir {
 public:
  explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    lock_ = dir_ / ".vasc.lock";
    const int fd = ::open(lock_.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
    if (fd < 0) {
      throw Error(ErrorKind::Conflict, "output directory " + dir_.string() +
                                           " is locked by another run (delete " + lock_.string() +
                                           " if it is stale)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~OutputDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  const fs::path& path() const { return dir_; }
  fs::path operator/(const std::string& name) const { return dir_ / name; }

  void record(const RunConfig& cfg, const std::string& manifest_digest) const {
    RunConfig c = cfg;
    c.output_dir = dir_.string();
    write_text(dir_ / "run_config.json", run_config_to_json(c) + "\n");
    write_text(dir_ / "manifest_digest.txt", manifest_digest + "\n");
  }

 private:
  fs::path dir_;
  fs::path lock_;
};

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<int> classes;
  std::string taxonomy_path;
  std::string manifest;
  std::string out;
  // Subcommand flags that override config-file values.
  std::function<void(RunConfig&)> overrides;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig::with_seed(c.seed.value_or(2024))
                                        : load_run_config(c.config_path);
  if (c.seed && !c.config_path.empty() && *c.seed != cfg.seed) {
    // An explicit --seed re-derives every component seed, as a fresh config would.
    const RunConfig fresh = RunConfig::with_seed(*c.seed);
    cfg.seed = fresh.seed;
    cfg.experiment.backbone.seed = fresh.experiment.backbone.seed;
    cfg.experiment.init_seed = fresh.experiment.init_seed;
    cfg.experiment.train.seed = fresh.experiment.train.seed;
    cfg.experiment.augmentation.seed = fresh.experiment.augmentation.seed;
    cfg.bootstrap.seed = fresh.bootstrap.seed;
    cfg.embed.seed = fresh.embed.seed;
    cfg.saliency.seed = fresh.saliency.seed;
    cfg.study.seed = fresh.study.seed;
  }
  if (c.threads) cfg.threads = *c.threads;
  if (c.classes) cfg.classes = *c.classes;
  cfg.experiment.head.num_classes = cfg.classes;
  cfg.experiment.train.threads = cfg.threads;
  if (!c.manifest.empty()) cfg.manifest = c.manifest;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.overrides) c.overrides(cfg);
  return cfg;
}

Taxonomy active_taxonomy(const Common& c, int classes) {
  const Taxonomy full = c.taxonomy_path.empty() ? default_taxonomy() : load_taxonomy(c.taxonomy_path);
  if (classes == 6) return full.subset_six();
  if (classes == 12) return full;
  throw Error(ErrorKind::Configuration, "--classes must be 6 or 12");
}

/// Records of the manifest that belong to the active taxonomy.
Manifest restrict_to(const Manifest& m, const Taxonomy& taxonomy) {
  Manifest out;
  out.taxonomy_version = m.taxonomy_version;
  for (const auto& r : m.records) {
    if (taxonomy.index_of(r.class_id)) out.records.push_back(r);
  }
  if (out.records.empty()) throw Error(ErrorKind::EmptyManifest, "no records in the active classes");
  return out;
}

fs::path manifest_root(const fs::path& manifest_path) {
  const fs::path parent = fs::absolute(manifest_path).parent_path();
  return parent;
}

struct SplitBundle {
  Manifest cv;
  Manifest test;
  SplitPlan plan;
};

SplitBundle compute_split(const Manifest& manifest, const Taxonomy& taxonomy, const RunConfig& cfg) {
  SplitBundle b;
  auto holdout = make_test_holdout(manifest, taxonomy, derive_seed(cfg.seed, 10), cfg.per_class_cv_cap);
  b.plan = make_grouped_folds(holdout.cv, cfg.folds, derive_seed(cfg.seed, 11));
  b.plan.test_group_ids = holdout.test_group_ids;
  b.plan.per_class_cv_cap = cfg.per_class_cv_cap;
  b.cv = std::move(holdout.cv);
  b.test = std::move(holdout.test);
  return b;
}

/// Loads a split directory written by `split`, re-restricted to the manifest.
SplitBundle load_split(const fs::path& dir, const Manifest& manifest) {
  SplitBundle b;
  b.plan = split_plan_from_json(read_file(dir / "split.json"));
  std::set<std::string> cv_groups;
  for (const auto& g : manifest.group_ids()) {
    if (!b.plan.test_group_ids.count(g)) cv_groups.insert(g);
  }
  b.cv = manifest.with_groups(cv_groups);
  b.test = manifest.with_groups(b.plan.test_group_ids);
  return b;
}

std::string slug(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-') ? c : '_';
  return out;
}

void write_metrics_outputs(const OutputDir& out, const MetricsReport& report,
                           std::span<const PredictionRecord> preds, const Taxonomy& taxonomy,
                           const std::string& title) {
  write_text(out / "results.json", results_to_json(report) + "\n");
  write_text(out / "table.txt", format_table(report, taxonomy));
  write_text(out / "predictions.tsv", predictions_to_tsv(preds, taxonomy.class_ids()));
  std::vector<NamedCurve> curves;
  for (std::size_t k = 0; k < taxonomy.size(); ++k) {
    const auto scores = one_vs_rest(preds, taxonomy, k);
    NamedCurve nc{taxonomy[k].display_name, roc_curve(scores), 0.0};
    nc.auc = auc(nc.curve);
    write_text(out.path() / "roc" / (taxonomy[k].class_id + ".txt"), roc_to_text(nc.curve));
    curves.push_back(std::move(nc));
  }
  write_text(out / "roc.svg", roc_svg(curves, title));
  std::vector<std::string> names;
  for (const auto& c : taxonomy.classes()) names.push_back(c.display_name);
  write_text(out / "confusion.svg", confusion_svg(report.confusion, names, title + " (confusion)"));
}

// ---------------------------------------------------------------- commands

int cmd_surrogate(const Common& c, int per_class, int group_size, int size, bool force) {
  RunConfig cfg = resolve_config(c);
  if (c.out.empty()) throw Error(ErrorKind::Configuration, "--out is required");
  if (fs::exists(c.out) && !fs::is_empty(c.out) && !force) {
    throw Error(ErrorKind::Io, "output directory " + c.out + " is not empty (use --force)");
  }
  OutputDir out(c.out);
  SurrogateSpec spec;
  spec.class_count = cfg.classes;
  spec.images_per_class = per_class;
  spec.group_size = group_size;
  spec.image_size = size;
  spec.seed = cfg.seed;
  const Taxonomy full = c.taxonomy_path.empty() ? default_taxonomy() : load_taxonomy(c.taxonomy_path);
  const auto result = generate_surrogate(spec, full, out.path(), true, cfg.threads);
  cfg.manifest = (out / "manifest.tsv").string();
  out.record(cfg, result.manifest.content_digest());
  std::cout << "wrote " << result.manifest.size() << " images in "
            << result.manifest.group_ids().size() << " lesion groups to " << out.path().string() << "\n";
  return 0;
}

int cmd_ingest(const Common& c, const std::vector<std::string>& roots_spec) {
  RunConfig cfg = resolve_config(c);
  if (c.out.empty()) throw Error(ErrorKind::Configuration, "--out is required");
  std::vector<SourceRoot> roots;
  for (const auto& spec : roots_spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Configuration, "--root expects source=DIR, got " + spec);
    roots.push_back({spec.substr(0, eq), fs::absolute(spec.substr(eq + 1))});
  }
  OutputDir out(c.out);
  const Taxonomy full = c.taxonomy_path.empty() ? default_taxonomy() : load_taxonomy(c.taxonomy_path);
  auto result = ingest_sources(roots, full, GroupingRule{}, fs::absolute(out.path()), cfg.threads);
  save_manifest(result.manifest, out / "manifest.tsv");
  std::string warnings;
  for (const auto& w : result.warnings) warnings += w + "\n";
  write_text(out / "warnings.txt", warnings);
  cfg.manifest = (out / "manifest.tsv").string();
  out.record(cfg, result.manifest.content_digest());
  std::cout << "ingested " << result.manifest.size() << " images, " << result.warnings.size()
            << " warnings\n";
  return 0;
}

int cmd_split(const Common& c) {
  const RunConfig cfg = resolve_config(c);
  const Taxonomy taxonomy = active_taxonomy(c, cfg.classes);
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);
  const auto split = compute_split(manifest, taxonomy, cfg);
  write_text(out / "split.json", split_plan_to_json(split.plan) + "\n");
  save_manifest(split.cv, out / "cv_manifest.tsv");
  save_manifest(split.test, out / "test_manifest.tsv");
  std::ostringstream summary;
  summary << "class\tcv_images\ttest_images\n";
  for (const auto& cls : taxonomy.classes()) {
    summary << cls.class_id << '\t' << split.cv.of_class(cls.class_id).size() << '\t'
            << split.test.of_class(cls.class_id).size() << '\n';
  }
  write_text(out / "summary.tsv", summary.str());
  out.record(cfg, manifest.content_digest());
  std::cout << summary.str();
  return 0;
}

int cmd_crossval(const Common& c, const std::string& split_dir, bool per_fold) {
  const RunConfig cfg = resolve_config(c);
  cfg.validate();
  const Taxonomy taxonomy = active_taxonomy(c, cfg.classes);
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);
  const SplitBundle split = split_dir.empty() ? compute_split(manifest, taxonomy, cfg)
                                              : load_split(split_dir, manifest);
  write_text(out / "split.json", split_plan_to_json(split.plan) + "\n");
  const ImageStore store(manifest_root(cfg.manifest));
  const auto cv = run_crossval(split.cv, split.plan, taxonomy, cfg.experiment, store);
  for (std::size_t f = 0; f < cv.curves.size(); ++f) {
    write_text(out.path() / "curves" / ("fold_" + std::to_string(f) + ".txt"), format_curve(cv.curves[f]));
  }
  MetricsReport report = evaluate_predictions(cv.pooled, taxonomy, cfg.bootstrap);
  write_metrics_outputs(out, report, cv.pooled, taxonomy,
                        std::to_string(taxonomy.size()) + "-class cross-validation (pooled)");
  if (per_fold) {
    std::ostringstream text;
    text << "class\tmean_auc\tsd_auc\tfolds\n";
    for (std::size_t k = 0; k < taxonomy.size(); ++k) {
      std::vector<double> aucs;
      for (const auto& fold : cv.per_fold) {
        try {
          aucs.push_back(auc(roc_curve(one_vs_rest(fold, taxonomy, k))));
        } catch (const Error&) {
          // A fold without positives or negatives for this class has no AUC.
        }
      }
      double mean = 0.0, var = 0.0;
      for (double a : aucs) mean += a;
      mean /= std::max<std::size_t>(aucs.size(), 1);
      for (double a : aucs) var += (a - mean) * (a - mean);
      const double sd = aucs.size() > 1 ? std::sqrt(var / static_cast<double>(aucs.size() - 1)) : 0.0;
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s\t%.4f\t%.4f\t%zu\n", taxonomy[k].class_id.c_str(), mean, sd,
                    aucs.size());
      text << buf;
    }
    write_text(out / "per_fold.tsv", text.str());
    std::cout << text.str() << "\n";
  }
  out.record(cfg, manifest.content_digest());
  std::cout << format_table(report, taxonomy);
  return 0;
}

int cmd_train_final(const Common& c, const std::string& split_dir) {
  const RunConfig cfg = resolve_config(c);
  cfg.validate();
  const Taxonomy taxonomy = active_taxonomy(c, cfg.classes);
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);
  const SplitBundle split = split_dir.empty() ? compute_split(manifest, taxonomy, cfg)
                                              : load_split(split_dir, manifest);
  write_text(out / "split.json", split_plan_to_json(split.plan) + "\n");
  const ImageStore store(manifest_root(cfg.manifest));
  const auto result = train_final(split.cv, taxonomy, cfg.experiment, store);
  result.model.save(out / "model");
  write_text(out / "curve.txt", format_curve(result.curve));
  out.record(cfg, manifest.content_digest());
  std::cout << "trained on " << split.cv.size() << " images; best epoch " << result.best_epoch
            << "; checkpoint in " << (out / "model").string() << "\n";
  return 0;
}

int cmd_test(const Common& c, const std::string& model_dir, const std::string& split_dir) {
  const RunConfig cfg = resolve_config(c);
  const Classifier model = Classifier::load(model_dir);
  const Taxonomy taxonomy = active_taxonomy(c, static_cast<int>(model.num_classes()));
  if (taxonomy.class_ids() != model.class_ids()) {
    throw Error(ErrorKind::Configuration, "model classes differ from the active taxonomy");
  }
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);
  RunConfig recorded = cfg;
  recorded.classes = static_cast<int>(model.num_classes());
  recorded.experiment.head.num_classes = recorded.classes;
  const SplitBundle split = split_dir.empty() ? compute_split(manifest, taxonomy, recorded)
                                              : load_split(split_dir, manifest);
  const ImageStore store(manifest_root(cfg.manifest));
  const auto preds = evaluate(model, split.test.records, store, cfg.threads);
  const MetricsReport report = evaluate_predictions(preds, taxonomy, cfg.bootstrap);
  write_metrics_outputs(out, report, preds, taxonomy, "Test set");
  out.record(recorded, manifest.content_digest());
  std::cout << format_table(report, taxonomy);
  return 0;
}

int cmd_explain(const Common& c, const std::string& model_dir, std::vector<std::string> image_ids,
                int per_class, bool signed_scale) {
  const RunConfig cfg = resolve_config(c);
  const Classifier model = Classifier::load(model_dir);
  const Taxonomy taxonomy = active_taxonomy(c, static_cast<int>(model.num_classes()));
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  SaliencyConfig scfg = cfg.saliency;
  if (scfg.baseline == BaselineKind::Custom) {
    scfg.custom_baseline = preprocess_resize(read_pnm(cfg.saliency_baseline_path), model.backbone().spec().input_size);
  }
  scfg.validate();

  std::vector<ImageRecord> chosen;
  if (image_ids.empty()) {
    for (const auto& cls : taxonomy.classes()) {
      auto recs = manifest.of_class(cls.class_id);
      std::sort(recs.begin(), recs.end(),
                [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
      for (int i = 0; i < per_class && i < static_cast<int>(recs.size()); ++i) chosen.push_back(recs[static_cast<std::size_t>(i)]);
    }
  } else {
    std::map<std::string, ImageRecord> by_id;
    for (const auto& r : manifest.records) by_id[r.image_id] = r;
    for (const auto& id : image_ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw Error(ErrorKind::NotFound, "image " + id + " is not in the manifest");
      chosen.push_back(it->second);
    }
  }

  const fs::path root = manifest_root(cfg.manifest);
  std::map<std::string, LesionBox> boxes;
  if (fs::exists(root / "lesions.tsv")) boxes = load_lesion_boxes(root / "lesions.tsv");

  OutputDir out(cfg.output_dir);
  const int size = model.backbone().spec().input_size;
  std::vector<std::string> rows(chosen.size());
  parallel_for(chosen.size(), cfg.threads, [&](std::size_t i) {
    const auto& rec = chosen[i];
    const Image raw = read_pnm(root / rec.file_path);
    const Image input = preprocess_resize(raw, size);
    const SaliencyMap map = smoothgrad_smooth(model, input, scfg);
    const std::string stem = slug(rec.image_id);
    write_pnm(out / (stem + "_input.ppm"), input);
    write_pnm(out / (stem + "_overlay.pgm"), render_saliency(map, input, !signed_scale));
    write_saliency_grid(out / (stem + "_grid.txt"), map);
    std::string ratio = "";
    if (const auto b = boxes.find(rec.image_id); b != boxes.end()) {
      const double sx = static_cast<double>(size) / raw.width, sy = static_cast<double>(size) / raw.height;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f",
                    attribution_density_ratio(map, static_cast<int>(b->second.x0 * sx), static_cast<int>(b->second.y0 * sy),
                                              static_cast<int>(std::ceil(b->second.x1 * sx)),
                                              static_cast<int>(std::ceil(b->second.y1 * sy))));
      ratio = buf;
    }
    char line[512];
    std::snprintf(line, sizeof line, "%s\t%s\t%s\t%.6f\t%.3e\t%.3e\t%s\n", rec.image_id.c_str(),
                  rec.class_id.c_str(), taxonomy[map.target].class_id.c_str(), map.score_input,
                  map.residual, map.relative_residual, ratio.c_str());
    rows[i] = line;
  });
  std::string gallery = "image_id\tclass_id\ttarget\tscore\tresidual\trelative_residual\tlesion_density_ratio\n";
  for (const auto& r : rows) gallery += r;
  write_text(out / "gallery.tsv", gallery);
  out.record(cfg, manifest.content_digest());
  std::cout << gallery;
  return 0;
}

int cmd_embed(const Common& c, const std::string& model_dir) {
  const RunConfig cfg = resolve_config(c);
  const Classifier model = Classifier::load(model_dir);
  const Taxonomy taxonomy = active_taxonomy(c, static_cast<int>(model.num_classes()));
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);

  std::vector<ImageRecord> records = manifest.records;
  std::sort(records.begin(), records.end(),
            [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
  if (records.size() > cfg.embed.max_points) {
    std::vector<std::size_t> rows(records.size());
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(derive_seed(cfg.embed.seed, 1));
    rng.shuffle(rows.begin(), rows.end());
    rows.resize(cfg.embed.max_points);
    std::sort(rows.begin(), rows.end());
    std::vector<ImageRecord> kept;
    for (auto r : rows) kept.push_back(records[r]);
    records = std::move(kept);
  }
  const ImageStore store(manifest_root(cfg.manifest));
  std::vector<Image> images(records.size());
  parallel_for(records.size(), cfg.threads, [&](std::size_t i) {
    images[i] = preprocess_resize(*store.get(records[i]), model.backbone().spec().input_size);
  });
  std::vector<std::string> warnings;
  const Eigen::MatrixXd features = extract_penultimate_features(model, images, cfg.threads, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::vector<std::string> ids, classes;
  for (const auto& r : records) {
    ids.push_back(r.image_id);
    classes.push_back(r.class_id);
  }
  const auto result = tsne_embed(features, ids, classes, cfg.embed);
  write_embedding(out / "embedding.tsv", result);
  std::ostringstream trace;
  trace.precision(10);
  trace << "# iteration kl\n";
  for (std::size_t i = 0; i < result.kl_trace.size(); ++i) trace << i << ' ' << result.kl_trace[i] << '\n';
  write_text(out / "kl_trace.txt", trace.str());
  write_text(out / "embedding.svg",
             embedding_svg(result.points, taxonomy.class_ids(), "t-SNE of penultimate features"));
  out.record(cfg, manifest.content_digest());
  std::cout << "embedded " << result.points.size() << " points, perplexity " << result.config.perplexity
            << ", " << result.config.iterations << " iterations, final KL " << result.final_kl << "\n";
  return 0;
}

int cmd_export(const Common& c, const std::string& model_dir) {
  const RunConfig cfg = resolve_config(c);
  const Classifier model = Classifier::load(model_dir);
  OutputDir out(cfg.output_dir);
  const auto summary = export_portable(model, out / "model.vpt");
  json j = {{"artifact", "model.vpt"}, {"bytes", summary.bytes}, {"ops", summary.ops},
            {"checksum", summary.checksum}, {"classes", model.class_ids()}};
  write_text(out / "export.json", j.dump(2) + "\n");
  out.record(cfg, "none");
  std::cout << "exported " << summary.bytes << " bytes to " << summary.path.string() << "\n";
  return 0;
}

int cmd_bench(const Common& c, const std::string& artifact, int runs, int warmup) {
  const RunConfig cfg = resolve_config(c);
  const PortableModel model = PortableModel::load(artifact);
  OutputDir out(cfg.output_dir);
  const auto report = benchmark_latency(model, runs, warmup, cfg.seed);
  write_text(out / "latency.json", latency_to_json(report) + "\n");
  out.record(cfg, "none");
  std::printf("runs %zu  median %.3f ms  p95 %.3f ms  (%s)\n", report.samples_ms.size(), report.median_ms,
              report.p95_ms, report.hardware.c_str());
  return 0;
}

int cmd_predict(const Common& c, const std::string& artifact, const std::string& model_dir,
                const std::vector<std::string>& files) {
  if (artifact.empty() == model_dir.empty()) {
    throw Error(ErrorKind::Configuration, "give exactly one of --artifact or --model");
  }
  std::optional<PortableModel> portable;
  std::optional<Classifier> classifier;
  std::vector<std::string> class_ids;
  int size = 0;
  if (!artifact.empty()) {
    portable.emplace(PortableModel::load(artifact));
    class_ids = portable->class_ids();
    size = portable->input_size();
  } else {
    classifier.emplace(Classifier::load(model_dir));
    class_ids = classifier->class_ids();
    size = classifier->backbone().spec().input_size;
  }
  std::ostringstream out;
  out.precision(9);
  out << "file";
  for (const auto& id : class_ids) out << "\tp:" << id;
  out << '\n';
  for (const auto& f : files) {
    const Image input = preprocess_resize(read_pnm(f), size);
    out << f;
    if (portable) {
      for (float p : portable->predict(input)) out << '\t' << p;
    } else {
      for (double p : classifier->predict(input)) out << '\t' << p;
    }
    out << '\n';
  }
  if (c.out.empty()) {
    std::cout << out.str();
  } else {
    write_text(c.out, out.str());
  }
  return 0;
}

std::atomic<StudyServer*> g_server{nullptr};

void handle_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

int cmd_study_serve(const Common& c, const std::string& model_dir, const std::string& split_dir,
                    const std::string& host, int port, const std::string& static_dir,
                    const std::string& admin_token, const std::string& eligible_file) {
  RunConfig cfg = resolve_config(c);
  const Classifier model = Classifier::load(model_dir);
  const Taxonomy taxonomy = active_taxonomy(c, static_cast<int>(model.num_classes()));
  cfg.classes = static_cast<int>(model.num_classes());
  cfg.experiment.head.num_classes = cfg.classes;
  const Manifest manifest = restrict_to(load_manifest(cfg.manifest), taxonomy);
  OutputDir out(cfg.output_dir);

  std::vector<StudyItem> items;
  if (fs::exists(out / "items.json")) {
    items = study_items_from_json(read_file(out / "items.json"));
  } else {
    const SplitBundle split = split_dir.empty() ? compute_split(manifest, taxonomy, cfg)
                                                : load_split(split_dir, manifest);
    const ImageStore store(manifest_root(cfg.manifest));
    const auto preds = evaluate(model, split.test.records, store, cfg.threads);
    std::set<std::string> eligible;
    if (!eligible_file.empty()) {
      std::istringstream in(read_file(eligible_file));
      for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line[0] != '#') eligible.insert(line);
      }
    }
    items = draw_study_items(cfg.study, split.test, preds, taxonomy, eligible_file.empty() ? nullptr : &eligible);
    write_text(out / "items.json", study_items_to_json(items) + "\n");
    write_text(out / "taxonomy.txt", taxonomy.to_text());
  }
  out.record(cfg, manifest.content_digest());

  StudyService service(cfg.study, items, taxonomy, out / "sessions");
  ServerOptions options;
  options.image_root = manifest_root(cfg.manifest);
  if (!static_dir.empty()) options.static_dir = fs::path(static_dir);
  options.admin_token = admin_token;
  StudyServer server(service, &model, options);
  const bool bound = port == 0 ? (port = server.bind_any_port(host)) > 0 : server.bind(host, port);
  if (!bound) throw Error(ErrorKind::Io, "cannot bind " + host + ":" + std::to_string(port));
  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << "study service on http://" << host << ":" << port << " with " << items.size()
            << " items" << std::endl;
  server.serve();
  g_server = nullptr;
  return 0;
}

int cmd_study_report(const Common& c, const std::string& study_dir) {
  RunConfig cfg = resolve_config(c);
  const fs::path dir(study_dir);
  const auto items = study_items_from_json(read_file(dir / "items.json"));
  const Taxonomy taxonomy = fs::exists(dir / "taxonomy.txt") ? load_taxonomy(dir / "taxonomy.txt")
                                                            : active_taxonomy(c, 6);
  const StudyService service(cfg.study, items, taxonomy, dir / "sessions");
  const StudyReport report = service.report();
  OutputDir out(cfg.output_dir);
  write_text(out / "report.json", study_report_to_json(report, taxonomy) + "\n");
  write_text(out / "report.txt", format_study_report(report, taxonomy));
  std::vector<std::string> names;
  for (const auto& cls : taxonomy.classes()) names.push_back(cls.display_name);
  write_text(out / "unaided.svg", confusion_svg(report.pooled_pass1, names, "Readers without the classifier"));
  write_text(out / "aided.svg", confusion_svg(report.pooled_pass2, names, "Readers with the classifier"));
  write_text(out / "classifier.svg", confusion_svg(report.classifier, names, "Classifier"));
  for (const auto& r : report.readers) {
    write_text(out.path() / "readers" / (slug(r.reader_id) + "_unaided.svg"),
               confusion_svg(r.pass1, names, r.reader_id + " without the classifier"));
    write_text(out.path() / "readers" / (slug(r.reader_id) + "_aided.svg"),
               confusion_svg(r.pass2, names, r.reader_id + " with the classifier"));
  }
  cfg.classes = static_cast<int>(taxonomy.size());
  cfg.experiment.head.num_classes = cfg.classes;
  out.record(cfg, "none");
  std::cout << format_study_report(report, taxonomy);
  return 0;
}

void print_error(std::string_view kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pediatric skin-lesion classifier toolkit"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub, bool needs_manifest, bool needs_out) {
    sub->add_option("--config", common.config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Global seed (derives every component seed)");
    sub->add_option("--threads", common.threads, "Worker threads (0 = all cores)");
    sub->add_option("--taxonomy", common.taxonomy_path, "Taxonomy definition file")->check(CLI::ExistingFile);
    auto* m = sub->add_option("--manifest", common.manifest, "Image manifest (TSV)");
    if (needs_manifest) m->required()->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out", common.out, "Output directory");
    if (needs_out) o->required();
  };
  auto add_classes = [&](CLI::App* sub) {
    sub->add_option("--classes", common.classes, "6 or 12")->check(CLI::IsMember({6, 12}));
  };

  auto* surrogate = app.add_subcommand("surrogate", "Generate the synthetic surrogate corpus");
  add_common(surrogate, false, true);
  add_classes(surrogate);
  int per_class = 120, group_size = 3, image_size = 128;
  bool force = false;
  surrogate->add_option("--per-class", per_class, "Images per class");
  surrogate->add_option("--group-size", group_size, "Views per lesion group");
  surrogate->add_option("--size", image_size, "Image edge length in pixels");
  surrogate->add_flag("--force", force, "Write into a non-empty directory");

  auto* ingest = app.add_subcommand("ingest", "Build a manifest from labeled image folders");
  add_common(ingest, false, true);
  std::vector<std::string> roots;
  ingest->add_option("--root", roots, "source=DIR with one sub-directory per raw label")->required();

  auto* split = app.add_subcommand("split", "Carve the test split and assign grouped folds");
  add_common(split, true, true);
  add_classes(split);

  std::string split_dir;
  bool per_fold = false;
  auto* crossval = app.add_subcommand("crossval", "Grouped k-fold cross-validation");
  add_common(crossval, true, true);
  add_classes(crossval);
  crossval->add_option("--split", split_dir, "Directory written by `split`")->check(CLI::ExistingDirectory);
  crossval->add_flag("--per-fold", per_fold, "Also report per-fold AUC mean and sd");

  auto* train_cmd = app.add_subcommand("train-final", "Train on all cross-validation data");
  add_common(train_cmd, true, true);
  add_classes(train_cmd);
  train_cmd->add_option("--split", split_dir, "Directory written by `split`")->check(CLI::ExistingDirectory);

  std::string model_dir;
  auto* test = app.add_subcommand("test", "Evaluate a trained model on the held-out test split");
  add_common(test, true, true);
  test->add_option("--model", model_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  test->add_option("--split", split_dir, "Directory written by `split`")->check(CLI::ExistingDirectory);

  std::vector<std::string> image_ids;
  int explain_per_class = 1;
  bool signed_scale = false;
  std::optional<int> ig_steps, sg_samples;
  std::optional<double> sg_sigma;
  std::string baseline;
  auto* explain = app.add_subcommand("explain", "Integrated-gradients saliency gallery");
  add_common(explain, true, true);
  explain->add_option("--model", model_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  explain->add_option("--image", image_ids, "Image id (repeatable); default: first images per class");
  explain->add_option("--per-class", explain_per_class, "Images per class when no --image is given");
  explain->add_option("--steps", ig_steps, "Integration steps");
  explain->add_option("--samples", sg_samples, "SmoothGrad samples");
  explain->add_option("--sigma", sg_sigma, "SmoothGrad noise sigma");
  explain->add_option("--baseline", baseline, "black | gray | custom");
  explain->add_flag("--signed", signed_scale, "Render signed attributions around mid-gray");

  std::optional<double> perplexity;
  std::optional<int> iterations;
  auto* embed = app.add_subcommand("embed", "t-SNE embedding of penultimate features");
  add_common(embed, true, true);
  embed->add_option("--model", model_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  embed->add_option("--perplexity", perplexity, "t-SNE perplexity");
  embed->add_option("--iterations", iterations, "Gradient-descent iterations");

  auto* export_cmd = app.add_subcommand("export", "Write the portable inference artifact");
  add_common(export_cmd, false, true);
  export_cmd->add_option("--model", model_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);

  std::string artifact;
  int runs = 100, warmup = 10;
  auto* bench = app.add_subcommand("bench", "Batch-1 latency of a portable artifact");
  add_common(bench, false, true);
  bench->add_option("--artifact", artifact, "Portable model file")->required()->check(CLI::ExistingFile);
  bench->add_option("--runs", runs, "Timed runs (>= 30)");
  bench->add_option("--warmup", warmup, "Untimed warmup runs (>= 5)");

  std::vector<std::string> files;
  auto* predict = app.add_subcommand("predict", "Class probabilities for image files");
  add_common(predict, false, false);
  predict->add_option("--artifact", artifact, "Portable model file")->check(CLI::ExistingFile);
  predict->add_option("--model", model_dir, "Checkpoint directory")->check(CLI::ExistingDirectory);
  predict->add_option("files", files, "Netpbm images")->required()->check(CLI::ExistingFile);

  std::string host = "127.0.0.1", static_dir, admin_token, eligible_file;
  int port = 8080;
  auto* serve = app.add_subcommand("study-serve", "Run the reader-study service");
  add_common(serve, true, true);
  serve->add_option("--model", model_dir, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--split", split_dir, "Directory written by `split`")->check(CLI::ExistingDirectory);
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");
  serve->add_option("--static", static_dir, "Static asset directory served at /")->check(CLI::ExistingDirectory);
  serve->add_option("--admin-token", admin_token, "Token required by /api/report");
  serve->add_option("--eligible", eligible_file, "File listing eligible image ids")->check(CLI::ExistingFile);
  std::optional<int> study_per_class;
  serve->add_option("--per-class", study_per_class, "Study images per class");

  std::string study_dir;
  auto* report = app.add_subcommand("study-report", "Confusion matrices from completed sessions");
  add_common(report, false, true);
  report->add_option("--study", study_dir, "Directory used by study-serve")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const bool unknown = argc > 1 && argv[1][0] != '-' && app.get_subcommands().empty();
    print_error(unknown ? "unknown_command" : "usage",
                unknown ? std::string("unknown subcommand '") + argv[1] + "'" : std::string(e.what()));
    return 2;
  }

  try {
    if (surrogate->parsed()) return cmd_surrogate(common, per_class, group_size, image_size, force);
    if (ingest->parsed()) return cmd_ingest(common, roots);
    if (split->parsed()) return cmd_split(common);
    if (crossval->parsed()) return cmd_crossval(common, split_dir, per_fold);
    if (train_cmd->parsed()) return cmd_train_final(common, split_dir);
    if (test->parsed()) return cmd_test(common, model_dir, split_dir);
    if (explain->parsed()) {
      common.overrides = [&](RunConfig& cfg) {
        if (ig_steps) cfg.saliency.ig_steps = *ig_steps;
        if (sg_samples) cfg.saliency.smoothgrad_samples = *sg_samples;
        if (sg_sigma) cfg.saliency.smoothgrad_noise_sigma = *sg_sigma;
        if (!baseline.empty()) cfg.saliency.baseline = baseline_kind_from_string(baseline);
      };
      return cmd_explain(common, model_dir, image_ids, explain_per_class, signed_scale);
    }
    if (embed->parsed()) {
      common.overrides = [&](RunConfig& cfg) {
        if (perplexity) cfg.embed.perplexity = *perplexity;
        if (iterations) cfg.embed.iterations = *iterations;
      };
      return cmd_embed(common, model_dir);
    }
    if (export_cmd->parsed()) return cmd_export(common, model_dir);
    if (bench->parsed()) return cmd_bench(common, artifact, runs, warmup);
    if (predict->parsed()) return cmd_predict(common, artifact, model_dir, files);
    if (serve->parsed()) {
      common.overrides = [&](RunConfig& cfg) {
        if (study_per_class) cfg.study.per_class_count = *study_per_class;
      };
      return cmd_study_serve(common, model_dir, split_dir, host, port, static_dir, admin_token, eligible_file);
    }
    if (report->parsed()) return cmd_study_report(common, study_dir);
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  print_error("unknown_command", "no subcommand given");
  return 2;
}
