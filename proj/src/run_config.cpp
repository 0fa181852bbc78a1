#include "vasc/run_config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vasc/error.hpp"
#include "vasc/random.hpp"

namespace vasc {

using json = nlohmann::json;

RunConfig RunConfig::with_seed(std::uint64_t seed) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.experiment.head.num_classes = cfg.classes;
  cfg.experiment.backbone.seed = derive_seed(seed, 1);
  cfg.experiment.init_seed = derive_seed(seed, 2);
  cfg.experiment.train.seed = derive_seed(seed, 3);
  cfg.experiment.augmentation.seed = derive_seed(seed, 4);
  cfg.bootstrap.seed = derive_seed(seed, 5);
  cfg.embed.seed = derive_seed(seed, 6);
  cfg.saliency.seed = derive_seed(seed, 7);
  cfg.study.seed = derive_seed(seed, 8);
  return cfg;
}

std::vector<std::string> RunConfig::violations() const {
  std::vector<std::string> out;
  auto collect = [&](const char* section, auto&& check) {
    try {
      check();
    } catch (const Error& e) {
      out.push_back(std::string(section) + ": " + e.what());
    }
  };
  if (classes != 6 && classes != 12) out.push_back("classes must be 6 or 12");
  if (folds < 2) out.push_back("folds must be >= 2");
  if (per_class_cv_cap < 1) out.push_back("per_class_cv_cap must be >= 1");
  if (experiment.head.num_classes != classes) {
    out.push_back("head.num_classes (" + std::to_string(experiment.head.num_classes) +
                  ") must equal classes (" + std::to_string(classes) + ")");
  }
  if (experiment.head.hidden_nodes < 1) out.push_back("head.hidden_nodes must be >= 1");
  if (!(experiment.head.dropout_rate >= 0.0 && experiment.head.dropout_rate < 1.0)) {
    out.push_back("head.dropout_rate must be in [0, 1)");
  }
  collect("train", [&] { experiment.train.validate(); });
  collect("augmentation", [&] { experiment.augmentation.validate(); });
  collect("embed", [&] { embed.validate(); });
  if (saliency.baseline == BaselineKind::Custom && saliency_baseline_path.empty()) {
    out.push_back("saliency: custom baseline needs saliency_baseline_path");
  }
  {
    SaliencyConfig s = saliency;
    if (s.baseline == BaselineKind::Custom) s.baseline = BaselineKind::Black;
    collect("saliency", [&] { s.validate(); });
  }
  if (!(bootstrap.level > 0.0 && bootstrap.level < 1.0)) out.push_back("bootstrap.level must be in (0, 1)");
  if (bootstrap.n_boot < 1) out.push_back("bootstrap.n_boot must be >= 1");
  if (study.per_class_count < 1) out.push_back("study.per_class_count must be >= 1");
  if (study.reader_count < 1) out.push_back("study.reader_count must be >= 1");
  return out;
}

void RunConfig::validate() const {
  const auto problems = violations();
  if (problems.empty()) return;
  std::string msg = std::to_string(problems.size()) + " config violation(s): ";
  for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
  throw Error(ErrorKind::Configuration, msg);
}

namespace {

json to_json(const RunConfig& c) {
  const auto& e = c.experiment;
  return json{
      {"format", "vasc-run-config"},
      {"version", 1},
      {"manifest", c.manifest},
      {"output_dir", c.output_dir},
      {"classes", c.classes},
      {"folds", c.folds},
      {"per_class_cv_cap", c.per_class_cv_cap},
      {"seed", c.seed},
      {"threads", c.threads},
      {"backbone", {{"name", e.backbone.name},
                    {"feature_dim", e.backbone.feature_dim},
                    {"input_size", e.backbone.input_size},
                    {"seed", e.backbone.seed}}},
      {"head", {{"hidden_nodes", e.head.hidden_nodes},
                {"activation", e.head.activation},
                {"dropout_rate", e.head.dropout_rate},
                {"num_classes", e.head.num_classes}}},
      {"train", {{"optimizer", e.train.optimizer},
                 {"learning_rate", e.train.learning_rate},
                 {"rho", e.train.rho},
                 {"epsilon", e.train.epsilon},
                 {"loss", e.train.loss},
                 {"epochs", e.train.epochs},
                 {"batch_size", e.train.batch_size},
                 {"patience", e.train.patience},
                 {"backbone_policy", to_string(e.train.backbone_policy)},
                 {"seed", e.train.seed}}},
      {"augmentation", {{"target_per_class", e.augmentation.target_per_class},
                        {"rotation_min_degrees", e.augmentation.rotation_min_degrees},
                        {"rotation_max_degrees", e.augmentation.rotation_max_degrees},
                        {"hflip_prob", e.augmentation.hflip_prob},
                        {"vflip_prob", e.augmentation.vflip_prob},
                        {"shear_intensity_max", e.augmentation.shear_intensity_max},
                        {"zoom_min", e.augmentation.zoom_min},
                        {"zoom_max", e.augmentation.zoom_max},
                        {"output_size", e.augmentation.output_size},
                        {"seed", e.augmentation.seed}}},
      {"augment_validation", e.augment_validation},
      {"init_seed", e.init_seed},
      {"bootstrap", {{"level", c.bootstrap.level},
                     {"n_boot", c.bootstrap.n_boot},
                     {"seed", c.bootstrap.seed}}},
      {"embed", {{"perplexity", c.embed.perplexity},
                 {"iterations", c.embed.iterations},
                 {"theta", c.embed.theta},
                 {"seed", c.embed.seed},
                 {"learning_rate", c.embed.learning_rate},
                 {"early_exaggeration", c.embed.early_exaggeration},
                 {"exaggeration_iterations", c.embed.exaggeration_iterations},
                 {"max_points", c.embed.max_points}}},
      {"saliency", {{"baseline", to_string(c.saliency.baseline)},
                    {"baseline_path", c.saliency_baseline_path},
                    {"ig_steps", c.saliency.ig_steps},
                    {"smoothgrad_samples", c.saliency.smoothgrad_samples},
                    {"smoothgrad_noise_sigma", c.saliency.smoothgrad_noise_sigma},
                    {"target", c.saliency.target ? json(*c.saliency.target) : json(nullptr)},
                    {"seed", c.saliency.seed}}},
      {"study", {{"per_class_count", c.study.per_class_count},
                 {"reader_count", c.study.reader_count},
                 {"show_probability", c.study.show_probability},
                 {"seed", c.study.seed}}},
  };
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void check_keys(const json& given, const json& canonical, const std::string& prefix,
                std::vector<std::string>& problems) {
  for (const auto& [key, value] : given.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!canonical.contains(key)) {
      problems.push_back("unknown key '" + path + "'");
      continue;
    }
    const json& expected = canonical.at(key);
    if (expected.is_object()) {
      if (!value.is_object()) {
        problems.push_back("'" + path + "' must be an object");
      } else {
        check_keys(value, expected, path, problems);
      }
    } else if (!expected.is_null() && !same_kind(value, expected)) {
      problems.push_back("'" + path + "' has the wrong type (expected " +
                         std::string(expected.type_name()) + ")");
    }
  }
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2); }

RunConfig run_config_from_json(const std::string& text) {
  json given;
  try {
    given = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Configuration, std::string("run config is not valid JSON: ") + e.what());
  }
  if (!given.is_object()) throw Error(ErrorKind::Configuration, "run config must be a JSON object");
  std::uint64_t seed = 2024;
  if (given.contains("seed") && given["seed"].is_number_unsigned()) seed = given["seed"];
  json merged = to_json(RunConfig::with_seed(seed));

  std::vector<std::string> problems;
  check_keys(given, merged, "", problems);
  if (!problems.empty()) {
    std::string msg = std::to_string(problems.size()) + " config violation(s): ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw Error(ErrorKind::Configuration, msg);
  }
  merged.merge_patch(given);
  // The head follows the class count unless it is pinned explicitly.
  const bool head_pinned = given.contains("head") && given["head"].is_object() && given["head"].contains("num_classes");
  if (!head_pinned && merged["classes"].is_number_integer()) merged["head"]["num_classes"] = merged["classes"];

  RunConfig c;
  try {
    const json& m = merged;
    c.manifest = m["manifest"];
    c.output_dir = m["output_dir"];
    c.classes = m["classes"];
    c.folds = m["folds"];
    c.per_class_cv_cap = m["per_class_cv_cap"];
    c.seed = m["seed"];
    c.threads = m["threads"];
    auto& e = c.experiment;
    const json& b = m["backbone"];
    e.backbone.name = b["name"];
    e.backbone.feature_dim = b["feature_dim"];
    e.backbone.input_size = b["input_size"];
    e.backbone.seed = b["seed"];
    const json& h = m["head"];
    e.head.hidden_nodes = h["hidden_nodes"];
    e.head.activation = h["activation"];
    e.head.dropout_rate = h["dropout_rate"];
    e.head.num_classes = h["num_classes"];
    const json& t = m["train"];
    e.train.optimizer = t["optimizer"];
    e.train.learning_rate = t["learning_rate"];
    e.train.rho = t["rho"];
    e.train.epsilon = t["epsilon"];
    e.train.loss = t["loss"];
    e.train.epochs = t["epochs"];
    e.train.batch_size = t["batch_size"];
    e.train.patience = t["patience"];
    e.train.backbone_policy = backbone_policy_from_string(t["backbone_policy"]);
    e.train.seed = t["seed"];
    e.train.threads = c.threads;
    const json& a = m["augmentation"];
    e.augmentation.target_per_class = a["target_per_class"];
    e.augmentation.rotation_min_degrees = a["rotation_min_degrees"];
    e.augmentation.rotation_max_degrees = a["rotation_max_degrees"];
    e.augmentation.hflip_prob = a["hflip_prob"];
    e.augmentation.vflip_prob = a["vflip_prob"];
    e.augmentation.shear_intensity_max = a["shear_intensity_max"];
    e.augmentation.zoom_min = a["zoom_min"];
    e.augmentation.zoom_max = a["zoom_max"];
    e.augmentation.output_size = a["output_size"];
    e.augmentation.seed = a["seed"];
    e.augment_validation = m["augment_validation"];
    e.init_seed = m["init_seed"];
    const json& bs = m["bootstrap"];
    c.bootstrap.level = bs["level"];
    c.bootstrap.n_boot = bs["n_boot"];
    c.bootstrap.seed = bs["seed"];
    const json& em = m["embed"];
    c.embed.perplexity = em["perplexity"];
    c.embed.iterations = em["iterations"];
    c.embed.theta = em["theta"];
    c.embed.seed = em["seed"];
    c.embed.learning_rate = em["learning_rate"];
    c.embed.early_exaggeration = em["early_exaggeration"];
    c.embed.exaggeration_iterations = em["exaggeration_iterations"];
    c.embed.max_points = em["max_points"];
    const json& s = m["saliency"];
    c.saliency.baseline = baseline_kind_from_string(s["baseline"]);
    c.saliency_baseline_path = s["baseline_path"];
    c.saliency.ig_steps = s["ig_steps"];
    c.saliency.smoothgrad_samples = s["smoothgrad_samples"];
    c.saliency.smoothgrad_noise_sigma = s["smoothgrad_noise_sigma"];
    // merge_patch drops null members, so an absent target means "predicted class".
    if (s.contains("target") && !s["target"].is_null()) c.saliency.target = s["target"].get<std::size_t>();
    c.saliency.seed = s["seed"];
    const json& st = m["study"];
    c.study.per_class_count = st["per_class_count"];
    c.study.reader_count = st["reader_count"];
    c.study.show_probability = st["show_probability"];
    c.study.seed = st["seed"];
  } catch (const json::exception& ex) {
    throw Error(ErrorKind::Configuration, std::string("run config field error: ") + ex.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read run config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return run_config_from_json(buf.str());
}

}  // namespace vasc
