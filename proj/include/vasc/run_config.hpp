#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vasc/interpret.hpp"
#include "vasc/metrics.hpp"
#include "vasc/pipeline.hpp"
#include "vasc/study.hpp"

namespace vasc {

/// Everything needed to reproduce a run besides the manifest itself.
struct RunConfig {
  std::string manifest;
  std::string output_dir;
  int classes = 12;  // 6 selects the flagged subset
  int folds = 10;
  int per_class_cv_cap = 1000;
  std::uint64_t seed = 2024;
  int threads = 0;
  ExperimentConfig experiment;
  BootstrapOptions bootstrap;
  EmbedConfig embed;
  SaliencyConfig saliency;  // custom baselines are referenced by path
  std::string saliency_baseline_path;
  StudyDesign study;

  /// Defaults with every component seed derived from `seed`.
  static RunConfig with_seed(std::uint64_t seed);

  /// All violations, empty when the config is usable.
  std::vector<std::string> violations() const;
  /// Error{Configuration} listing every violation.
  void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);
/// Starts from RunConfig::with_seed(seed in the file, or the default) and
/// overrides the keys present. Unknown keys and type errors are reported
/// together as one Error{Configuration}.
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace vasc
