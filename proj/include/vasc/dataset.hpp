#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vasc/taxonomy.hpp"

namespace vasc {

struct ImageRecord {
  std::string image_id;
  std::string file_path;  // relative to the manifest's directory
  std::string class_id;
  std::string lesion_group_id;
  std::string source;
  int width = 0;
  int height = 0;

  bool operator==(const ImageRecord&) const = default;
};

/// Image inventory labeled under one taxonomy version.
struct Manifest {
  std::string taxonomy_version;
  std::vector<ImageRecord> records;

  /// Checksum over the records sorted by image_id, hex-encoded FNV-1a 64.
  std::string content_digest() const;

  std::size_t size() const { return records.size(); }
  std::set<std::string> group_ids() const;
  /// Records for one class, in manifest order.
  std::vector<ImageRecord> of_class(const std::string& class_id) const;
  /// Restricts to records whose lesion group is in `groups`.
  Manifest with_groups(const std::set<std::string>& groups) const;

  /// Validates id uniqueness, non-empty groups and class membership.
  void validate(const Taxonomy& taxonomy) const;
};

/// Line-oriented, tab-separated manifest file:
///   # vasc-manifest 1
///   # taxonomy_version=<v>
///   # content_digest=<hex>
///   image_id  file_path  class_id  lesion_group_id  source  width  height
///   <one record per line>
std::string manifest_to_text(const Manifest& manifest);
Manifest manifest_from_text(const std::string& text);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

inline const std::vector<std::string>& known_sources() {
  static const std::vector<std::string> sources{"clinical", "repoA", "repoB",
                                                "repoC",    "repoD", "repoE"};
  return sources;
}

/// File-name convention for lesion groups: `<group>__<view>.<ext>`. Files
/// without the separator form singleton groups named by their stem.
struct GroupingRule {
  std::string separator = "__";
  std::string group_of(const std::string& stem) const;
};

/// Identifier conventions shared by ingestion and the surrogate generator.
std::string make_image_id(const std::string& source, const std::string& raw_label,
                          const std::string& stem);
std::string make_group_id(const std::string& source, const std::string& group);

struct SourceRoot {
  std::string source;
  std::filesystem::path directory;  // contains one sub-directory per raw label
};

struct IngestResult {
  Manifest manifest;
  std::vector<std::string> warnings;
};

/// Scans `<root>/<raw label>/<file>` for every root. Paths in the result are
/// relative to `base_dir`. Throws Error{EmptyManifest} if nothing decodes.
IngestResult ingest_sources(const std::vector<SourceRoot>& roots, const Taxonomy& taxonomy,
                            const GroupingRule& rule, const std::filesystem::path& base_dir,
                            int threads = 0);

struct SplitPlan {
  int fold_count = 10;
  std::map<std::string, int> fold_assignments;  // lesion_group_id -> fold
  std::set<std::string> test_group_ids;
  int per_class_cv_cap = 1000;
  std::uint64_t seed = 0;

  bool operator==(const SplitPlan&) const = default;
};

std::string split_plan_to_json(const SplitPlan& plan);
SplitPlan split_plan_from_json(const std::string& text);

struct HoldoutResult {
  Manifest cv;
  Manifest test;
  std::set<std::string> test_group_ids;
};

/// Carves the held-out test split by whole lesion groups: classes above the
/// cap keep `cap` originals for cross-validation; smaller classes withhold
/// the achievable group total nearest 10% (ties resolved upward).
HoldoutResult make_test_holdout(const Manifest& manifest, const Taxonomy& taxonomy6,
                                std::uint64_t seed, int per_class_cv_cap = 1000);

/// Assigns lesion groups to k folds, balancing per-class image counts.
SplitPlan make_grouped_folds(const Manifest& cv_manifest, int k, std::uint64_t seed);

struct FoldRecords {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> validation;
};

FoldRecords materialize_fold(const Manifest& manifest, const SplitPlan& plan, int fold_index);

}  // namespace vasc
