#include "vasc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vasc/error.hpp"
#include "vasc/hash.hpp"
#include "vasc/image.hpp"
#include "vasc/parallel.hpp"
#include "vasc/random.hpp"

namespace fs = std::filesystem;

namespace vasc {

namespace {

constexpr std::string_view kManifestMagic = "# vasc-manifest 1";
constexpr std::string_view kColumns =
    "image_id\tfile_path\tclass_id\tlesion_group_id\tsource\twidth\theight";

std::string record_line(const ImageRecord& r) {
  std::ostringstream out;
  out << r.image_id << '\t' << r.file_path << '\t' << r.class_id << '\t' << r.lesion_group_id
      << '\t' << r.source << '\t' << r.width << '\t' << r.height;
  return out.str();
}

void check_field(const std::string& value, const char* name) {
  if (value.find_first_of("\t\r\n") != std::string::npos) {
    throw Error(ErrorKind::Schema, std::string(name) + " contains a tab or newline: " + value);
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto end = line.find('\t', start);
    out.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

std::string slug(const std::string& label) {
  std::string out = normalize_label(label);
  std::replace(out.begin(), out.end(), ' ', '-');
  return out;
}

}  // namespace

// ---------------------------------------------------------------- Manifest

std::string Manifest::content_digest() const {
  std::vector<const ImageRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const ImageRecord* a, const ImageRecord* b) { return a->image_id < b->image_id; });
  Fnv1a64 hash;
  for (const auto* r : sorted) {
    hash.update(record_line(*r));
    hash.update("\n");
  }
  return hash.hex();
}

std::set<std::string> Manifest::group_ids() const {
  std::set<std::string> out;
  for (const auto& r : records) out.insert(r.lesion_group_id);
  return out;
}

std::vector<ImageRecord> Manifest::of_class(const std::string& class_id) const {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    if (r.class_id == class_id) out.push_back(r);
  }
  return out;
}

Manifest Manifest::with_groups(const std::set<std::string>& groups) const {
  Manifest out{taxonomy_version, {}};
  for (const auto& r : records) {
    if (groups.contains(r.lesion_group_id)) out.records.push_back(r);
  }
  return out;
}

void Manifest::validate(const Taxonomy& taxonomy) const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.image_id.empty() || !ids.insert(r.image_id).second) {
      throw Error(ErrorKind::Schema, "duplicate or empty image_id '" + r.image_id + "'");
    }
    if (r.lesion_group_id.empty()) {
      throw Error(ErrorKind::Schema, "record " + r.image_id + " has no lesion_group_id");
    }
    if (!taxonomy.index_of(r.class_id)) {
      throw Error(ErrorKind::Validation, "record " + r.image_id + " has class '" + r.class_id +
                                             "' outside taxonomy " + taxonomy.version());
    }
  }
}

std::string manifest_to_text(const Manifest& manifest) {
  std::ostringstream out;
  out << kManifestMagic << "\n# taxonomy_version=" << manifest.taxonomy_version
      << "\n# content_digest=" << manifest.content_digest() << "\n"
      << kColumns << "\n";
  for (const auto& r : manifest.records) {
    check_field(r.image_id, "image_id");
    check_field(r.file_path, "file_path");
    check_field(r.class_id, "class_id");
    check_field(r.lesion_group_id, "lesion_group_id");
    check_field(r.source, "source");
    out << record_line(r) << "\n";
  }
  return out.str();
}

Manifest manifest_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kManifestMagic) {
    throw Error(ErrorKind::Schema, "missing '# vasc-manifest 1' header");
  }
  Manifest manifest;
  std::string declared_digest;
  bool saw_columns = false;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.starts_with("# taxonomy_version=")) {
      manifest.taxonomy_version = line.substr(19);
      continue;
    }
    if (line.starts_with("# content_digest=")) {
      declared_digest = line.substr(17);
      continue;
    }
    if (line.front() == '#') continue;
    if (!saw_columns) {
      if (line != kColumns) {
        throw Error(ErrorKind::Schema, "unexpected manifest columns: " + line);
      }
      saw_columns = true;
      continue;
    }
    const auto f = split_tabs(line);
    if (f.size() != 7) {
      throw Error(ErrorKind::Schema, "manifest line " + std::to_string(line_no) + " has " +
                                         std::to_string(f.size()) + " fields, expected 7");
    }
    ImageRecord r{f[0], f[1], f[2], f[3], f[4], 0, 0};
    try {
      r.width = std::stoi(f[5]);
      r.height = std::stoi(f[6]);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Schema, "manifest line " + std::to_string(line_no) +
                                         ": width/height must be integers");
    }
    manifest.records.push_back(std::move(r));
  }
  if (!saw_columns) throw Error(ErrorKind::Schema, "manifest has no column header");
  if (!declared_digest.empty() && declared_digest != manifest.content_digest()) {
    throw Error(ErrorKind::Schema, "manifest content_digest does not match its records");
  }
  return manifest;
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << manifest_to_text(manifest);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest " + path.string());
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read manifest " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return manifest_from_text(buffer.str());
}

// ---------------------------------------------------------------- ingest

std::string make_image_id(const std::string& source, const std::string& raw_label,
                          const std::string& stem) {
  return source + "/" + slug(raw_label) + "/" + stem;
}

std::string make_group_id(const std::string& source, const std::string& group) {
  return source + "/" + group;
}

std::string GroupingRule::group_of(const std::string& stem) const {
  const auto pos = stem.find(separator);
  if (pos == std::string::npos || pos == 0) return stem;
  return stem.substr(0, pos);
}

IngestResult ingest_sources(const std::vector<SourceRoot>& roots, const Taxonomy& taxonomy,
                            const GroupingRule& rule, const fs::path& base_dir, int threads) {
  struct Candidate {
    fs::path path;
    std::string source;
    std::string label_dir;
    std::string class_id;
  };
  IngestResult result;
  result.manifest.taxonomy_version = taxonomy.version();
  std::vector<Candidate> candidates;
  for (const auto& root : roots) {
    if (!fs::is_directory(root.directory)) {
      result.warnings.push_back(root.directory.string() + ": not a directory");
      continue;
    }
    std::vector<fs::path> label_dirs;
    for (const auto& entry : fs::directory_iterator(root.directory)) {
      if (entry.is_directory()) label_dirs.push_back(entry.path());
    }
    std::sort(label_dirs.begin(), label_dirs.end());
    for (const auto& dir : label_dirs) {
      const std::string label = dir.filename().string();
      std::string class_id;
      try {
        class_id = taxonomy.resolve_label(label);
      } catch (const Error&) {
        result.warnings.push_back(dir.string() + ": unmapped diagnosis label '" + label + "'");
        continue;
      }
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      for (auto& f : files) candidates.push_back({f, root.source, label, class_id});
    }
  }

  struct Decoded {
    bool ok = false;
    int width = 0;
    int height = 0;
    std::string error;
  };
  std::vector<Decoded> decoded(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    try {
      const Image img = read_pnm(candidates[i].path);
      decoded[i] = {true, img.width, img.height, {}};
    } catch (const std::exception& e) {
      decoded[i].error = e.what();
    }
  });

  std::set<std::string> seen;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!decoded[i].ok) {
      result.warnings.push_back(c.path.string() + ": " + decoded[i].error);
      continue;
    }
    const std::string stem = c.path.stem().string();
    ImageRecord r;
    r.image_id = make_image_id(c.source, c.label_dir, stem);
    r.file_path = fs::relative(c.path, base_dir).generic_string();
    r.class_id = c.class_id;
    r.lesion_group_id = make_group_id(c.source, rule.group_of(stem));
    r.source = c.source;
    r.width = decoded[i].width;
    r.height = decoded[i].height;
    if (!seen.insert(r.image_id).second) {
      result.warnings.push_back(c.path.string() + ": duplicate image id " + r.image_id);
      continue;
    }
    result.manifest.records.push_back(std::move(r));
  }
  if (result.manifest.records.empty()) {
    throw Error(ErrorKind::EmptyManifest, "no decodable images under the given roots");
  }
  return result;
}

// ---------------------------------------------------------------- split plan I/O

std::string split_plan_to_json(const SplitPlan& plan) {
  nlohmann::json j;
  j["format"] = "vasc-split-plan";
  j["version"] = 1;
  j["seed"] = plan.seed;
  j["fold_count"] = plan.fold_count;
  j["per_class_cv_cap"] = plan.per_class_cv_cap;
  j["fold_assignments"] = plan.fold_assignments;
  j["test_group_ids"] = plan.test_group_ids;
  return j.dump(2);
}

SplitPlan split_plan_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "vasc-split-plan") {
      throw Error(ErrorKind::Schema, "not a vasc split plan");
    }
    SplitPlan plan;
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.fold_count = j.at("fold_count").get<int>();
    plan.per_class_cv_cap = j.at("per_class_cv_cap").get<int>();
    plan.fold_assignments = j.at("fold_assignments").get<std::map<std::string, int>>();
    plan.test_group_ids = j.at("test_group_ids").get<std::set<std::string>>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Schema, std::string("split plan: ") + e.what());
  }
}

// ---------------------------------------------------------------- splitting

namespace {

struct Group {
  std::string id;
  int size = 0;
};

/// Lesion groups per class, each group verified to lie in a single class.
std::map<std::string, std::vector<Group>> groups_by_class(const Manifest& manifest) {
  std::map<std::string, std::string> group_class;
  std::map<std::string, int> group_size;
  for (const auto& r : manifest.records) {
    const auto [it, inserted] = group_class.emplace(r.lesion_group_id, r.class_id);
    if (!inserted && it->second != r.class_id) {
      throw Error(ErrorKind::Validation, "lesion group '" + r.lesion_group_id +
                                             "' spans classes '" + it->second + "' and '" +
                                             r.class_id + "'");
    }
    ++group_size[r.lesion_group_id];
  }
  std::map<std::string, std::vector<Group>> out;
  for (const auto& [gid, cls] : group_class) out[cls].push_back({gid, group_size[gid]});
  return out;
}

/// Chooses groups whose total is nearest `target` (ties toward the larger
/// total), using at least one group and leaving at least one behind.
std::vector<std::size_t> nearest_subset(const std::vector<Group>& groups, double target) {
  int total = 0;
  for (const auto& g : groups) total += g.size;
  // reach[s] = index of the group that first reached sum s, or -1.
  std::vector<int> reach(static_cast<std::size_t>(total) + 1, -1);
  std::vector<int> prev(static_cast<std::size_t>(total) + 1, -1);
  std::vector<char> reachable(static_cast<std::size_t>(total) + 1, 0);
  reachable[0] = 1;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const int sz = groups[gi].size;
    for (int s = total; s >= sz; --s) {
      if (!reachable[s] && reachable[s - sz]) {
        reachable[s] = 1;
        reach[s] = static_cast<int>(gi);
        prev[s] = s - sz;
      }
    }
  }
  int best = -1;
  double best_dist = 0.0;
  for (int s = 1; s < total; ++s) {
    if (!reachable[s]) continue;
    const double dist = std::abs(s - target);
    const bool better = best < 0 || dist < best_dist - 1e-9 ||
                        (std::abs(dist - best_dist) <= 1e-9 && s >= target && best < target);
    if (better) {
      best = s;
      best_dist = dist;
    }
  }
  std::vector<std::size_t> chosen;
  for (int s = best; s > 0; s = prev[s]) chosen.push_back(static_cast<std::size_t>(reach[s]));
  return chosen;
}

}  // namespace

HoldoutResult make_test_holdout(const Manifest& manifest, const Taxonomy& taxonomy6,
                                std::uint64_t seed, int per_class_cv_cap) {
  if (taxonomy6.empty()) {
    throw Error(ErrorKind::Validation, "holdout needs a non-empty taxonomy");
  }
  for (const auto& r : manifest.records) {
    if (!taxonomy6.index_of(r.class_id)) {
      throw Error(ErrorKind::Validation, "record " + r.image_id + " has class '" + r.class_id +
                                             "' outside " + taxonomy6.version());
    }
  }
  auto by_class = groups_by_class(manifest);
  HoldoutResult result;
  std::set<std::string> cv_groups;
  for (std::size_t ci = 0; ci < taxonomy6.size(); ++ci) {
    const auto& cls = taxonomy6[ci].class_id;
    auto it = by_class.find(cls);
    if (it == by_class.end()) {
      throw Error(ErrorKind::Validation, "class '" + cls + "' has no images");
    }
    auto groups = it->second;
    if (groups.size() < 2) {
      throw Error(ErrorKind::CannotSplit,
                  "class '" + cls + "' has a single lesion group and cannot be split");
    }
    Rng rng(derive_seed(seed, ci));
    rng.shuffle(groups.begin(), groups.end());
    int total = 0;
    for (const auto& g : groups) total += g.size;

    if (total > per_class_cv_cap) {
      int taken = 0;
      for (const auto& g : groups) {
        if (taken + g.size <= per_class_cv_cap) {
          taken += g.size;
          cv_groups.insert(g.id);
        } else {
          result.test_group_ids.insert(g.id);
        }
      }
    } else {
      const auto chosen = nearest_subset(groups, 0.1 * total);
      std::set<std::size_t> chosen_set(chosen.begin(), chosen.end());
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        (chosen_set.contains(gi) ? result.test_group_ids : cv_groups).insert(groups[gi].id);
      }
    }
  }
  result.cv = manifest.with_groups(cv_groups);
  result.test = manifest.with_groups(result.test_group_ids);
  return result;
}

SplitPlan make_grouped_folds(const Manifest& cv_manifest, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::InfeasibleFold, "fold count must be at least 2");
  const auto by_class = groups_by_class(cv_manifest);
  if (by_class.empty()) throw Error(ErrorKind::EmptyManifest, "no records to split");
  SplitPlan plan;
  plan.fold_count = k;
  plan.seed = seed;
  std::size_t ci = 0;
  for (const auto& [cls, class_groups] : by_class) {
    if (static_cast<int>(class_groups.size()) < k) {
      throw Error(ErrorKind::InfeasibleFold,
                  "class '" + cls + "' has " + std::to_string(class_groups.size()) +
                      " lesion groups, fewer than " + std::to_string(k) + " folds");
    }
    auto groups = class_groups;
    Rng rng(derive_seed(seed, ci));
    rng.shuffle(groups.begin(), groups.end());
    std::stable_sort(groups.begin(), groups.end(),
                     [](const Group& a, const Group& b) { return a.size > b.size; });
    std::vector<int> load(static_cast<std::size_t>(k), 0);
    const int offset = static_cast<int>(ci % static_cast<std::size_t>(k));
    for (const auto& g : groups) {
      int best = -1;
      for (int j = 0; j < k; ++j) {
        const int f = (offset + j) % k;
        if (best < 0 || load[f] < load[best]) best = f;
      }
      load[best] += g.size;
      plan.fold_assignments[g.id] = best;
    }
    ++ci;
  }
  return plan;
}

FoldRecords materialize_fold(const Manifest& manifest, const SplitPlan& plan, int fold_index) {
  if (fold_index < 0 || fold_index >= plan.fold_count) {
    throw Error(ErrorKind::Range, "fold " + std::to_string(fold_index) + " outside [0, " +
                                      std::to_string(plan.fold_count) + ")");
  }
  FoldRecords out;
  for (const auto& r : manifest.records) {
    if (plan.test_group_ids.contains(r.lesion_group_id)) continue;
    const auto it = plan.fold_assignments.find(r.lesion_group_id);
    if (it == plan.fold_assignments.end()) {
      throw Error(ErrorKind::Validation,
                  "lesion group '" + r.lesion_group_id + "' is not assigned to any fold");
    }
    (it->second == fold_index ? out.validation : out.train).push_back(r);
  }
  return out;
}

}  // namespace vasc
