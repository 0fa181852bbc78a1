#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace vasc {

struct LesionClass {
  std::string class_id;
  std::string display_name;
  std::vector<std::string> merged_subtypes;
  bool in_six_subset = false;
  std::vector<std::string> expected_sources;

  bool operator==(const LesionClass&) const = default;
};

/// Ordered label space. Class order fixes the index layout of every
/// probability vector and confusion matrix built against it.
class Taxonomy {
 public:
  Taxonomy() = default;

  /// Validates invariants (unique ids, unambiguous subtypes). Throws
  /// Error{Schema} or Error{Ambiguity}.
  Taxonomy(std::string version, std::vector<LesionClass> classes);

  const std::string& version() const { return version_; }
  const std::vector<LesionClass>& classes() const { return classes_; }
  std::size_t size() const { return classes_.size(); }
  bool empty() const { return classes_.empty(); }

  const LesionClass& operator[](std::size_t i) const { return classes_[i]; }

  std::optional<std::size_t> index_of(std::string_view class_id) const;
  /// Like index_of but throws Error{Validation} for an unknown id.
  std::size_t require_index(std::string_view class_id) const;
  std::vector<std::string> class_ids() const;

  /// Maps a raw diagnosis label onto its class id (case-insensitive, NFC,
  /// whitespace collapsed). Throws Error{UnmappedLabel}.
  const std::string& resolve_label(std::string_view raw_label) const;

  /// The classes flagged in_six_subset, in their original relative order.
  Taxonomy subset_six() const;

  /// Serializes to the definition-file format accepted by parse_taxonomy.
  std::string to_text() const;

  bool operator==(const Taxonomy& other) const {
    return version_ == other.version_ && classes_ == other.classes_;
  }

 private:
  std::string version_;
  std::vector<LesionClass> classes_;
  std::map<std::string, std::size_t, std::less<>> label_index_;
};

/// NFC + case fold + whitespace collapse + trim.
std::string normalize_label(std::string_view raw);

Taxonomy parse_taxonomy(std::string_view text);
Taxonomy load_taxonomy(const std::filesystem::path& definition_file);

/// The bundled 12-class definition (6 flagged for the data-abundant subset).
std::string_view default_taxonomy_text();
Taxonomy default_taxonomy();

}  // namespace vasc
