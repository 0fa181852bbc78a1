#include "vasc/taxonomy.hpp"

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <fstream>
#include <set>
#include <sstream>

#include "vasc/error.hpp"

namespace vasc {

#include "taxonomy_default.inc"

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view value) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    const auto end = value.find(';', start);
    const auto piece = trim(value.substr(start, end == std::string_view::npos
                                                    ? std::string_view::npos
                                                    : end - start));
    if (!piece.empty()) out.push_back(piece);
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += "; ";
    out += items[i];
  }
  return out;
}

bool parse_bool(const std::string& value, int line) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw Error(ErrorKind::Schema,
              "line " + std::to_string(line) + ": expected boolean, got '" + value + "'");
}

}  // namespace

std::string normalize_label(std::string_view raw) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) {
    throw Error(ErrorKind::Configuration, "ICU NFC normalizer unavailable");
  }
  icu::UnicodeString text = icu::UnicodeString::fromUTF8(
      icu::StringPiece(raw.data(), static_cast<int32_t>(raw.size())));
  text.foldCase();
  icu::UnicodeString normalized = nfc->normalize(text, status);
  if (U_FAILURE(status)) {
    throw Error(ErrorKind::Validation, "label is not valid text");
  }
  icu::UnicodeString collapsed;
  bool pending_space = false;
  for (int32_t i = 0; i < normalized.length();) {
    const UChar32 cp = normalized.char32At(i);
    i += U16_LENGTH(cp);
    if (u_isUWhiteSpace(cp)) {
      pending_space = !collapsed.isEmpty();
      continue;
    }
    if (pending_space) {
      collapsed.append(static_cast<UChar>(' '));
      pending_space = false;
    }
    collapsed.append(cp);
  }
  std::string out;
  collapsed.toUTF8String(out);
  return out;
}

Taxonomy::Taxonomy(std::string version, std::vector<LesionClass> classes)
    : version_(std::move(version)), classes_(std::move(classes)) {
  std::set<std::string, std::less<>> ids;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    const auto& cls = classes_[i];
    if (cls.class_id.empty()) {
      throw Error(ErrorKind::Schema, "class with empty class_id");
    }
    if (!ids.insert(cls.class_id).second) {
      throw Error(ErrorKind::Schema, "duplicate class_id '" + cls.class_id + "'");
    }
    for (const auto& subtype : cls.merged_subtypes) {
      const auto key = normalize_label(subtype);
      const auto [it, inserted] = label_index_.emplace(key, i);
      if (!inserted && it->second != i) {
        throw Error(ErrorKind::Ambiguity,
                    "label '" + subtype + "' maps to both '" +
                        classes_[it->second].class_id + "' and '" + cls.class_id + "'");
      }
    }
  }
}

std::optional<std::size_t> Taxonomy::index_of(std::string_view class_id) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].class_id == class_id) return i;
  }
  return std::nullopt;
}

std::size_t Taxonomy::require_index(std::string_view class_id) const {
  if (auto idx = index_of(class_id)) return *idx;
  throw Error(ErrorKind::Validation, "class '" + std::string(class_id) +
                                         "' is not in taxonomy " + version_);
}

std::vector<std::string> Taxonomy::class_ids() const {
  std::vector<std::string> ids;
  ids.reserve(classes_.size());
  for (const auto& cls : classes_) ids.push_back(cls.class_id);
  return ids;
}

const std::string& Taxonomy::resolve_label(std::string_view raw_label) const {
  const auto key = normalize_label(raw_label);
  if (key.empty()) {
    throw Error(ErrorKind::Validation, "empty diagnosis label");
  }
  const auto it = label_index_.find(key);
  if (it == label_index_.end()) {
    throw Error(ErrorKind::UnmappedLabel, std::string(raw_label));
  }
  return classes_[it->second].class_id;
}

Taxonomy Taxonomy::subset_six() const {
  std::vector<LesionClass> kept;
  for (const auto& cls : classes_) {
    if (cls.in_six_subset) kept.push_back(cls);
  }
  constexpr std::string_view suffix = "/six";
  std::string version = version_;
  if (!version.ends_with(suffix)) version += suffix;
  return Taxonomy(std::move(version), std::move(kept));
}

std::string Taxonomy::to_text() const {
  std::ostringstream out;
  out << "version = " << version_ << "\n";
  for (const auto& cls : classes_) {
    out << "\n[class " << cls.class_id << "]\n"
        << "display_name = " << cls.display_name << "\n"
        << "subtypes = " << join_list(cls.merged_subtypes) << "\n"
        << "six_subset = " << (cls.in_six_subset ? "true" : "false") << "\n"
        << "sources = " << join_list(cls.expected_sources) << "\n";
  }
  return out.str();
}

Taxonomy parse_taxonomy(std::string_view text) {
  std::string version;
  std::vector<LesionClass> classes;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || !line.starts_with("[class ")) {
        throw Error(ErrorKind::Schema,
                    "line " + std::to_string(line_no) + ": expected [class <id>]");
      }
      LesionClass cls;
      cls.class_id = trim(std::string_view(line).substr(7, line.size() - 8));
      cls.display_name = cls.class_id;
      classes.push_back(std::move(cls));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::Schema,
                  "line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(std::string_view(line).substr(0, eq));
    const auto value = trim(std::string_view(line).substr(eq + 1));
    if (classes.empty()) {
      if (key != "version") {
        throw Error(ErrorKind::Schema, "line " + std::to_string(line_no) +
                                           ": unknown top-level key '" + key + "'");
      }
      version = value;
      continue;
    }
    auto& cls = classes.back();
    if (key == "display_name") {
      cls.display_name = value;
    } else if (key == "subtypes") {
      cls.merged_subtypes = split_list(value);
    } else if (key == "six_subset") {
      cls.in_six_subset = parse_bool(value, line_no);
    } else if (key == "sources") {
      cls.expected_sources = split_list(value);
    } else {
      throw Error(ErrorKind::Schema, "line " + std::to_string(line_no) +
                                         ": unknown class key '" + key + "'");
    }
  }
  if (version.empty()) {
    throw Error(ErrorKind::Schema, "taxonomy definition has no version");
  }
  return Taxonomy(std::move(version), std::move(classes));
}

Taxonomy load_taxonomy(const std::filesystem::path& definition_file) {
  std::ifstream in(definition_file);
  if (!in) {
    throw Error(ErrorKind::Io, "cannot read taxonomy " + definition_file.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_taxonomy(buffer.str());
}

std::string_view default_taxonomy_text() { return kDefaultTaxonomy; }

Taxonomy default_taxonomy() { return parse_taxonomy(kDefaultTaxonomy); }

}  // namespace vasc
