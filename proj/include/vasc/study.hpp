#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vasc/dataset.hpp"
#include "vasc/metrics.hpp"
#include "vasc/model.hpp"
#include "vasc/taxonomy.hpp"

namespace vasc {

struct StudyDesign {
  int per_class_count = 10;
  int reader_count = 7;
  std::uint64_t seed = 60;
  /// Pass-2 views carry the predicted class; this also shows its probability.
  bool show_probability = true;

  std::size_t item_count(std::size_t classes) const {
    return static_cast<std::size_t>(per_class_count) * classes;
  }
};

/// One study image. Everything except item_id and the prediction stays on
/// the server.
struct StudyItem {
  std::string item_id;  // opaque, carries no class information
  std::string image_id;
  std::string file_path;
  std::string true_class_id;
  std::string predicted_class_id;
  double predicted_probability = 0.0;

  bool operator==(const StudyItem&) const = default;
};

/// Samples per_class_count test images per class without replacement and
/// attaches the classifier's prediction for each. `eligible` (when given)
/// restricts the pool to images marked clear and visible.
/// Error{Shortfall} names the first class without enough images.
std::vector<StudyItem> draw_study_items(const StudyDesign& design, const Manifest& test_manifest,
                                        std::span<const PredictionRecord> predictions,
                                        const Taxonomy& taxonomy,
                                        const std::set<std::string>* eligible = nullptr);

std::string study_items_to_json(std::span<const StudyItem> items);
std::vector<StudyItem> study_items_from_json(const std::string& text);

enum class SessionState { Pass1Active, Pass2Active, Complete };
std::string to_string(SessionState state);

struct ReaderResponse {
  std::string session_id;
  int pass = 1;
  std::string item_id;
  std::string chosen_class_id;
  std::string response_time;  // UTC, ISO 8601 with milliseconds

  bool operator==(const ReaderResponse&) const = default;
};

struct StudySession {
  std::string session_id;
  std::string reader_id;
  std::uint64_t seed = 0;
  std::vector<std::string> pass1_order;
  std::vector<std::string> pass2_order;
  std::vector<ReaderResponse> responses;

  std::size_t total() const { return pass1_order.size() + pass2_order.size(); }
  SessionState state() const;
  /// Pass and position of the next item to serve; nullopt once complete.
  std::optional<std::pair<int, std::size_t>> cursor() const;
};

/// Two seeded permutations of the item ids. pass2_order is redrawn from
/// further streams until it differs from pass1_order (unless there is only
/// one item).
StudySession create_session(const std::string& reader_id, std::span<const StudyItem> items,
                            std::uint64_t seed);

/// What a reader's client may see for one item.
struct ItemView {
  std::string session_id;
  std::string item_id;
  int pass = 1;
  std::size_t answered = 0;
  std::size_t total = 0;
  std::optional<std::string> predicted_class_id;
  std::optional<std::string> predicted_display_name;
  std::optional<double> predicted_probability;
};

struct Ack {
  std::string session_id;
  std::string item_id;
  int pass = 1;
  std::size_t answered = 0;
  std::size_t total = 0;
  SessionState state = SessionState::Pass1Active;
};

struct SessionStatus {
  std::string session_id;
  std::string reader_id;
  SessionState state = SessionState::Pass1Active;
  std::size_t answered = 0;
  std::size_t total = 0;
};

struct ReaderReport {
  std::string reader_id;
  std::string session_id;
  ConfusionMatrix pass1;
  ConfusionMatrix pass2;
};

struct ClassComparison {
  std::string class_id;
  double unaided_accuracy = 0.0;
  double aided_accuracy = 0.0;
  double classifier_accuracy = 0.0;
  bool aided_exceeds_classifier = false;
};

struct StudyReport {
  std::vector<std::string> class_ids;
  std::vector<ReaderReport> readers;
  ConfusionMatrix pooled_pass1;
  ConfusionMatrix pooled_pass2;
  ConfusionMatrix classifier;
  std::vector<ClassComparison> per_class;
};

/// Error{IncompleteSession} listing every session that has not finished.
StudyReport compute_study_report(std::span<const StudySession> sessions,
                                 std::span<const StudyItem> items, const Taxonomy& taxonomy);

std::string study_report_to_json(const StudyReport& report, const Taxonomy& taxonomy);
std::string format_study_report(const StudyReport& report, const Taxonomy& taxonomy);
std::string view_to_json(const ItemView& view);
std::string ack_to_json(const Ack& ack);
std::string status_to_json(const SessionStatus& status);

/// Thread-safe owner of the item list and all sessions. Every session is an
/// append-only JSONL log under `log_dir`; constructing a service over an
/// existing directory replays those logs, so a restart resumes each reader at
/// the item after their last durable response.
class StudyService {
 public:
  StudyService(StudyDesign design, std::vector<StudyItem> items, Taxonomy taxonomy,
               std::filesystem::path log_dir);

  const StudyDesign& design() const { return design_; }
  const Taxonomy& taxonomy() const { return taxonomy_; }
  const std::vector<StudyItem>& items() const { return items_; }

  /// Error{Conflict} if the reader already has a session.
  SessionStatus create_session(const std::string& reader_id);
  /// Error{NotFound} for an unknown session; Error{NoMoreItems} once complete.
  ItemView next_item(const std::string& session_id) const;
  /// Persists before returning. Error{Sequencing} if item_id is not the item
  /// currently served, Error{Idempotency} if it was already answered in this
  /// pass, Error{Validation} for a class outside the taxonomy.
  Ack submit_response(const std::string& session_id, const std::string& item_id,
                      const std::string& chosen_class_id);
  SessionStatus status(const std::string& session_id) const;
  std::vector<SessionStatus> sessions() const;
  std::vector<StudySession> snapshot() const;
  StudyReport report() const;

  /// Image file for an opaque item id (relative to the manifest directory).
  std::string item_file(const std::string& item_id) const;

 private:
  const StudySession& find(const std::string& session_id) const;
  void append_log(const std::string& session_id, const std::string& line) const;
  void replay();

  StudyDesign design_;
  std::vector<StudyItem> items_;
  std::map<std::string, std::size_t> item_index_;
  Taxonomy taxonomy_;
  std::filesystem::path log_dir_;
  mutable std::mutex mutex_;
  std::map<std::string, StudySession> sessions_;
  std::map<std::string, std::string> reader_sessions_;
};

}  // namespace vasc
