#include "vasc/study.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vasc/error.hpp"
#include "vasc/hash.hpp"
#include "vasc/random.hpp"

namespace vasc {

using json = nlohmann::json;

namespace {

std::uint64_t text_hash(std::string_view text) {
  Fnv1a64 h;
  h.update(text);
  return h.value();
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- items

std::vector<StudyItem> draw_study_items(const StudyDesign& design, const Manifest& test_manifest,
                                        std::span<const PredictionRecord> predictions,
                                        const Taxonomy& taxonomy,
                                        const std::set<std::string>* eligible) {
  if (design.per_class_count < 1) throw Error(ErrorKind::Parameter, "per_class_count must be >= 1");
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : predictions) {
    if (p.probabilities.size() != taxonomy.size()) {
      throw Error(ErrorKind::Shape, "prediction for " + p.image_id + " does not match the taxonomy");
    }
    by_id[p.image_id] = &p;
  }

  std::vector<StudyItem> items;
  for (std::size_t k = 0; k < taxonomy.size(); ++k) {
    const auto& cls = taxonomy[k].class_id;
    std::vector<ImageRecord> pool;
    for (const auto& r : test_manifest.records) {
      if (r.class_id == cls && (!eligible || eligible->count(r.image_id))) pool.push_back(r);
    }
    std::sort(pool.begin(), pool.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
    const auto need = static_cast<std::size_t>(design.per_class_count);
    if (pool.size() < need) {
      throw Error(ErrorKind::Shortfall, "class " + cls + " has " + std::to_string(pool.size()) +
                                            " eligible test images, needs " + std::to_string(need) +
                                            " (short by " + std::to_string(need - pool.size()) + ")");
    }
    Rng rng(derive_seed(design.seed, k));
    rng.shuffle(pool.begin(), pool.end());
    for (std::size_t i = 0; i < need; ++i) {
      const auto it = by_id.find(pool[i].image_id);
      if (it == by_id.end()) {
        throw Error(ErrorKind::Validation, "no classifier prediction for " + pool[i].image_id);
      }
      const auto& probs = it->second->probabilities;
      const std::size_t best = it->second->predicted_index();
      items.push_back({"", pool[i].image_id, pool[i].file_path, cls, taxonomy[best].class_id,
                       probs[best]});
    }
  }
  // Opaque ids are handed out after a global shuffle so neither id nor
  // position reveals the class.
  Rng rng(derive_seed(design.seed, taxonomy.size() + 1));
  rng.shuffle(items.begin(), items.end());
  for (std::size_t i = 0; i < items.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "it-%03zu", i + 1);
    items[i].item_id = buf;
  }
  return items;
}

std::string study_items_to_json(std::span<const StudyItem> items) {
  json j = json::array();
  for (const auto& it : items) {
    j.push_back({{"item_id", it.item_id},
                 {"image_id", it.image_id},
                 {"file_path", it.file_path},
                 {"true_class_id", it.true_class_id},
                 {"predicted_class_id", it.predicted_class_id},
                 {"predicted_probability", it.predicted_probability}});
  }
  return json{{"format", "vasc-study-items"}, {"version", 1}, {"items", j}}.dump(2);
}

std::vector<StudyItem> study_items_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != "vasc-study-items") throw Error(ErrorKind::Load, "not a study item file");
    std::vector<StudyItem> items;
    for (const auto& e : j.at("items")) {
      items.push_back({e.at("item_id"), e.at("image_id"), e.at("file_path"), e.at("true_class_id"),
                       e.at("predicted_class_id"), e.at("predicted_probability")});
    }
    return items;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Load, std::string("malformed study item file: ") + e.what());
  }
}

// ---------------------------------------------------------------- sessions

std::string to_string(SessionState state) {
  switch (state) {
    case SessionState::Pass1Active: return "pass1-active";
    case SessionState::Pass2Active: return "pass2-active";
    case SessionState::Complete: return "complete";
  }
  return "complete";
}

SessionState StudySession::state() const {
  const auto c = cursor();
  if (!c) return SessionState::Complete;
  return c->first == 1 ? SessionState::Pass1Active : SessionState::Pass2Active;
}

std::optional<std::pair<int, std::size_t>> StudySession::cursor() const {
  const std::size_t r = responses.size();
  if (r < pass1_order.size()) return std::make_pair(1, r);
  if (r < total()) return std::make_pair(2, r - pass1_order.size());
  return std::nullopt;
}

StudySession create_session(const std::string& reader_id, std::span<const StudyItem> items,
                            std::uint64_t seed) {
  if (reader_id.empty()) throw Error(ErrorKind::Validation, "reader_id must not be empty");
  if (items.empty()) throw Error(ErrorKind::Validation, "a session needs at least one item");
  StudySession s;
  s.reader_id = reader_id;
  s.seed = seed;
  char buf[32];
  std::snprintf(buf, sizeof buf, "s-%012llx",
                static_cast<unsigned long long>(derive_seed(seed, text_hash(reader_id)) >> 16));
  s.session_id = buf;

  std::vector<std::string> ids;
  for (const auto& it : items) ids.push_back(it.item_id);
  s.pass1_order = ids;
  Rng(derive_seed(seed, 1)).shuffle(s.pass1_order.begin(), s.pass1_order.end());
  for (std::uint64_t stream = 2;; ++stream) {
    s.pass2_order = ids;
    Rng(derive_seed(seed, stream)).shuffle(s.pass2_order.begin(), s.pass2_order.end());
    if (ids.size() < 2 || s.pass2_order != s.pass1_order) break;
  }
  return s;
}

// ---------------------------------------------------------------- report

StudyReport compute_study_report(std::span<const StudySession> sessions,
                                 std::span<const StudyItem> items, const Taxonomy& taxonomy) {
  std::vector<std::string> incomplete;
  for (const auto& s : sessions) {
    if (s.state() != SessionState::Complete) {
      incomplete.push_back(s.session_id + " (" + s.reader_id + ", " +
                           std::to_string(s.responses.size()) + "/" + std::to_string(s.total()) + ")");
    }
  }
  if (!incomplete.empty()) {
    std::string msg = "incomplete sessions: ";
    for (std::size_t i = 0; i < incomplete.size(); ++i) msg += (i ? ", " : "") + incomplete[i];
    throw Error(ErrorKind::IncompleteSession, msg);
  }

  std::map<std::string, std::size_t> truth;
  const std::size_t k = taxonomy.size();
  StudyReport report;
  report.class_ids = taxonomy.class_ids();
  report.pooled_pass1 = ConfusionMatrix(k);
  report.pooled_pass2 = ConfusionMatrix(k);
  report.classifier = ConfusionMatrix(k);
  for (const auto& it : items) {
    const std::size_t t = taxonomy.require_index(it.true_class_id);
    truth[it.item_id] = t;
    report.classifier.at(t, taxonomy.require_index(it.predicted_class_id)) += 1;
  }

  for (const auto& s : sessions) {
    ReaderReport r{s.reader_id, s.session_id, ConfusionMatrix(k), ConfusionMatrix(k)};
    for (const auto& resp : s.responses) {
      const auto t = truth.find(resp.item_id);
      if (t == truth.end()) throw Error(ErrorKind::Validation, "response for unknown item " + resp.item_id);
      auto& m = resp.pass == 1 ? r.pass1 : r.pass2;
      m.at(t->second, taxonomy.require_index(resp.chosen_class_id)) += 1;
    }
    report.pooled_pass1 += r.pass1;
    report.pooled_pass2 += r.pass2;
    report.readers.push_back(std::move(r));
  }

  for (std::size_t c = 0; c < k; ++c) {
    ClassComparison cmp;
    cmp.class_id = taxonomy[c].class_id;
    auto share = [c](const ConfusionMatrix& m) {
      return m.row_sum(c) ? m.class_accuracy(c) : 0.0;
    };
    cmp.unaided_accuracy = share(report.pooled_pass1);
    cmp.aided_accuracy = share(report.pooled_pass2);
    cmp.classifier_accuracy = share(report.classifier);
    cmp.aided_exceeds_classifier = cmp.aided_accuracy > cmp.classifier_accuracy;
    report.per_class.push_back(cmp);
  }
  return report;
}

namespace {

json matrix_json(const ConfusionMatrix& m) {
  json rows = json::array();
  for (std::size_t t = 0; t < m.classes(); ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < m.classes(); ++p) row.push_back(m.at(t, p));
    rows.push_back(row);
  }
  json j = {{"matrix", rows}, {"correct", m.correct()}, {"total", m.total()}};
  j["accuracy"] = m.total() ? json(m.accuracy()) : json(nullptr);
  return j;
}

std::string percent(const ConfusionMatrix& m) {
  if (m.total() == 0) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%% (%zu/%zu)", 100.0 * m.accuracy(), m.correct(), m.total());
  return buf;
}

void print_matrix(std::ostringstream& out, const ConfusionMatrix& m, const Taxonomy& taxonomy) {
  std::size_t width = 6;
  for (const auto& c : taxonomy.classes()) width = std::max(width, c.class_id.size() + 2);
  out << std::string(width, ' ');
  for (std::size_t p = 0; p < m.classes(); ++p) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%6zu", p + 1);
    out << buf;
  }
  out << "\n";
  for (std::size_t t = 0; t < m.classes(); ++t) {
    std::string name = std::to_string(t + 1) + " " + taxonomy[t].class_id;
    name.resize(std::max(width, name.size() + 1), ' ');
    out << name;
    for (std::size_t p = 0; p < m.classes(); ++p) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%6zu", m.at(t, p));
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace

std::string study_report_to_json(const StudyReport& report, const Taxonomy& taxonomy) {
  json j = {{"format", "vasc-study-report"}, {"version", 1}, {"class_ids", report.class_ids}};
  j["taxonomy_version"] = taxonomy.version();
  j["pooled"] = {{"pass1", matrix_json(report.pooled_pass1)},
                 {"pass2", matrix_json(report.pooled_pass2)}};
  j["classifier"] = matrix_json(report.classifier);
  j["readers"] = json::array();
  for (const auto& r : report.readers) {
    j["readers"].push_back({{"reader_id", r.reader_id},
                            {"session_id", r.session_id},
                            {"pass1", matrix_json(r.pass1)},
                            {"pass2", matrix_json(r.pass2)}});
  }
  j["per_class"] = json::array();
  for (const auto& c : report.per_class) {
    j["per_class"].push_back({{"class_id", c.class_id},
                              {"unaided_accuracy", c.unaided_accuracy},
                              {"aided_accuracy", c.aided_accuracy},
                              {"classifier_accuracy", c.classifier_accuracy},
                              {"aided_exceeds_classifier", c.aided_exceeds_classifier}});
  }
  return j.dump(2);
}

std::string format_study_report(const StudyReport& report, const Taxonomy& taxonomy) {
  std::ostringstream out;
  out << "Unaided readers (pooled): " << percent(report.pooled_pass1) << "\n";
  print_matrix(out, report.pooled_pass1, taxonomy);
  out << "\nAided readers (pooled): " << percent(report.pooled_pass2) << "\n";
  print_matrix(out, report.pooled_pass2, taxonomy);
  out << "\nClassifier: " << percent(report.classifier) << "\n";
  print_matrix(out, report.classifier, taxonomy);
  for (const auto& r : report.readers) {
    out << "\nReader " << r.reader_id << ": unaided " << percent(r.pass1) << ", aided "
        << percent(r.pass2) << "\n";
  }
  out << "\nClass                         unaided  aided    classifier\n";
  for (const auto& c : report.per_class) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-30s%-9.4f%-9.4f%.4f%s\n", c.class_id.c_str(), c.unaided_accuracy,
                  c.aided_accuracy, c.classifier_accuracy, c.aided_exceeds_classifier ? "  *" : "");
    out << buf;
  }
  return out.str();
}

std::string view_to_json(const ItemView& view) {
  json j = {{"session_id", view.session_id},
            {"item_id", view.item_id},
            {"pass", view.pass},
            {"image_url", "/api/items/" + view.item_id + "/image"},
            {"progress", {{"answered", view.answered}, {"total", view.total}}}};
  if (view.predicted_class_id) {
    json p = {{"class_id", *view.predicted_class_id},
              {"display_name", view.predicted_display_name.value_or(*view.predicted_class_id)}};
    if (view.predicted_probability) p["probability"] = *view.predicted_probability;
    j["prediction"] = p;
  }
  return j.dump();
}

std::string ack_to_json(const Ack& ack) {
  return json{{"session_id", ack.session_id},
              {"item_id", ack.item_id},
              {"pass", ack.pass},
              {"accepted", true},
              {"state", to_string(ack.state)},
              {"progress", {{"answered", ack.answered}, {"total", ack.total}}}}
      .dump();
}

std::string status_to_json(const SessionStatus& status) {
  return json{{"session_id", status.session_id},
              {"reader_id", status.reader_id},
              {"state", to_string(status.state)},
              {"progress", {{"answered", status.answered}, {"total", status.total}}}}
      .dump();
}

// ---------------------------------------------------------------- service

StudyService::StudyService(StudyDesign design, std::vector<StudyItem> items, Taxonomy taxonomy,
                           std::filesystem::path log_dir)
    : design_(design), items_(std::move(items)), taxonomy_(std::move(taxonomy)),
      log_dir_(std::move(log_dir)) {
  if (items_.empty()) throw Error(ErrorKind::Validation, "study has no items");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!item_index_.emplace(items_[i].item_id, i).second) {
      throw Error(ErrorKind::Validation, "duplicate item id " + items_[i].item_id);
    }
    taxonomy_.require_index(items_[i].true_class_id);
    taxonomy_.require_index(items_[i].predicted_class_id);
  }
  std::filesystem::create_directories(log_dir_);
  replay();
}

const StudySession& StudyService::find(const std::string& session_id) const {
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw Error(ErrorKind::NotFound, "unknown session " + session_id);
  return it->second;
}

void StudyService::append_log(const std::string& session_id, const std::string& line) const {
  const auto path = log_dir_ / (session_id + ".jsonl");
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorKind::Io, "cannot open session log " + path.string());
  const std::string data = line + "\n";
  std::size_t written = 0;
  while (written < data.size()) {
    const ssize_t n = ::write(fd, data.data() + written, data.size() - written);
    if (n <= 0) {
      ::close(fd);
      throw Error(ErrorKind::Io, "cannot append to session log " + path.string());
    }
    written += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  ::close(fd);
  if (!synced) throw Error(ErrorKind::Io, "cannot sync session log " + path.string());
}

void StudyService::replay() {
  std::vector<std::filesystem::path> logs;
  for (const auto& entry : std::filesystem::directory_iterator(log_dir_)) {
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") logs.push_back(entry.path());
  }
  std::sort(logs.begin(), logs.end());
  for (const auto& path : logs) {
    std::ifstream in(path, std::ios::binary);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    // A record only counts once its newline is on disk; a torn tail is dropped.
    const auto last_newline = content.rfind('\n');
    content.resize(last_newline == std::string::npos ? 0 : last_newline + 1);
    std::istringstream lines(content);
    std::string line;
    StudySession s;
    bool have_header = false;
    std::size_t line_no = 0;
    while (std::getline(lines, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const json j = json::parse(line);
        if (j.at("type") == "session") {
          if (have_header) throw Error(ErrorKind::Load, "second session header");
          s.session_id = j.at("session_id");
          s.reader_id = j.at("reader_id");
          s.seed = j.at("seed");
          s.pass1_order = j.at("pass1_order").get<std::vector<std::string>>();
          s.pass2_order = j.at("pass2_order").get<std::vector<std::string>>();
          have_header = true;
        } else if (j.at("type") == "response") {
          if (!have_header) throw Error(ErrorKind::Load, "response before session header");
          ReaderResponse r{s.session_id, j.at("pass"), j.at("item_id"), j.at("chosen_class_id"),
                           j.at("response_time")};
          const auto c = s.cursor();
          const auto& order = c && c->first == 1 ? s.pass1_order : s.pass2_order;
          if (!c || r.pass != c->first || order[c->second] != r.item_id) {
            throw Error(ErrorKind::Load, "response out of sequence");
          }
          s.responses.push_back(std::move(r));
        }
      } catch (const std::exception& e) {
        throw Error(ErrorKind::Load, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (!have_header) continue;
    reader_sessions_[s.reader_id] = s.session_id;
    sessions_[s.session_id] = std::move(s);
  }
}

SessionStatus StudyService::create_session(const std::string& reader_id) {
  std::lock_guard lock(mutex_);
  if (reader_sessions_.count(reader_id)) {
    throw Error(ErrorKind::Conflict, "reader " + reader_id + " already has a session");
  }
  StudySession s = vasc::create_session(reader_id, items_, derive_seed(design_.seed, text_hash(reader_id)));
  if (sessions_.count(s.session_id)) {
    throw Error(ErrorKind::Conflict, "session id collision for reader " + reader_id);
  }
  append_log(s.session_id, json{{"type", "session"},
                                {"session_id", s.session_id},
                                {"reader_id", s.reader_id},
                                {"seed", s.seed},
                                {"created", utc_now()},
                                {"pass1_order", s.pass1_order},
                                {"pass2_order", s.pass2_order}}
                               .dump());
  SessionStatus st{s.session_id, s.reader_id, s.state(), 0, s.total()};
  reader_sessions_[reader_id] = s.session_id;
  sessions_[s.session_id] = std::move(s);
  return st;
}

ItemView StudyService::next_item(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  const StudySession& s = find(session_id);
  const auto c = s.cursor();
  if (!c) throw Error(ErrorKind::NoMoreItems, "session " + session_id + " is complete");
  ItemView v;
  v.session_id = session_id;
  v.pass = c->first;
  v.item_id = (c->first == 1 ? s.pass1_order : s.pass2_order)[c->second];
  v.answered = s.responses.size();
  v.total = s.total();
  if (v.pass == 2) {
    const StudyItem& item = items_[item_index_.at(v.item_id)];
    v.predicted_class_id = item.predicted_class_id;
    v.predicted_display_name = taxonomy_[taxonomy_.require_index(item.predicted_class_id)].display_name;
    if (design_.show_probability) v.predicted_probability = item.predicted_probability;
  }
  return v;
}

Ack StudyService::submit_response(const std::string& session_id, const std::string& item_id,
                                  const std::string& chosen_class_id) {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw Error(ErrorKind::NotFound, "unknown session " + session_id);
  StudySession& s = it->second;
  const auto c = s.cursor();
  const int pass = c ? c->first : 2;
  for (const auto& r : s.responses) {
    if (r.pass == pass && r.item_id == item_id) {
      throw Error(ErrorKind::Idempotency,
                  "item " + item_id + " already answered in pass " + std::to_string(pass));
    }
  }
  if (!c) throw Error(ErrorKind::Sequencing, "session " + session_id + " is complete");
  const auto& expected = (c->first == 1 ? s.pass1_order : s.pass2_order)[c->second];
  if (item_id != expected) {
    throw Error(ErrorKind::Sequencing, "item " + item_id + " is not the item currently served");
  }
  if (!taxonomy_.index_of(chosen_class_id)) {
    throw Error(ErrorKind::Validation, "'" + chosen_class_id + "' is not one of the study classes");
  }
  ReaderResponse r{session_id, pass, item_id, chosen_class_id, utc_now()};
  append_log(session_id, json{{"type", "response"},
                              {"pass", r.pass},
                              {"item_id", r.item_id},
                              {"chosen_class_id", r.chosen_class_id},
                              {"response_time", r.response_time}}
                             .dump());
  s.responses.push_back(std::move(r));
  return Ack{session_id, item_id, pass, s.responses.size(), s.total(), s.state()};
}

SessionStatus StudyService::status(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  const StudySession& s = find(session_id);
  return {s.session_id, s.reader_id, s.state(), s.responses.size(), s.total()};
}

std::vector<SessionStatus> StudyService::sessions() const {
  std::lock_guard lock(mutex_);
  std::vector<SessionStatus> out;
  for (const auto& [id, s] : sessions_) {
    out.push_back({s.session_id, s.reader_id, s.state(), s.responses.size(), s.total()});
  }
  return out;
}

std::vector<StudySession> StudyService::snapshot() const {
  std::lock_guard lock(mutex_);
  std::vector<StudySession> out;
  for (const auto& [id, s] : sessions_) out.push_back(s);
  return out;
}

StudyReport StudyService::report() const {
  const auto all = snapshot();
  return compute_study_report(all, items_, taxonomy_);
}

std::string StudyService::item_file(const std::string& item_id) const {
  const auto it = item_index_.find(item_id);
  if (it == item_index_.end()) throw Error(ErrorKind::NotFound, "unknown item " + item_id);
  return items_[it->second].file_path;
}

}  // namespace vasc
