#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "vasc/model.hpp"
#include "vasc/study.hpp"

namespace vasc {

struct ServerOptions {
  /// Directory the study items' file paths are relative to.
  std::filesystem::path image_root;
  /// Optional static asset bundle served at "/".
  std::optional<std::filesystem::path> static_dir;
  /// When non-empty, GET /api/report requires header "X-Admin-Token".
  std::string admin_token;
  std::size_t max_upload_bytes = 16u << 20;
};

/// JSON-over-HTTP front end for a StudyService plus an inference endpoint.
///
///   POST /api/sessions                 {"reader_id"}                -> 201 status
///   GET  /api/sessions/{id}/next                                    -> item view | 410
///   POST /api/sessions/{id}/responses  {"item_id","chosen_class_id"} -> ack
///   GET  /api/sessions/{id}/status                                  -> status
///   GET  /api/report                                                -> study report | 409
///   GET  /api/items/{item_id}/image                                 -> image/bmp
///   POST /api/predict                  netpbm bytes                 -> probabilities
///
/// Errors are {"error": {"kind", "message"}} with a matching status code.
class StudyServer {
 public:
  /// `model` may be null, in which case /api/predict answers 503.
  StudyServer(StudyService& service, const Classifier* model, ServerOptions options);
  ~StudyServer();
  StudyServer(const StudyServer&) = delete;
  StudyServer& operator=(const StudyServer&) = delete;

  /// Binds to an ephemeral port and returns it (or -1).
  int bind_any_port(const std::string& host = "127.0.0.1");
  bool bind(const std::string& host, int port);
  /// Blocks serving requests until stop().
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Response body for an inference request: the probability vector in class
/// order plus the argmax.
std::string prediction_to_json(const std::vector<double>& probabilities, const Taxonomy& taxonomy);

}  // namespace vasc
