#include "vasc/study_server.hpp"

#include "httplib.h"
#include "json.hpp"
#include "vasc/augment.hpp"
#include "vasc/error.hpp"
#include "vasc/image.hpp"

namespace vasc {

using json = nlohmann::json;

namespace {

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotFound: return 404;
    case ErrorKind::Conflict:
    case ErrorKind::Sequencing:
    case ErrorKind::Idempotency:
    case ErrorKind::IncompleteSession: return 409;
    case ErrorKind::NoMoreItems: return 410;
    case ErrorKind::Validation:
    case ErrorKind::Load:
    case ErrorKind::Channel:
    case ErrorKind::Shape: return 422;
    default: return 500;
  }
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"kind", kind}, {"message", message}}}}.dump(), "application/json");
}

template <class Fn>
auto guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const Error& e) {
      send_error(res, status_for(e.kind()), to_string(e.kind()), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "bad_request", std::string("malformed JSON body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

std::string prediction_to_json(const std::vector<double>& probabilities, const Taxonomy& taxonomy) {
  if (probabilities.size() != taxonomy.size()) {
    throw Error(ErrorKind::Shape, "probability vector does not match the taxonomy");
  }
  json classes = json::array();
  std::size_t best = 0;
  for (std::size_t k = 0; k < probabilities.size(); ++k) {
    if (probabilities[k] > probabilities[best]) best = k;
    classes.push_back({{"class_id", taxonomy[k].class_id},
                       {"display_name", taxonomy[k].display_name},
                       {"probability", probabilities[k]}});
  }
  return json{{"predicted", {{"class_id", taxonomy[best].class_id},
                             {"display_name", taxonomy[best].display_name},
                             {"probability", probabilities[best]}}},
              {"probabilities", classes}}
      .dump();
}

struct StudyServer::Impl {
  StudyService& service;
  const Classifier* model;
  ServerOptions options;
  httplib::Server http;

  Impl(StudyService& s, const Classifier* m, ServerOptions o)
      : service(s), model(m), options(std::move(o)) {
    http.set_payload_max_length(options.max_upload_bytes);
    const std::string json_type = "application/json";

    http.Post("/api/sessions", guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body);
      const std::string reader = body.at("reader_id");
      res.status = 201;
      res.set_content(status_to_json(service.create_session(reader)), json_type);
    }));
    http.Get(R"(/api/sessions/([^/]+)/next)",
             guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
               res.set_content(view_to_json(service.next_item(req.matches[1])), json_type);
             }));
    http.Post(R"(/api/sessions/([^/]+)/responses)",
              guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
                const json body = json::parse(req.body);
                const Ack ack = service.submit_response(req.matches[1], body.at("item_id"),
                                                        body.at("chosen_class_id"));
                res.set_content(ack_to_json(ack), json_type);
              }));
    http.Get(R"(/api/sessions/([^/]+)/status)",
             guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
               res.set_content(status_to_json(service.status(req.matches[1])), json_type);
             }));
    http.Get("/api/report", guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
      if (!options.admin_token.empty() && req.get_header_value("X-Admin-Token") != options.admin_token) {
        send_error(res, 403, "forbidden", "admin token required");
        return;
      }
      res.set_content(study_report_to_json(service.report(), service.taxonomy()), json_type);
    }));
    http.Get(R"(/api/items/([^/]+)/image)",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               const Image img = read_pnm(options.image_root / service.item_file(req.matches[1]));
               res.set_header("Cache-Control", "no-store");
               res.set_content(encode_bmp(img), "image/bmp");
             }));
    http.Post("/api/predict", guarded([this, json_type](const httplib::Request& req, httplib::Response& res) {
      if (!model) {
        send_error(res, 503, "unavailable", "no model loaded");
        return;
      }
      Image img;
      try {
        img = decode_pnm(req.body);
      } catch (const Error& e) {
        send_error(res, 422, "decode", std::string("could not decode the uploaded image: ") + e.what());
        return;
      }
      const Image input = preprocess_resize(img, model->backbone().spec().input_size);
      const auto probs = model->predict(input);
      Taxonomy shown = service.taxonomy();
      if (shown.size() != probs.size()) {
        send_error(res, 500, "configuration", "model and study taxonomies differ");
        return;
      }
      res.set_content(prediction_to_json(probs, shown), json_type);
    }));
    if (options.static_dir) http.set_mount_point("/", options.static_dir->string());
  }
};

StudyServer::StudyServer(StudyService& service, const Classifier* model, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, model, std::move(options))) {}

StudyServer::~StudyServer() { stop(); }

int StudyServer::bind_any_port(const std::string& host) { return impl_->http.bind_to_any_port(host); }

bool StudyServer::bind(const std::string& host, int port) { return impl_->http.bind_to_port(host, port); }

bool StudyServer::serve() { return impl_->http.listen_after_bind(); }

void StudyServer::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void StudyServer::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace vasc
