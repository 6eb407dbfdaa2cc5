#pragma once

// HTTP+JSON front end of a StudyStore.
//
//   POST /studies                                          operator
//   POST /studies/:study/participants                      operator
//   GET  /studies/:study/participants/:pid/items
//   PUT  /studies/:study/participants/:pid/responses/:item {"label":0|1}
//   POST /studies/:study/participants/:pid/complete
//   GET  /images/:item
//   GET  /studies/:study/export[?format=jsonl|csv|json]   operator
//
// Operator routes need "Authorization: Bearer <token>". Participants are
// identified by their participant id alone.

#include <filesystem>
#include <string>
#include <vector>

// before httplib: <resolv.h> defines a _res macro that breaks Eigen
#include "lesionforge/vtt/study.hpp"

#include <httplib.h>

namespace lesionforge::vtt {

struct UnauthorizedError : Error {
  using Error::Error;
};

struct ServerOptions {
  std::string token;
  std::filesystem::path ui_dir;  // served under /ui when set
};

/// Image files under `dir`, recursively, or the listed paths.
inline std::vector<std::filesystem::path> image_sources(const json& spec) {
  std::vector<std::filesystem::path> out;
  if (spec.is_string()) {
    const std::filesystem::path dir = spec.get<std::string>();
    if (!std::filesystem::is_directory(dir)) throw ArgumentError("not a directory: " + dir.string());
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
      if (e.is_regular_file() && has_image_extension(e.path())) out.push_back(e.path());
  } else if (spec.is_array()) {
    for (const auto& p : spec) out.emplace_back(p.get<std::string>());
  } else {
    throw ArgumentError("image sources must be a directory or a list of paths");
  }
  return out;
}

class VttServer {
 public:
  VttServer(StudyStore& store, ServerOptions options) : store_(store), options_(std::move(options)) {
    if (options_.token.empty()) throw ArgumentError("the study server needs an operator token");
    routes();
  }

  httplib::Server& http() { return http_; }

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port = 0) {
    const int bound = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  bool listen() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      auto fail = [&](int status, const std::string& msg) {
        res.status = status;
        res.set_content(json{{"error", msg}}.dump(), "application/json");
      };
      try {
        fn(req, res);
      } catch (const UnauthorizedError& e) {
        fail(401, e.what());
      } catch (const NotFoundError& e) {
        fail(404, e.what());
      } catch (const ConflictError& e) {
        fail(409, e.what());
      } catch (const ArgumentError& e) {
        fail(400, e.what());
      } catch (const ShapeError& e) {
        fail(400, e.what());
      } catch (const json::exception& e) {
        fail(400, std::string("bad request body: ") + e.what());
      } catch (const std::exception& e) {
        fail(500, e.what());
      }
    };
  }

  void require_operator(const httplib::Request& req) const {
    if (req.get_header_value("Authorization") != "Bearer " + options_.token) throw UnauthorizedError("operator token required");
  }

  static json body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json j = json::parse(req.body);
    if (!j.is_object()) throw ArgumentError("request body must be a JSON object");
    return j;
  }

  static void reply(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  void routes() {
    http_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    http_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type, Authorization");
      res.status = 204;
    });
    if (!options_.ui_dir.empty() && !http_.set_mount_point("/ui", options_.ui_dir.string()))
      throw IoError("cannot serve ui directory " + options_.ui_dir.string());

    http_.Post("/studies", guarded([this](const httplib::Request& req, httplib::Response& res) {
      require_operator(req);
      const json b = body(req);
      const StudyConfig config = StudyConfig::from_json(b);
      std::optional<std::string> created;
      if (b.contains("created")) created = b["created"].get<std::string>();
      const StudyState s = store_.create_study(image_sources(b.at("real")), image_sources(b.at("fake")), config, created);
      reply(res, {{"study", s.id}, {"created", s.created}, {"items", s.items.size()}, {"config", s.config.to_json()}}, 201);
    }));

    http_.Post("/studies/:study/participants", guarded([this](const httplib::Request& req, httplib::Response& res) {
      require_operator(req);
      const json b = body(req);
      const Participant p = store_.enroll(req.path_params.at("study"), b.value("role", std::string("other")));
      reply(res, {{"participant", p.id}, {"role", p.role}, {"items", p.order.size()}}, 201);
    }));

    http_.Get("/studies/:study/participants/:pid/items", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const StudyState s = store_.state(req.path_params.at("study"));
      const std::string pid = req.path_params.at("pid");
      const Participant& p = s.participant(pid);
      json items = json::array();
      for (const auto& item : p.order) {
        json entry = {{"id", item}, {"image", "/images/" + item}, {"label", nullptr}, {"revision", nullptr}};
        if (const Response* r = s.response(pid, item)) {
          entry["label"] = r->label;
          entry["revision"] = r->revision;
        }
        items.push_back(std::move(entry));
      }
      reply(res, {{"study", s.id}, {"participant", pid}, {"role", p.role}, {"complete", p.complete}, {"answered", s.answered(pid)},
                  {"total", p.order.size()}, {"items", items}});
    }));

    http_.Put("/studies/:study/participants/:pid/responses/:item", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json b = body(req);
      if (!b.contains("label") || !b["label"].is_number_integer()) throw ArgumentError("body must be {\"label\": 0|1}");
      const Response r = store_.record_response(req.path_params.at("study"), req.path_params.at("pid"), req.path_params.at("item"),
                                                b["label"].get<int>());
      reply(res, {{"item", r.item}, {"label", r.label}, {"revision", r.revision}, {"at", r.at}});
    }));

    http_.Post("/studies/:study/participants/:pid/complete", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const Participant p = store_.complete(req.path_params.at("study"), req.path_params.at("pid"));
      reply(res, {{"participant", p.id}, {"complete", p.complete}, {"completed_at", p.completed_at}});
    }));

    http_.Get("/images/:item", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto png = store_.image(req.path_params.at("item"));
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    }));

    http_.Get("/studies/:study/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
      require_operator(req);
      const auto rows = store_.export_results(req.path_params.at("study"));
      const std::string format = req.has_param("format") ? req.get_param_value("format") : "jsonl";
      if (format == "jsonl") {
        res.set_content(export_jsonl(rows), "application/x-ndjson");
      } else if (format == "csv") {
        res.set_content(export_csv(rows), "text/csv");
      } else if (format == "json") {
        json all = json::array();
        for (const auto& r : rows) all.push_back(r.to_json());
        reply(res, {{"study", req.path_params.at("study")}, {"rows", all}});
      } else {
        throw ArgumentError("unknown export format " + format);
      }
    }));
  }

  StudyStore& store_;
  ServerOptions options_;
  httplib::Server http_;
};

}  // namespace lesionforge::vtt
