#include "httplib.h"

#include "kayra/backend.hpp"
#include "kayra/image_io.hpp"

namespace kayra::backend {

using nlohmann::json;

struct BackendServer::Impl {
    httplib::Server server;
    std::shared_ptr<Backend> backend;
};

namespace {

void send_error(httplib::Response& res, ErrorCode code, const std::string& detail) {
    res.status = protocol::http_status(code);
    res.set_content(json{{"error", error_code_name(code)}, {"detail", detail}}.dump(), "application/json");
}

std::string bearer(const httplib::Request& req) {
    const std::string h = req.get_header_value("Authorization");
    constexpr std::string_view prefix = "Bearer ";
    if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) {
        throw Error(ErrorCode::Unauthorized, "missing bearer token");
    }
    return h.substr(prefix.size());
}

std::optional<int> version_param(const httplib::Request& req) {
    if (!req.has_param("version")) return std::nullopt;
    const std::string v = req.get_param_value("version");
    try {
        std::size_t used = 0;
        const int n = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, "version must be an integer");
    }
}

json body_json(const httplib::Request& req) {
    try {
        return json::parse(req.body);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("body is not JSON: ") + e.what());
    }
}

}  // namespace

BackendServer::BackendServer(std::shared_ptr<Backend> backend) : impl_(std::make_unique<Impl>()) {
    impl_->backend = std::move(backend);
    auto& srv = impl_->server;
    srv.set_payload_max_length(512u << 20);
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Headers", "Authorization, Content-Type"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"service", "backend"}, {"status", "ok"}}.dump(), "application/json");
    });

    Backend* b = impl_->backend.get();
    // Authenticated JSON route; the handler returns the response document.
    auto route = [b](auto handler) {
        return [b, handler](const httplib::Request& req, httplib::Response& res) {
            try {
                const std::string tenant = b->authenticate(bearer(req));
                handler(tenant, req, res);
            } catch (const Error& e) {
                send_error(res, e.code(), e.what());
            } catch (const json::exception& e) {
                send_error(res, ErrorCode::InvalidArgument, e.what());
            }
        };
    };
    auto reply = [](httplib::Response& res, const json& j) { res.set_content(j.dump(), "application/json"); };

    srv.Post("/v1/images", route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
        std::vector<std::uint8_t> bytes;
        std::string filename;
        if (req.is_multipart_form_data()) {
            if (!req.has_file("file")) throw Error(ErrorCode::InvalidArgument, "multipart field 'file' is required");
            const auto f = req.get_file_value("file");
            bytes.assign(f.content.begin(), f.content.end());
            filename = f.filename;
        } else {
            bytes.assign(req.body.begin(), req.body.end());
            filename = req.get_param_value("filename");
        }
        res.status = 201;
        reply(res, record_to_json(b->ingest(t, bytes, filename)));
    }));
    srv.Get("/v1/images", route([b, reply](const std::string& t, const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (const auto& r : b->images(t)) arr.push_back(record_to_json(r));
        reply(res, arr);
    }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+))",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                reply(res, record_to_json(b->image(t, req.matches[1])));
            }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/raster)",
            route([b](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                (void)b->image(t, req.matches[1]);
                const auto png = io::encode_png(b->load_raster(req.matches[1]));
                res.set_content(std::string(png.begin(), png.end()), "image/png");
            }));
    srv.Post(R"(/v1/images/([A-Za-z0-9_\-]+)/jobs)",
             route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                 res.status = 202;
                 reply(res, json{{"job_id", b->submit_job(t, req.matches[1])}});
             }));
    srv.Get(R"(/v1/jobs/([A-Za-z0-9_\-]+))",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                reply(res, b->job(t, req.matches[1]));
            }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/annotations)",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                reply(res, state_to_json(b->annotations(t, req.matches[1], version_param(req))));
            }));
    srv.Post(R"(/v1/images/([A-Za-z0-9_\-]+)/edits)",
             route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                 const json body = body_json(req);
                 if (!body.contains("edit") || !body.contains("expected_version") ||
                     !body["expected_version"].is_number_integer()) {
                     throw Error(ErrorCode::InvalidArgument, "body needs edit and integer expected_version");
                 }
                 const auto [state, event] = b->apply_edit(t, req.matches[1], edit_from_json(body["edit"]),
                                                           body["expected_version"].get<int>(),
                                                           body.value("actor", std::string("anonymous")));
                 reply(res, json{{"annotations", state_to_json(state)}, {"event", event_to_json(event)}});
             }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/audit)",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                json arr = json::array();
                for (const auto& e : b->audit(t, req.matches[1])) arr.push_back(event_to_json(e));
                reply(res, arr);
            }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/replay)",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                const auto v = version_param(req);
                if (!v) throw Error(ErrorCode::InvalidArgument, "version is required");
                reply(res, set_to_json(b->replay_audit(t, req.matches[1], *v)));
            }));
    srv.Post(R"(/v1/images/([A-Za-z0-9_\-]+)/signoff)",
             route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                 const json body = req.body.empty() ? json::object() : body_json(req);
                 reply(res, state_to_json(b->signoff(t, req.matches[1], body.value("user", std::string("anonymous")))));
             }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/karyogram)",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                const auto layout = b->karyogram(t, req.matches[1], version_param(req));
                if (req.get_param_value("format") == "json") {
                    json groups = json::array();
                    for (const auto& g : layout.groups) groups.push_back({{"name", g.name}, {"ids", g.ids}});
                    reply(res, json{{"groups", groups}, {"width", layout.image.width()}, {"height", layout.image.height()}});
                    return;
                }
                const auto png = io::encode_png(layout.image);
                res.set_content(std::string(png.begin(), png.end()), "image/png");
            }));
    srv.Get(R"(/v1/images/([A-Za-z0-9_\-]+)/iscn)",
            route([b, reply](const std::string& t, const httplib::Request& req, httplib::Response& res) {
                const auto s = b->iscn(t, req.matches[1], version_param(req));
                reply(res, json{{"iscn", s.text}, {"uncertain", s.uncertain}});
            }));
}

BackendServer::~BackendServer() { stop(); }

int BackendServer::bind(const std::string& host, int port) {
    if (port == 0) {
        const int p = impl_->server.bind_to_any_port(host);
        if (p < 0) throw Error(ErrorCode::IoError, "cannot bind " + host);
        return p;
    }
    if (!impl_->server.bind_to_port(host, port)) {
        throw Error(ErrorCode::IoError, "cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void BackendServer::listen() { impl_->server.listen_after_bind(); }

void BackendServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace kayra::backend
