#include <regex>

#include "httplib.h"

#include "kayra/protocol.hpp"

namespace kayra::protocol {

using nlohmann::json;

std::string service_name(Service s) {
    switch (s) {
        case Service::SemSeg: return "semseg";
        case Service::Instance: return "instances";
        case Service::Dedup: return "dedup";
        case Service::Classify: return "classify";
    }
    return "unknown";
}

std::string service_path(Service s) { return "/v1/" + service_name(s); }

int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::NotFound:
        case ErrorCode::UnknownImageId:
        case ErrorCode::UnknownAnnotation:
        case ErrorCode::UnknownVersion: return 404;
        case ErrorCode::Unauthorized: return 401;
        case ErrorCode::VersionConflict:
        case ErrorCode::SignedOffImmutable: return 409;
        case ErrorCode::UnsupportedFormat: return 415;
        case ErrorCode::ServiceUnavailable: return 503;
        case ErrorCode::IoError: return 500;
        default: return 400;
    }
}

void validate_url(const std::string& url) {
    static const std::regex re(R"(^http://[A-Za-z0-9.\-]+(:[0-9]{1,5})?/?$)");
    if (!std::regex_match(url, re)) throw Error(ErrorCode::InvalidArgument, "not an http://host[:port] URL: " + url);
}

std::chrono::milliseconds ServiceTimeouts::of(Service s) const {
    switch (s) {
        case Service::SemSeg: return semseg;
        case Service::Instance: return instance;
        case Service::Dedup: return dedup;
        case Service::Classify: return classify;
    }
    return semseg;
}

HttpBackends::HttpBackends(Endpoints endpoints, ServiceTimeouts timeouts)
    : endpoints_(std::move(endpoints)), timeouts_(timeouts) {
    for (const auto* u : {&endpoints_.semseg, &endpoints_.instance, &endpoints_.dedup, &endpoints_.classify}) {
        validate_url(*u);
    }
    for (Service s : {Service::SemSeg, Service::Instance, Service::Dedup, Service::Classify}) {
        if (timeouts_.of(s).count() <= 0) throw Error(ErrorCode::InvalidArgument, "timeouts must be positive");
    }
}

json HttpBackends::post(Service service, const std::string& base, const json& body) const {
    const std::string path = service_path(service);
    const auto timeout = timeouts_.of(service);
    httplib::Client client(base);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) {
        throw Error(ErrorCode::ServiceUnavailable, base + path + ": " + httplib::to_string(res.error()));
    }
    json parsed;
    try {
        parsed = json::parse(res->body);
    } catch (const json::exception&) {
        throw Error(ErrorCode::ProtocolError, base + path + ": response is not JSON");
    }
    if (res->status != 200) {
        const auto code = error_code_from_name(parsed.value("error", ""));
        if (code) throw Error(*code, parsed.value("detail", ""));
        throw Error(res->status >= 500 ? ErrorCode::ServiceUnavailable : ErrorCode::ProtocolError,
                    base + path + ": HTTP " + std::to_string(res->status));
    }
    return parsed;
}

SemSegResponse HttpBackends::semseg(const SemSegRequest& req) {
    return semseg_response_from_json(post(Service::SemSeg, endpoints_.semseg, to_json(req)));
}

InstanceResponse HttpBackends::instances(const InstanceRequest& req) {
    return instance_response_from_json(post(Service::Instance, endpoints_.instance, to_json(req)));
}

DedupResponse HttpBackends::dedup(const DedupRequest& req) {
    return dedup_response_from_json(post(Service::Dedup, endpoints_.dedup, to_json(req)));
}

ClassifyResponse HttpBackends::classify(const ClassifyRequest& req) {
    return classify_response_from_json(post(Service::Classify, endpoints_.classify, to_json(req)));
}

struct ModelServer::Impl {
    httplib::Server server;
    std::shared_ptr<StageBackends> backends;
};

namespace {

template <typename Fn>
void handle(const httplib::Request& req, httplib::Response& res, Fn&& fn) {
    try {
        const json body = json::parse(req.body);
        res.set_content(fn(body).dump(), "application/json");
    } catch (const Error& e) {
        res.status = http_status(e.code());
        res.set_content(json{{"error", error_code_name(e.code())}, {"detail", e.what()}}.dump(), "application/json");
    } catch (const json::exception& e) {
        res.status = 400;
        res.set_content(json{{"error", "ProtocolError"}, {"detail", e.what()}}.dump(), "application/json");
    }
}

}  // namespace

ModelServer::ModelServer(std::shared_ptr<StageBackends> backends, std::set<Service> services, std::string name,
                         std::string model_version)
    : impl_(std::make_unique<Impl>()) {
    impl_->backends = std::move(backends);
    auto& b = impl_->backends;
    auto& srv = impl_->server;
    srv.set_payload_max_length(256u << 20);
    srv.Get("/healthz", [name, model_version](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"service", name}, {"model_version", model_version}, {"status", "ok"}}.dump(),
                        "application/json");
    });
    if (services.contains(Service::SemSeg)) {
        srv.Post(service_path(Service::SemSeg), [b](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, [&](const json& j) { return to_json(b->semseg(semseg_request_from_json(j))); });
        });
    }
    if (services.contains(Service::Instance)) {
        srv.Post(service_path(Service::Instance), [b](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, [&](const json& j) { return to_json(b->instances(instance_request_from_json(j))); });
        });
    }
    if (services.contains(Service::Dedup)) {
        srv.Post(service_path(Service::Dedup), [b](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, [&](const json& j) { return to_json(b->dedup(dedup_request_from_json(j))); });
        });
    }
    if (services.contains(Service::Classify)) {
        srv.Post(service_path(Service::Classify), [b](const httplib::Request& req, httplib::Response& res) {
            handle(req, res, [&](const json& j) { return to_json(b->classify(classify_request_from_json(j))); });
        });
    }
}

ModelServer::~ModelServer() { stop(); }

int ModelServer::bind(const std::string& host, int port) {
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

void ModelServer::listen() { impl_->server.listen_after_bind(); }

void ModelServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace kayra::protocol
