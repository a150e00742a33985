#pragma once

// Wire contracts for the four model services, the classical stubs behind
// them, a ground-truth oracle test double and the HTTP transport.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "kayra/annotation.hpp"
#include "kayra/cascade.hpp"
#include "kayra/synthgen.hpp"

namespace kayra::protocol {

/// Maps a stage-local raster back onto the original image: stage pixel
/// (x, y) covers original [x0 + x / scale, x0 + (x + 1) / scale). Carried
/// so the oracle can look up ground truth; real models ignore it.
struct FrameHint {
    int x0 = 0;
    int y0 = 0;
    double scale = 1.0;
    int width = 0;   // meaningful extent of the stage raster
    int height = 0;

    friend bool operator==(const FrameHint&, const FrameHint&) = default;
};

struct SemSegRequest {
    std::string image_id;
    Raster image;
    std::optional<FrameHint> frame;
};

struct SemSegResponse {
    cascade::SemanticMask mask;
    bool warning = false;
    std::string model_version;
};

struct InstanceRequest {
    std::string image_id;
    Raster image;
    int angle_tag = 0;  // 0 or 45
    std::optional<FrameHint> frame;
};

struct InstanceResponse {
    std::vector<cascade::Detection> detections;
    std::string model_version;
};

struct DedupParams {
    double merge_iou = 0.7;
    double dedup_center_dist = 20.0;
    double semantic_agreement_min = 0.3;

    friend bool operator==(const DedupParams&, const DedupParams&) = default;
};

struct DedupRequest {
    std::string image_id;
    std::vector<cascade::Detection> detections;
    std::optional<BinaryMask> semantic;  // crop2 frame
    DedupParams params;
};

struct DedupResponse {
    std::vector<cascade::Detection> detections;
    std::string model_version;
};

struct ClassifyRequest {
    std::string image_id;
    Raster patch;
    BinaryMask mask;  // same size as patch
    bool augmented = false;
    std::optional<FrameHint> frame;
};

struct ClassifyResponse {
    ClassProbs probs{};
    double rotation_sin = 0.0;
    double rotation_cos = 1.0;
    std::string model_version;
};

nlohmann::json to_json(const FrameHint& f);
nlohmann::json to_json(const SemSegRequest& r);
nlohmann::json to_json(const SemSegResponse& r);
nlohmann::json to_json(const InstanceRequest& r);
nlohmann::json to_json(const InstanceResponse& r);
nlohmann::json to_json(const DedupRequest& r);
nlohmann::json to_json(const DedupResponse& r);
nlohmann::json to_json(const ClassifyRequest& r);
nlohmann::json to_json(const ClassifyResponse& r);
nlohmann::json detection_to_json(const cascade::Detection& d);
nlohmann::json semantic_to_json(const cascade::SemanticMask& m);

FrameHint frame_from_json(const nlohmann::json& j);
SemSegRequest semseg_request_from_json(const nlohmann::json& j);
SemSegResponse semseg_response_from_json(const nlohmann::json& j);
InstanceRequest instance_request_from_json(const nlohmann::json& j);
InstanceResponse instance_response_from_json(const nlohmann::json& j);
DedupRequest dedup_request_from_json(const nlohmann::json& j);
DedupResponse dedup_response_from_json(const nlohmann::json& j);
ClassifyRequest classify_request_from_json(const nlohmann::json& j);
ClassifyResponse classify_response_from_json(const nlohmann::json& j);
cascade::Detection detection_from_json(const nlohmann::json& j);
cascade::SemanticMask semantic_from_json(const nlohmann::json& j);

/// The four stage callables. Implementations must be safe to call from
/// several threads at once.
class StageBackends {
public:
    virtual ~StageBackends() = default;
    virtual SemSegResponse semseg(const SemSegRequest& req) = 0;
    virtual InstanceResponse instances(const InstanceRequest& req) = 0;
    virtual DedupResponse dedup(const DedupRequest& req) = 0;
    virtual ClassifyResponse classify(const ClassifyRequest& req) = 0;
};

// Classical stand-ins.

/// Otsu foreground as class 1. Throws DegenerateHistogram on constant input.
cascade::SemanticMask stub_semseg(const Raster& image, bool dark_foreground = true);

/// Otsu + 8-connected components; one detection per component >= min_area.
std::vector<cascade::Detection> stub_instances(const Raster& image, long long min_area, bool dark_foreground = true);

/// Principal-axis rotation and softmax(-|area - expected_area|) class probabilities.
ClassifyResponse stub_classify(const Raster& patch, const BinaryMask& mask, bool augmented);

DedupResponse run_dedup(const DedupRequest& req, const std::string& model_version);

inline constexpr const char* kStubVersion = "classical-stub/1.0";
inline constexpr const char* kOracleVersion = "gt-oracle/1.0";

class LocalBackends final : public StageBackends {
public:
    explicit LocalBackends(cascade::CascadeParams params = {}) : params_(params) {}
    SemSegResponse semseg(const SemSegRequest& req) override;
    InstanceResponse instances(const InstanceRequest& req) override;
    DedupResponse dedup(const DedupRequest& req) override;
    ClassifyResponse classify(const ClassifyRequest& req) override;

private:
    cascade::CascadeParams params_;
};

struct OracleNoise {
    double iou_degrade = 0.0;   // target IoU with ground truth is 1 - iou_degrade
    double misclass_rate = 0.0;
    std::uint64_t seed = 0;
};

/// Ground truth by image id. Registration is exclusive, lookups shared.
class OracleRegistry {
public:
    void add(const std::string& image_id, synth::GroundTruth truth);
    [[nodiscard]] std::shared_ptr<const synth::GroundTruth> find(const std::string& image_id) const;
    [[nodiscard]] std::size_t instance_count() const;
    /// True when (image_id, instance id) is among the round(rate * N) flipped
    /// instances, ranked by a seeded hash over every registered instance.
    [[nodiscard]] bool is_flipped(const std::string& image_id, int instance_id, double rate, std::uint64_t seed) const;

private:
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<const synth::GroundTruth>> truths_;
};

class OracleBackends final : public StageBackends {
public:
    OracleBackends(std::shared_ptr<const OracleRegistry> registry, OracleNoise noise, cascade::CascadeParams params = {})
        : registry_(std::move(registry)), noise_(noise), params_(params) {}
    SemSegResponse semseg(const SemSegRequest& req) override;
    InstanceResponse instances(const InstanceRequest& req) override;
    DedupResponse dedup(const DedupRequest& req) override;
    ClassifyResponse classify(const ClassifyRequest& req) override;

private:
    [[nodiscard]] std::shared_ptr<const synth::GroundTruth> truth(const std::string& image_id) const;

    std::shared_ptr<const OracleRegistry> registry_;
    OracleNoise noise_;
    cascade::CascadeParams params_;
};

/// Which stage calls fail with ServiceUnavailable.
struct FaultPlan {
    bool semseg = false;
    bool instance0 = false;
    bool instance45 = false;
    bool dedup = false;
    bool classify = false;
};

class FaultInjectingBackends final : public StageBackends {
public:
    FaultInjectingBackends(std::shared_ptr<StageBackends> inner, FaultPlan plan)
        : inner_(std::move(inner)), plan_(plan) {}
    SemSegResponse semseg(const SemSegRequest& req) override;
    InstanceResponse instances(const InstanceRequest& req) override;
    DedupResponse dedup(const DedupRequest& req) override;
    ClassifyResponse classify(const ClassifyRequest& req) override;

private:
    std::shared_ptr<StageBackends> inner_;
    FaultPlan plan_;
};

// HTTP transport.

enum class Service { SemSeg, Instance, Dedup, Classify };

std::string service_name(Service s);
std::string service_path(Service s);

struct Endpoints {
    std::string semseg = "http://127.0.0.1:8101";
    std::string instance = "http://127.0.0.1:8102";
    std::string dedup = "http://127.0.0.1:8103";
    std::string classify = "http://127.0.0.1:8104";
};

struct ServiceTimeouts {
    std::chrono::milliseconds semseg{30000};
    std::chrono::milliseconds instance{30000};
    std::chrono::milliseconds dedup{30000};
    std::chrono::milliseconds classify{30000};

    static ServiceTimeouts all(std::chrono::milliseconds t) { return {t, t, t, t}; }
    [[nodiscard]] std::chrono::milliseconds of(Service s) const;
};

/// Throws InvalidArgument unless `url` is http://host[:port].
void validate_url(const std::string& url);

class HttpBackends final : public StageBackends {
public:
    HttpBackends(Endpoints endpoints, std::chrono::milliseconds timeout)
        : HttpBackends(std::move(endpoints), ServiceTimeouts::all(timeout)) {}
    HttpBackends(Endpoints endpoints, ServiceTimeouts timeouts);
    SemSegResponse semseg(const SemSegRequest& req) override;
    InstanceResponse instances(const InstanceRequest& req) override;
    DedupResponse dedup(const DedupRequest& req) override;
    ClassifyResponse classify(const ClassifyRequest& req) override;

private:
    nlohmann::json post(Service service, const std::string& base, const nlohmann::json& body) const;

    Endpoints endpoints_;
    ServiceTimeouts timeouts_;
};

/// Blocking HTTP server exposing the selected services plus GET /healthz.
class ModelServer {
public:
    ModelServer(std::shared_ptr<StageBackends> backends, std::set<Service> services, std::string name,
                std::string model_version);
    ~ModelServer();
    ModelServer(const ModelServer&) = delete;
    ModelServer& operator=(const ModelServer&) = delete;

    /// Binds; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    void listen();  // blocks until stop()
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// HTTP status for a domain error code.
int http_status(ErrorCode code);

}  // namespace kayra::protocol
