#pragma once

// Multi-tenant image store, editing with an append-only audit log and
// versioned snapshots, karyogram composition and ISCN suggestions.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "kayra/annotation.hpp"
#include "kayra/db.hpp"
#include "kayra/imaging.hpp"
#include "kayra/orchestrator.hpp"

namespace kayra::backend {

// Filenames and dataset splits.

struct ClinicalFields {
    std::string patient_id;
    int year = 0;
    int image_no = 0;
    std::string cultivation;
    std::string type;

    friend bool operator==(const ClinicalFields&, const ClinicalFields&) = default;
};

/// {patient_id}_{year}_{image_no}_{cultivation}_{type}.{tif,tiff,png,bmp}
std::optional<ClinicalFields> parse_filename(const std::string& filename);

struct ImageRecord {
    std::string image_id;
    std::string tenant_id;
    std::string filename;
    int width = 0;
    int height = 0;
    std::optional<ClinicalFields> fields;
    std::int64_t ingested_at = 0;
};

nlohmann::json record_to_json(const ImageRecord& r);

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct DatasetSplit {
    std::vector<std::string> train, val, test;  // image ids
    std::vector<std::string> train_patients, val_patients, test_patients;
};

/// Shuffles the distinct patient ids with `seed` and cuts them by ratio, so a
/// patient never spans two splits. Throws MissingPatientId or InvalidArgument.
DatasetSplit split_dataset_by_patient(const std::vector<ImageRecord>& records, const SplitRatios& ratios,
                                      std::uint64_t seed);

// Edits.

struct DeleteEdit {
    int id = 0;
};
struct MergeEdit {
    std::vector<int> ids;
    std::optional<ClassLabel> label;  // Unknown when absent
};
struct SplitEdit {
    int id = 0;
    Polygon polygon_a, polygon_b;
};
struct RedrawEdit {
    int id = 0;
    Polygon polygon;
};
struct ReclassifyEdit {
    int id = 0;
    ClassLabel label;
};
struct RotateEdit {
    int id = 0;
    double degrees = 0.0;
};
struct FlipEdit {
    int id = 0;
};

using Edit = std::variant<DeleteEdit, MergeEdit, SplitEdit, RedrawEdit, ReclassifyEdit, RotateEdit, FlipEdit>;

nlohmann::json edit_to_json(const Edit& e);
/// Throws InvalidArgument on malformed input.
Edit edit_from_json(const nlohmann::json& j);

/// The replayable part of an image's annotations at one version.
struct AnnotationSet {
    std::string image_id;
    int version = 0;
    std::vector<Annotation> annotations;
    int next_id = 1;  // ids are never reused

    friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

nlohmann::json set_to_json(const AnnotationSet& s);
AnnotationSet set_from_json(const nlohmann::json& j);

/// Version 0 from pipeline output.
AnnotationSet initial_set(const std::string& image_id, std::vector<Annotation> annotations);

/// Pure edit semantics; returns version + 1. Throws UnknownAnnotation or
/// InvalidArgument.
AnnotationSet apply_edit_to(const AnnotationSet& set, const Edit& edit);

struct AuditEvent {
    std::int64_t event_id = 0;
    std::string image_id;
    std::string tenant_id;
    std::string actor;
    std::int64_t timestamp = 0;
    Edit edit;
    int resulting_version = 0;
};

nlohmann::json event_to_json(const AuditEvent& e);

// Karyogram and ISCN.

inline constexpr int kKaryogramGroups = 9;

/// Group names in layout order.
const std::array<std::string, kKaryogramGroups>& karyogram_group_names();
/// Index into karyogram_group_names().
int karyogram_group(ClassLabel label);

struct KaryogramLayout {
    struct Group {
        std::string name;
        std::vector<int> ids;
    };
    std::vector<Group> groups;
    Raster image;
};

/// Crops each annotation by its polygon, turns it upright and places it in its
/// group row; within a group by class, then by descending upright height.
KaryogramLayout compose_karyogram(const std::vector<Annotation>& annotations, const Raster& image);

struct IscnSuggestion {
    std::string text;
    bool uncertain = false;  // Unknown-class annotations were present
};

IscnSuggestion iscn_suggest(const std::vector<Annotation>& annotations);

// Service.

struct Tenant {
    std::string tenant_id;
    std::string name;
};

struct SetState {
    AnnotationSet set;
    bool signed_off = false;
    std::optional<std::string> signoff_user;
};

nlohmann::json state_to_json(const SetState& s);

/// Every public call is scoped by tenant; resources of another tenant are
/// reported as NotFound.
class Backend {
public:
    Backend(const std::string& db_path, std::shared_ptr<orchestrator::JobQueue> queue,
            orchestrator::NowFn now = orchestrator::system_now_ms);

    void add_tenant(const Tenant& t);
    void add_token(const std::string& token, const std::string& tenant_id);
    /// JSON: [{"token": "...", "tenant_id": "...", "name": "..."}].
    void load_token_file(const std::string& path);
    /// Throws Unauthorized.
    std::string authenticate(const std::string& bearer_token);

    ImageRecord ingest(const std::string& tenant_id, const std::vector<std::uint8_t>& bytes,
                       const std::string& filename);
    ImageRecord image(const std::string& tenant_id, const std::string& image_id);
    std::vector<ImageRecord> images(const std::string& tenant_id);
    /// Tenant-agnostic raster access for pipeline workers.
    Raster load_raster(const std::string& image_id);

    std::string submit_job(const std::string& tenant_id, const std::string& image_id);
    /// Job status; a finished job's annotations become version 0 of its image.
    nlohmann::json job(const std::string& tenant_id, const std::string& job_id);
    /// Installs version 0 directly (CLI runs, tests). Throws VersionConflict if one exists.
    void import_annotations(const std::string& tenant_id, const std::string& image_id,
                            std::vector<Annotation> annotations);

    SetState annotations(const std::string& tenant_id, const std::string& image_id,
                         std::optional<int> version = std::nullopt);
    std::pair<SetState, AuditEvent> apply_edit(const std::string& tenant_id, const std::string& image_id,
                                               const Edit& edit, int expected_version, const std::string& actor);
    std::vector<AuditEvent> audit(const std::string& tenant_id, const std::string& image_id);
    AnnotationSet replay_audit(const std::string& tenant_id, const std::string& image_id, int up_to_version);
    SetState signoff(const std::string& tenant_id, const std::string& image_id, const std::string& user);

    KaryogramLayout karyogram(const std::string& tenant_id, const std::string& image_id,
                              std::optional<int> version = std::nullopt);
    IscnSuggestion iscn(const std::string& tenant_id, const std::string& image_id,
                        std::optional<int> version = std::nullopt);

private:
    void require_image(const std::string& tenant_id, const std::string& image_id);
    int current_version(const std::string& image_id);
    AnnotationSet snapshot(const std::string& image_id, int version);
    void adopt_result(const orchestrator::Job& job);

    db::Database db_;
    std::shared_ptr<orchestrator::JobQueue> queue_;
    orchestrator::NowFn now_;
    std::mutex mu_;
};

/// REST API over a Backend with bearer-token tenants.
class BackendServer {
public:
    explicit BackendServer(std::shared_ptr<Backend> backend);
    ~BackendServer();
    BackendServer(const BackendServer&) = delete;
    BackendServer& operator=(const BackendServer&) = delete;

    int bind(const std::string& host, int port);
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace kayra::backend
