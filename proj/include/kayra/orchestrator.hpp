#pragma once

// Job queue with leases, the worker loop that drives run_cascade, pipeline
// configuration (file + environment) and the status HTTP service.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "kayra/db.hpp"
#include "kayra/degraded.hpp"
#include "kayra/pipeline.hpp"
#include "kayra/protocol.hpp"

namespace kayra::orchestrator {

/// Milliseconds since an arbitrary epoch. Injectable for lease tests.
using NowFn = std::function<std::int64_t()>;
std::int64_t system_now_ms();

// Configuration.

struct PipelineConfig {
    protocol::Endpoints endpoints;
    protocol::ServiceTimeouts timeouts;
    int retries = 1;
    std::int64_t lease_ms = 120000;
    cascade::CascadeParams cascade;

    /// Throws InvalidArgument on bad URLs, non-positive timeouts or params.
    void validate() const;
};

nlohmann::json config_to_json(const PipelineConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);

/// Overrides every leaf of `doc` that has a matching environment variable:
/// {"a": {"b_c": 1}} is read from PREFIX_A_B_C. Values parse as JSON scalars
/// of the leaf's type.
void apply_env_overrides(nlohmann::json& doc, const std::string& prefix,
                         const std::function<std::optional<std::string>(const std::string&)>& getenv_fn);
std::optional<std::string> process_env(const std::string& name);

/// Defaults, then `file_doc`, then KAYRA_* environment variables.
PipelineConfig load_config_doc(const nlohmann::json& file_doc,
                               const std::function<std::optional<std::string>(const std::string&)>& getenv_fn =
                                   process_env);

/// Defaults, then the file (when given), then KAYRA_* environment variables.
PipelineConfig load_config(const std::optional<std::string>& path,
                           const std::function<std::optional<std::string>(const std::string&)>& getenv_fn =
                               process_env);

// Jobs.

struct Job {
    std::string job_id;
    std::string tenant_id;
    std::string image_id;
    std::string image_ref;  // where the worker loads the raster from
    JobState state = JobState::Queued;
    std::int64_t created_at = 0;
    std::vector<StageStatus> stage_statuses;
    std::optional<std::int64_t> lease_expiry;
    std::optional<std::string> worker;
    int attempts = 0;  // claims so far
    std::string error;
};

nlohmann::json job_to_json(const Job& j);

struct JobResult {
    std::string job_id;
    JobState state = JobState::Failed;
    nlohmann::json annotations = nlohmann::json::array();
    nlohmann::json chain = nlohmann::json::object();
    std::vector<StageStatus> stage_statuses;
    std::string error;
    double total_ms = 0.0;
};

nlohmann::json result_to_json(const JobResult& r);

/// At-least-once queue in SQLite. A claimed job holds a lease; once it lapses
/// the job is Queued again. Results are upserts keyed by job_id.
class JobQueue {
public:
    explicit JobQueue(const std::string& path, NowFn now = system_now_ms);

    std::string enqueue(const std::string& tenant_id, const std::string& image_id, const std::string& image_ref);

    /// Returns expired leases to Queued. Returns how many moved.
    int expire_leases();
    /// Oldest Queued job, now Running under `worker` until now + lease_ms.
    std::optional<Job> claim(const std::string& worker, std::int64_t lease_ms);
    /// Writes the result and moves a Running job to its terminal state.
    void complete(const std::string& worker, const JobResult& result);

    [[nodiscard]] std::optional<Job> find(const std::string& job_id);
    [[nodiscard]] std::optional<JobResult> result(const std::string& job_id);
    [[nodiscard]] std::vector<Job> list();
    [[nodiscard]] std::map<JobState, int> counts();
    [[nodiscard]] std::int64_t now() const { return now_(); }

private:
    Job read_job(db::Statement& s) const;

    db::Database db_;
    NowFn now_;
    std::mutex mu_;
};

struct WorkerOptions {
    std::string worker_id = "worker";
    std::int64_t lease_ms = 120000;
    std::chrono::milliseconds idle_sleep{100};
    cascade::RunOptions run;
    cascade::CascadeParams params;
    /// Test hook: returning true simulates the worker dying right after the claim.
    std::function<bool(const Job&)> kill_after_claim;
};

using ImageLoader = std::function<Raster(const Job&)>;

/// Claims and processes at most one job. Returns false when nothing was claimable
/// or the worker was killed.
bool process_one(JobQueue& queue, protocol::StageBackends& backends, const ImageLoader& load,
                 const WorkerOptions& options, bool* killed = nullptr);

/// Processes jobs until `stop` is set or the kill hook fires. Returns jobs completed.
int worker_loop(JobQueue& queue, protocol::StageBackends& backends, const ImageLoader& load,
                const WorkerOptions& options, const std::atomic<bool>& stop);

/// Reads a raster from an image file path.
Raster load_image_file(const std::string& path);

/// GET /healthz and GET /v1/jobs/{id}/status over a queue.
class StatusServer {
public:
    explicit StatusServer(JobQueue& queue);
    ~StatusServer();
    StatusServer(const StatusServer&) = delete;
    StatusServer& operator=(const StatusServer&) = delete;

    int bind(const std::string& host, int port);
    void listen();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace kayra::orchestrator
