#include "kayra/orchestrator.hpp"

#include <cctype>
#include <cstdlib>
#include <regex>
#include <thread>

#include "httplib.h"

#include "kayra/image_io.hpp"

namespace kayra::orchestrator {

using nlohmann::json;

std::int64_t system_now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

// Configuration.

void PipelineConfig::validate() const {
    for (const auto* u : {&endpoints.semseg, &endpoints.instance, &endpoints.dedup, &endpoints.classify}) {
        protocol::validate_url(*u);
    }
    for (auto t : {timeouts.semseg, timeouts.instance, timeouts.dedup, timeouts.classify}) {
        if (t.count() <= 0) throw Error(ErrorCode::InvalidArgument, "timeouts must be positive");
    }
    if (retries < 0) throw Error(ErrorCode::InvalidArgument, "retries must be >= 0");
    if (lease_ms <= 0) throw Error(ErrorCode::InvalidArgument, "lease_ms must be positive");
    cascade.validate();
}

json config_to_json(const PipelineConfig& c) {
    return {{"endpoints",
             {{"semseg", c.endpoints.semseg},
              {"instance", c.endpoints.instance},
              {"dedup", c.endpoints.dedup},
              {"classify", c.endpoints.classify}}},
            {"timeouts_ms",
             {{"semseg", c.timeouts.semseg.count()},
              {"instance", c.timeouts.instance.count()},
              {"dedup", c.timeouts.dedup.count()},
              {"classify", c.timeouts.classify.count()}}},
            {"retries", c.retries},
            {"lease_ms", c.lease_ms},
            {"cascade", cascade::params_to_json(c.cascade)}};
}

namespace {

bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

/// Overlays `patch` on `base`, rejecting keys and types `base` does not have.
void overlay_checked(json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw Error(ErrorCode::InvalidArgument, where + " must be an object");
    for (const auto& [k, v] : patch.items()) {
        const std::string path = where.empty() ? k : where + "." + k;
        if (!base.contains(k)) throw Error(ErrorCode::InvalidArgument, "unknown config key " + path);
        if (base[k].is_object()) {
            overlay_checked(base[k], v, path);
        } else {
            if (!same_kind(base[k], v)) throw Error(ErrorCode::InvalidArgument, "wrong type for " + path);
            base[k] = v;
        }
    }
}

std::chrono::milliseconds ms(const json& j, const char* key) {
    return std::chrono::milliseconds(j.at(key).get<std::int64_t>());
}

}  // namespace

PipelineConfig config_from_json(const json& j) {
    json doc = config_to_json(PipelineConfig{});
    overlay_checked(doc, j, "");
    PipelineConfig c;
    const auto& e = doc["endpoints"];
    c.endpoints = {e["semseg"], e["instance"], e["dedup"], e["classify"]};
    const auto& t = doc["timeouts_ms"];
    c.timeouts = {ms(t, "semseg"), ms(t, "instance"), ms(t, "dedup"), ms(t, "classify")};
    c.retries = doc["retries"].get<int>();
    c.lease_ms = doc["lease_ms"].get<std::int64_t>();
    c.cascade = cascade::params_from_json(doc["cascade"]);
    c.validate();
    return c;
}

void apply_env_overrides(json& doc, const std::string& prefix,
                         const std::function<std::optional<std::string>(const std::string&)>& getenv_fn) {
    for (auto& [k, v] : doc.items()) {
        std::string name = prefix + "_" + k;
        std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) {
            return static_cast<char>(std::isalnum(c) ? std::toupper(c) : '_');
        });
        if (v.is_object()) {
            apply_env_overrides(v, name, getenv_fn);
            continue;
        }
        const auto value = getenv_fn(name);
        if (!value) continue;
        if (v.is_string()) {
            v = *value;
            continue;
        }
        json parsed;
        try {
            parsed = json::parse(*value);
        } catch (const json::exception&) {
            throw Error(ErrorCode::InvalidArgument, name + " is not a valid value: " + *value);
        }
        if (!same_kind(v, parsed)) throw Error(ErrorCode::InvalidArgument, "wrong type in " + name);
        v = parsed;
    }
}

std::optional<std::string> process_env(const std::string& name) {
    const char* v = std::getenv(name.c_str());
    return v ? std::optional<std::string>(v) : std::nullopt;
}

PipelineConfig load_config_doc(const json& file_doc,
                               const std::function<std::optional<std::string>(const std::string&)>& getenv_fn) {
    json doc = config_to_json(PipelineConfig{});
    overlay_checked(doc, file_doc, "");
    apply_env_overrides(doc, "KAYRA", getenv_fn);
    return config_from_json(doc);
}

PipelineConfig load_config(const std::optional<std::string>& path,
                           const std::function<std::optional<std::string>(const std::string&)>& getenv_fn) {
    json file = json::object();
    if (path) {
        const auto bytes = io::read_file(*path);
        try {
            file = json::parse(bytes.begin(), bytes.end());
        } catch (const json::exception& e) {
            throw Error(ErrorCode::InvalidArgument, *path + ": " + e.what());
        }
    }
    return load_config_doc(file, getenv_fn);
}

// Jobs.

json job_to_json(const Job& j) {
    json o{{"job_id", j.job_id},
           {"tenant_id", j.tenant_id},
           {"image_id", j.image_id},
           {"state", job_state_name(j.state)},
           {"created_at", j.created_at},
           {"stage_statuses", j.stage_statuses},
           {"attempts", j.attempts}};
    o["lease_expiry"] = j.lease_expiry ? json(*j.lease_expiry) : json(nullptr);
    if (!j.error.empty()) o["error"] = j.error;
    return o;
}

json result_to_json(const JobResult& r) {
    return {{"job_id", r.job_id},
            {"state", job_state_name(r.state)},
            {"annotations", r.annotations},
            {"chain", r.chain},
            {"stage_statuses", r.stage_statuses},
            {"error", r.error},
            {"total_ms", r.total_ms}};
}

namespace {

JobState state_of(const std::string& s) {
    const auto st = parse_job_state(s);
    if (!st) throw Error(ErrorCode::IoError, "corrupt job state " + s);
    return *st;
}

constexpr const char* kJobColumns =
    "job_id, tenant_id, image_id, image_ref, state, created_at, lease_expiry, worker, attempts, stage_statuses, error";

}  // namespace

JobQueue::JobQueue(const std::string& path, NowFn now) : db_(path), now_(std::move(now)) {
    db_.exec(R"(
        CREATE TABLE IF NOT EXISTS jobs (
            seq INTEGER PRIMARY KEY AUTOINCREMENT,
            job_id TEXT UNIQUE NOT NULL,
            tenant_id TEXT NOT NULL,
            image_id TEXT NOT NULL,
            image_ref TEXT NOT NULL,
            state TEXT NOT NULL,
            created_at INTEGER NOT NULL,
            lease_expiry INTEGER,
            worker TEXT,
            attempts INTEGER NOT NULL DEFAULT 0,
            stage_statuses TEXT NOT NULL DEFAULT '[]',
            error TEXT NOT NULL DEFAULT '');
        CREATE INDEX IF NOT EXISTS jobs_by_state ON jobs(state, created_at, seq);
        CREATE TABLE IF NOT EXISTS job_results (
            job_id TEXT PRIMARY KEY,
            state TEXT NOT NULL,
            annotations TEXT NOT NULL,
            chain TEXT NOT NULL,
            stage_statuses TEXT NOT NULL,
            error TEXT NOT NULL,
            total_ms REAL NOT NULL);
    )");
}

Job JobQueue::read_job(db::Statement& s) const {
    Job j;
    j.job_id = s.text(0);
    j.tenant_id = s.text(1);
    j.image_id = s.text(2);
    j.image_ref = s.text(3);
    j.state = state_of(s.text(4));
    j.created_at = s.integer(5);
    j.lease_expiry = s.opt_integer(6);
    j.worker = s.opt_text(7);
    j.attempts = static_cast<int>(s.integer(8));
    j.stage_statuses = json::parse(s.text(9)).get<std::vector<StageStatus>>();
    j.error = s.text(10);
    return j;
}

std::string JobQueue::enqueue(const std::string& tenant_id, const std::string& image_id,
                              const std::string& image_ref) {
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    db_.prepare("INSERT INTO jobs (job_id, tenant_id, image_id, image_ref, state, created_at) "
                "VALUES (hex(randomblob(16)), ?, ?, ?, 'Queued', ?)")
        .bind(1, tenant_id)
        .bind(2, image_id)
        .bind(3, image_ref)
        .bind(4, now_())
        .run();
    const auto seq = db_.last_insert_rowid();
    char id[32];
    std::snprintf(id, sizeof id, "job-%06lld", static_cast<long long>(seq));
    db_.prepare("UPDATE jobs SET job_id = ? WHERE seq = ?").bind(1, id).bind(2, seq).run();
    tx.commit();
    return id;
}

int JobQueue::expire_leases() {
    std::lock_guard lock(mu_);
    db_.prepare("UPDATE jobs SET state = 'Queued', lease_expiry = NULL, worker = NULL "
                "WHERE state = 'Running' AND lease_expiry <= ?")
        .bind(1, now_())
        .run();
    return static_cast<int>(db_.changes());
}

std::optional<Job> JobQueue::claim(const std::string& worker, std::int64_t lease_ms) {
    if (lease_ms <= 0) throw Error(ErrorCode::InvalidArgument, "lease must be positive");
    expire_leases();
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    auto pick = db_.prepare("SELECT job_id FROM jobs WHERE state = 'Queued' ORDER BY created_at, seq LIMIT 1");
    if (!pick.step()) return std::nullopt;
    const std::string id = pick.text(0);
    const std::int64_t now = now_();
    db_.prepare("UPDATE jobs SET state = 'Running', worker = ?, lease_expiry = ?, attempts = attempts + 1 "
                "WHERE job_id = ?")
        .bind(1, worker)
        .bind(2, now + lease_ms)
        .bind(3, id)
        .run();
    auto s = db_.query(std::string("SELECT ") + kJobColumns + " FROM jobs WHERE job_id = ?", id);
    s.step();
    Job j = read_job(s);
    tx.commit();
    return j;
}

void JobQueue::complete(const std::string& worker, const JobResult& r) {
    if (r.state != JobState::Done && r.state != JobState::Partial && r.state != JobState::Failed) {
        throw Error(ErrorCode::InvalidArgument, "a result must carry a terminal state");
    }
    const std::string statuses = json(r.stage_statuses).dump();
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    auto exists = db_.query("SELECT 1 FROM jobs WHERE job_id = ?", r.job_id);
    if (!exists.step()) throw Error(ErrorCode::NotFound, "job " + r.job_id);
    db_.prepare("INSERT INTO job_results (job_id, state, annotations, chain, stage_statuses, error, total_ms) "
                "VALUES (?, ?, ?, ?, ?, ?, ?) ON CONFLICT(job_id) DO UPDATE SET state = excluded.state, "
                "annotations = excluded.annotations, chain = excluded.chain, "
                "stage_statuses = excluded.stage_statuses, error = excluded.error, total_ms = excluded.total_ms")
        .bind(1, r.job_id)
        .bind(2, std::string(job_state_name(r.state)))
        .bind(3, r.annotations.dump())
        .bind(4, r.chain.dump())
        .bind(5, statuses)
        .bind(6, r.error)
        .bind(7, r.total_ms)
        .run();
    // A worker whose lease lapsed may still finish; its result is the same, so it
    // only settles the job when nobody else holds it.
    db_.prepare("UPDATE jobs SET state = ?, stage_statuses = ?, error = ?, lease_expiry = NULL, worker = NULL "
                "WHERE job_id = ? AND state = 'Running' AND (worker = ? OR lease_expiry <= ?)")
        .bind(1, std::string(job_state_name(r.state)))
        .bind(2, statuses)
        .bind(3, r.error)
        .bind(4, r.job_id)
        .bind(5, worker)
        .bind(6, now_())
        .run();
    tx.commit();
}

std::optional<Job> JobQueue::find(const std::string& job_id) {
    std::lock_guard lock(mu_);
    auto s = db_.query(std::string("SELECT ") + kJobColumns + " FROM jobs WHERE job_id = ?", job_id);
    if (!s.step()) return std::nullopt;
    return read_job(s);
}

std::optional<JobResult> JobQueue::result(const std::string& job_id) {
    std::lock_guard lock(mu_);
    auto s = db_.query("SELECT job_id, state, annotations, chain, stage_statuses, error, total_ms "
                       "FROM job_results WHERE job_id = ?",
                       job_id);
    if (!s.step()) return std::nullopt;
    JobResult r;
    r.job_id = s.text(0);
    r.state = state_of(s.text(1));
    r.annotations = json::parse(s.text(2));
    r.chain = json::parse(s.text(3));
    r.stage_statuses = json::parse(s.text(4)).get<std::vector<StageStatus>>();
    r.error = s.text(5);
    r.total_ms = s.real(6);
    return r;
}

std::vector<Job> JobQueue::list() {
    std::lock_guard lock(mu_);
    auto s = db_.prepare(std::string("SELECT ") + kJobColumns + " FROM jobs ORDER BY seq");
    std::vector<Job> out;
    while (s.step()) out.push_back(read_job(s));
    return out;
}

std::map<JobState, int> JobQueue::counts() {
    std::lock_guard lock(mu_);
    auto s = db_.prepare("SELECT state, COUNT(*) FROM jobs GROUP BY state");
    std::map<JobState, int> out;
    while (s.step()) out[state_of(s.text(0))] = static_cast<int>(s.integer(1));
    return out;
}

// Worker.

Raster load_image_file(const std::string& path) { return io::read_image(path); }

bool process_one(JobQueue& queue, protocol::StageBackends& backends, const ImageLoader& load,
                 const WorkerOptions& options, bool* killed) {
    if (killed) *killed = false;
    auto job = queue.claim(options.worker_id, options.lease_ms);
    if (!job) return false;
    if (options.kill_after_claim && options.kill_after_claim(*job)) {
        if (killed) *killed = true;
        return false;
    }
    JobResult r;
    r.job_id = job->job_id;
    try {
        const Raster image = load(*job);
        const auto res = cascade::run_cascade(image, job->image_id, options.params, backends, options.run);
        r.state = res.state;
        r.annotations = cascade::annotations_to_json(res.annotations);
        r.chain = cascade::chain_to_json(res.chain);
        r.stage_statuses = res.statuses;
        r.error = res.error;
        r.total_ms = res.total_ms;
    } catch (const std::exception& e) {
        r.state = JobState::Failed;
        r.error = e.what();
        for (Stage s : kAllStages) r.stage_statuses.push_back({s, StageOutcome::Failed, 0.0, "not run"});
    }
    queue.complete(options.worker_id, r);
    return true;
}

int worker_loop(JobQueue& queue, protocol::StageBackends& backends, const ImageLoader& load,
                const WorkerOptions& options, const std::atomic<bool>& stop) {
    int done = 0;
    while (!stop.load()) {
        bool killed = false;
        if (process_one(queue, backends, load, options, &killed)) {
            ++done;
            continue;
        }
        if (killed) break;
        std::this_thread::sleep_for(options.idle_sleep);
    }
    return done;
}

// Status service.

struct StatusServer::Impl {
    httplib::Server server;
};

StatusServer::StatusServer(JobQueue& queue) : impl_(std::make_unique<Impl>()) {
    auto& srv = impl_->server;
    srv.Get("/healthz", [&queue](const httplib::Request&, httplib::Response& res) {
        json counts = json::object();
        for (const auto& [state, n] : queue.counts()) counts[std::string(job_state_name(state))] = n;
        res.set_content(json{{"service", "orchestrator"}, {"status", "ok"}, {"jobs", counts}}.dump(),
                        "application/json");
    });
    srv.Get(R"(/v1/jobs/([A-Za-z0-9_\-]+)/status)", [&queue](const httplib::Request& req, httplib::Response& res) {
        const auto job = queue.find(req.matches[1]);
        if (!job) {
            res.status = 404;
            res.set_content(json{{"error", "NotFound"}, {"detail", "job " + req.matches[1].str()}}.dump(),
                            "application/json");
            return;
        }
        res.set_content(job_to_json(*job).dump(), "application/json");
    });
}

StatusServer::~StatusServer() { stop(); }

int StatusServer::bind(const std::string& host, int port) {
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

void StatusServer::listen() { impl_->server.listen_after_bind(); }

void StatusServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace kayra::orchestrator
