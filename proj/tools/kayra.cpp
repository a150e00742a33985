// kayra: corpus generation, pipeline runs, services, evaluation and reports.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "kayra/backend.hpp"
#include "kayra/evalstats.hpp"
#include "kayra/image_io.hpp"
#include "kayra/orchestrator.hpp"
#include "kayra/pipeline.hpp"
#include "kayra/synthgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kayra;

namespace {

constexpr int kExitGate = 2;
constexpr int kExitFailed = 1;

void write_json(const fs::path& path, const json& j) {
    const std::string text = j.dump(2) + "\n";
    io::write_file(path.string(), {text.begin(), text.end()});
}

json read_json(const fs::path& path) {
    const auto bytes = io::read_file(path.string());
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
    }
}

// Configuration: the pipeline keys plus evaluation gates.

struct Gates {
    double min_segmentation = 0.0;  // percent Correct
    double min_class_recall = 0.0;  // percent, worst class
};

struct CliConfig {
    orchestrator::PipelineConfig pipeline;
    Gates gates;
};

CliConfig load_cli_config(const std::string& path) {
    json file = path.empty() ? json::object() : read_json(path);
    if (!file.is_object()) throw Error(ErrorCode::InvalidArgument, "config must be a JSON object");
    json gates = {{"min_segmentation", 0.0}, {"min_class_recall", 0.0}};
    if (file.contains("gates")) {
        for (const auto& [k, v] : file["gates"].items()) {
            if (!gates.contains(k) || !v.is_number()) throw Error(ErrorCode::InvalidArgument, "bad gate " + k);
            gates[k] = v;
        }
        file.erase("gates");
    }
    json wrapped = {{"gates", gates}};
    orchestrator::apply_env_overrides(wrapped, "KAYRA", orchestrator::process_env);
    CliConfig c;
    c.pipeline = orchestrator::load_config_doc(file);
    c.gates = {wrapped["gates"]["min_segmentation"].get<double>(), wrapped["gates"]["min_class_recall"].get<double>()};
    return c;
}

// generate

struct GenerateArgs {
    int count = 1;
    std::uint64_t seed = 0;
    std::string out;
    int width = 1830, height = 1830, chromosomes = 46;
    int overlap_pairs = 0, touching_pairs = 0;
    bool border_adjacent = false;
    std::vector<std::string> tags;
};

std::string spread_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "spread_%04d", i);
    return buf;
}

int cmd_generate(const GenerateArgs& a) {
    fs::create_directories(a.out);
    json manifest{{"count", a.count}, {"seed", a.seed}, {"entries", json::array()}};
    for (int i = 0; i < a.count; ++i) {
        synth::SyntheticSpec spec;
        spec.seed = a.seed + static_cast<std::uint64_t>(i);
        spec.width = a.width;
        spec.height = a.height;
        spec.chromosome_count = a.chromosomes;
        spec.overlap_pairs = a.overlap_pairs;
        spec.touching_pairs = a.touching_pairs;
        spec.border_adjacent = a.border_adjacent;
        for (const auto& t : a.tags) {
            const auto eq = t.find('=');
            if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, "tag must be key=value: " + t);
            spec.tags[t.substr(0, eq)] = t.substr(eq + 1);
        }
        const auto spread = synth::generate_spread(spec);
        const std::string name = spread_name(i);
        io::write_png((fs::path(a.out) / (name + ".png")).string(), spread.image);
        write_json(fs::path(a.out) / (name + ".json"), synth::truth_to_json(spread.truth));
        manifest["entries"].push_back({{"image", name + ".png"}, {"truth", name + ".json"}, {"seed", spec.seed}});
    }
    write_json(fs::path(a.out) / "manifest.json", manifest);
    std::cout << "wrote " << a.count << " spreads to " << a.out << "\n";
    return 0;
}

// run

struct RunArgs {
    std::vector<std::string> images;
    std::string backends = "stubs";
    std::string truth_dir;
    std::string out = ".";
    std::string config;
    double misclass_rate = 0.0, iou_degrade = 0.0;
    std::uint64_t noise_seed = 0;
    bool karyogram = true;
};

fs::path truth_path_for(const fs::path& image, const std::string& truth_dir) {
    const fs::path dir = truth_dir.empty() ? image.parent_path() : fs::path(truth_dir);
    return dir / (image.stem().string() + ".json");
}

int cmd_run(const RunArgs& a) {
    const CliConfig cfg = load_cli_config(a.config);
    std::shared_ptr<protocol::StageBackends> backends;
    if (a.backends == "stubs") {
        backends = std::make_shared<protocol::LocalBackends>(cfg.pipeline.cascade);
    } else if (a.backends == "oracle") {
        auto registry = std::make_shared<protocol::OracleRegistry>();
        for (const auto& img : a.images) {
            registry->add(fs::path(img).stem().string(),
                          synth::truth_from_json(read_json(truth_path_for(img, a.truth_dir))));
        }
        backends = std::make_shared<protocol::OracleBackends>(
            registry, protocol::OracleNoise{a.iou_degrade, a.misclass_rate, a.noise_seed}, cfg.pipeline.cascade);
    } else {
        backends = std::make_shared<protocol::HttpBackends>(cfg.pipeline.endpoints, cfg.pipeline.timeouts);
    }
    fs::create_directories(a.out);
    int failures = 0;
    for (const auto& img : a.images) {
        const std::string stem = fs::path(img).stem().string();
        const Raster raster = io::read_image(img);
        const auto res = cascade::run_cascade(raster, stem, cfg.pipeline.cascade, *backends,
                                              cascade::RunOptions{cfg.pipeline.retries});
        const fs::path base = fs::path(a.out) / stem;
        write_json(base.string() + ".annotations.json", cascade::annotations_to_json(res.annotations));
        write_json(base.string() + ".trace.json", cascade::chain_to_json(res.chain));
        write_json(base.string() + ".status.json", {{"state", orchestrator::job_state_name(res.state)},
                                                    {"error", res.error},
                                                    {"total_ms", res.total_ms},
                                                    {"stage_statuses", res.statuses}});
        if (a.karyogram && res.state != orchestrator::JobState::Failed) {
            io::write_png(base.string() + ".karyogram.png", backend::compose_karyogram(res.annotations, raster).image);
        }
        std::cout << stem << ": " << orchestrator::job_state_name(res.state) << ", " << res.annotations.size()
                  << " annotations";
        if (!res.error.empty()) std::cout << " (" << res.error << ")";
        std::cout << "\n";
        if (res.state == orchestrator::JobState::Failed) {
            std::cerr << stem << ": " << res.error << "\n";
            ++failures;
        }
    }
    return failures == 0 ? 0 : kExitFailed;
}

// serve

struct ServeArgs {
    std::string role;
    std::string host = "127.0.0.1";
    int port = -1;
    std::string config;
    std::string truth_dir;
    std::string db = "kayra.db";
    std::string queue_db = "kayra-queue.db";
    std::string tokens;
    int workers = 1;
};

int default_port(const std::string& role, const orchestrator::PipelineConfig& c) {
    auto port_of = [](const std::string& url) {
        const auto colon = url.rfind(':');
        return colon != std::string::npos && colon > 5 ? std::stoi(url.substr(colon + 1)) : 80;
    };
    if (role == "semseg") return port_of(c.endpoints.semseg);
    if (role == "instances") return port_of(c.endpoints.instance);
    if (role == "dedup") return port_of(c.endpoints.dedup);
    if (role == "classify") return port_of(c.endpoints.classify);
    if (role == "oracle") return 8100;
    if (role == "orchestrator") return 8090;
    return 8080;
}

int cmd_serve(const ServeArgs& a) {
    const CliConfig cfg = load_cli_config(a.config);
    const int port = a.port >= 0 ? a.port : default_port(a.role, cfg.pipeline);
    auto announce = [&](int bound) { std::cout << a.role << " listening on " << a.host << ":" << bound << std::endl; };

    const std::map<std::string, protocol::Service> model_roles{{"semseg", protocol::Service::SemSeg},
                                                               {"instances", protocol::Service::Instance},
                                                               {"dedup", protocol::Service::Dedup},
                                                               {"classify", protocol::Service::Classify}};
    if (const auto it = model_roles.find(a.role); it != model_roles.end()) {
        protocol::ModelServer server(std::make_shared<protocol::LocalBackends>(cfg.pipeline.cascade), {it->second},
                                     a.role, protocol::kStubVersion);
        announce(server.bind(a.host, port));
        server.listen();
        return 0;
    }
    if (a.role == "oracle") {
        auto registry = std::make_shared<protocol::OracleRegistry>();
        if (!a.truth_dir.empty()) {
            for (const auto& e : fs::directory_iterator(a.truth_dir)) {
                if (e.path().extension() != ".json" || e.path().filename() == "manifest.json") continue;
                registry->add(e.path().stem().string(), synth::truth_from_json(read_json(e.path())));
            }
        }
        protocol::ModelServer server(
            std::make_shared<protocol::OracleBackends>(registry, protocol::OracleNoise{}, cfg.pipeline.cascade),
            {protocol::Service::SemSeg, protocol::Service::Instance, protocol::Service::Dedup,
             protocol::Service::Classify},
            "oracle", protocol::kOracleVersion);
        announce(server.bind(a.host, port));
        server.listen();
        return 0;
    }
    auto queue = std::make_shared<orchestrator::JobQueue>(a.queue_db);
    if (a.role == "orchestrator") {
        backend::Backend images(a.db, queue);
        const orchestrator::ImageLoader load = [&images](const orchestrator::Job& j) {
            return j.image_ref.rfind("db:", 0) == 0 ? images.load_raster(j.image_ref.substr(3))
                                                    : orchestrator::load_image_file(j.image_ref);
        };
        std::atomic<bool> stop{false};
        std::vector<std::thread> workers;
        for (int i = 0; i < a.workers; ++i) {
            workers.emplace_back([&, i] {
                protocol::HttpBackends remote(cfg.pipeline.endpoints, cfg.pipeline.timeouts);
                orchestrator::WorkerOptions opt;
                opt.worker_id = "worker-" + std::to_string(::getpid()) + "-" + std::to_string(i);
                opt.lease_ms = cfg.pipeline.lease_ms;
                opt.params = cfg.pipeline.cascade;
                opt.run.retries = cfg.pipeline.retries;
                orchestrator::worker_loop(*queue, remote, load, opt, stop);
            });
        }
        orchestrator::StatusServer server(*queue);
        announce(server.bind(a.host, port));
        server.listen();
        stop = true;
        for (auto& w : workers) w.join();
        return 0;
    }
    // backend
    auto store = std::make_shared<backend::Backend>(a.db, queue);
    if (!a.tokens.empty()) store->load_token_file(a.tokens);
    backend::BackendServer server(store);
    announce(server.bind(a.host, port));
    server.listen();
    return 0;
}

// evaluate and report

struct EvaluateArgs {
    std::string pred, truth, out;
    std::string config;
    double iou = 0.5, cross_cover = 0.25, rot_tol = 15.0;
    std::vector<std::string> facets;
    std::optional<double> min_segmentation, min_class_recall;
    std::string system = "kayra";
};

int cmd_evaluate(const EvaluateArgs& a) {
    const CliConfig cfg = load_cli_config(a.config);
    const Gates gates{a.min_segmentation.value_or(cfg.gates.min_segmentation),
                      a.min_class_recall.value_or(cfg.gates.min_class_recall)};
    std::map<std::string, fs::path> truths, preds;
    for (const auto& e : fs::directory_iterator(a.truth)) {
        const auto name = e.path().filename().string();
        if (e.path().extension() == ".json" && name != "manifest.json") truths[e.path().stem().string()] = e.path();
    }
    const std::string suffix = ".annotations.json";
    for (const auto& e : fs::directory_iterator(a.pred)) {
        const auto name = e.path().filename().string();
        if (name.size() > suffix.size() && name.ends_with(suffix)) {
            preds[name.substr(0, name.size() - suffix.size())] = e.path();
        }
    }
    std::vector<std::string> missing;
    for (const auto& [stem, p] : truths)
        if (!preds.contains(stem)) missing.push_back((fs::path(a.pred) / (stem + suffix)).string());
    for (const auto& [stem, p] : preds)
        if (!truths.contains(stem)) missing.push_back((fs::path(a.truth) / (stem + ".json")).string());
    if (!missing.empty()) {
        std::cerr << "missing files:\n";
        for (const auto& m : missing) std::cerr << "  " << m << "\n";
        return kExitFailed;
    }
    if (truths.empty()) throw Error(ErrorCode::InvalidArgument, "no ground truth in " + a.truth);

    eval::MatchParams mp{a.iou, a.cross_cover};
    std::vector<eval::InstanceRecord> all;
    json per_spread = json::object();
    for (const auto& [stem, tpath] : truths) {
        const auto truth = synth::truth_from_json(read_json(tpath));
        json pj = read_json(preds.at(stem));
        if (pj.is_object() && pj.contains("annotations")) pj = pj["annotations"];
        auto recs = eval::evaluate_spread(pj.get<std::vector<Annotation>>(), truth, stem, mp, a.rot_tol);
        int correct = 0, merged = 0, missed = 0, cls = 0, rot = 0;
        for (const auto& r : recs) {
            correct += r.outcome == eval::Outcome::Correct;
            merged += r.outcome == eval::Outcome::MergedWithOther;
            missed += r.outcome == eval::Outcome::Missed;
            cls += r.class_correct;
            rot += r.rotation_correct;
        }
        per_spread[stem] = {{"total", recs.size()}, {"correct", correct}, {"merged_with_other", merged},
                            {"missed", missed}, {"class_correct", cls}, {"rotation_correct", rot}};
        all.insert(all.end(), recs.begin(), recs.end());
    }

    eval::ReportOptions ro;
    ro.facet_keys = a.facets;
    ro.match = mp;
    ro.rot_tol_deg = a.rot_tol;
    const auto report = eval::build_report({{a.system, all}}, ro);

    long long total = static_cast<long long>(all.size()), correct = 0;
    std::map<int, std::pair<long long, long long>> per_class;  // class -> (correct, total)
    for (const auto& r : all) {
        correct += r.outcome == eval::Outcome::Correct;
        auto& pc = per_class[r.gt_class.value()];
        pc.first += r.class_correct;
        ++pc.second;
    }
    const double seg_pct = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    double worst_recall = 100.0;
    for (const auto& [k, pc] : per_class)
        worst_recall = std::min(worst_recall, 100.0 * static_cast<double>(pc.first) / static_cast<double>(pc.second));
    const bool pass = seg_pct + 1e-9 >= gates.min_segmentation && worst_recall + 1e-9 >= gates.min_class_recall;

    json records = json::array();
    for (const auto& r : all) records.push_back(eval::record_to_json(r));
    json data = report.data;
    data["gates"] = {{"min_segmentation", gates.min_segmentation},
                     {"min_class_recall", gates.min_class_recall},
                     {"segmentation", seg_pct},
                     {"worst_class_recall", worst_recall},
                     {"pass", pass}};
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_json(fs::path(a.out) / "records.json", {{"system", a.system}, {"records", records}});
        write_json(fs::path(a.out) / "per_spread.json", per_spread);
        write_json(fs::path(a.out) / "report.json", data);
        io::write_file((fs::path(a.out) / "report.txt").string(), {report.text.begin(), report.text.end()});
    }
    std::cout << report.text;
    std::cout << "gates: segmentation " << seg_pct << "% (min " << gates.min_segmentation << "), worst class recall "
              << worst_recall << "% (min " << gates.min_class_recall << "): " << (pass ? "pass" : "FAIL") << "\n";
    return pass ? 0 : kExitGate;
}

struct ReportArgs {
    std::vector<std::string> systems;
    std::vector<std::string> facets;
    std::string out;
};

int cmd_report(const ReportArgs& a) {
    std::vector<eval::SystemRecords> systems;
    for (const auto& s : a.systems) {
        const auto eq = s.find('=');
        const std::string path = eq == std::string::npos ? s : s.substr(eq + 1);
        const json doc = read_json(path);
        eval::SystemRecords sr;
        sr.name = eq == std::string::npos ? doc.value("system", fs::path(path).stem().string()) : s.substr(0, eq);
        for (const auto& r : doc.is_array() ? doc : doc.at("records")) sr.records.push_back(eval::record_from_json(r));
        systems.push_back(std::move(sr));
    }
    eval::ReportOptions ro;
    ro.facet_keys = a.facets;
    const auto report = eval::build_report(systems, ro);
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        write_json(fs::path(a.out) / "report.json", report.data);
        io::write_file((fs::path(a.out) / "report.txt").string(), {report.text.begin(), report.text.end()});
    }
    std::cout << report.text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kayra: metaphase-spread karyotyping pipeline"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Write a synthetic corpus with ground-truth sidecars");
    g->add_option("--count", gen.count)->check(CLI::PositiveNumber);
    g->add_option("--seed", gen.seed);
    g->add_option("--out", gen.out)->required();
    g->add_option("--width", gen.width)->check(CLI::PositiveNumber);
    g->add_option("--height", gen.height)->check(CLI::PositiveNumber);
    g->add_option("--chromosomes", gen.chromosomes)->check(CLI::NonNegativeNumber);
    g->add_option("--overlap-pairs", gen.overlap_pairs)->check(CLI::NonNegativeNumber);
    g->add_option("--touching-pairs", gen.touching_pairs)->check(CLI::NonNegativeNumber);
    g->add_flag("--border-adjacent", gen.border_adjacent);
    g->add_option("--tag", gen.tags, "key=value recorded in every sidecar");

    RunArgs run;
    auto* r = app.add_subcommand("run", "Run the cascade on images");
    r->add_option("images", run.images)->required()->check(CLI::ExistingFile);
    r->add_option("--backends", run.backends)->check(CLI::IsMember({"stubs", "oracle", "urls"}));
    r->add_option("--truth-dir", run.truth_dir, "oracle sidecars (default: next to each image)");
    r->add_option("--out", run.out);
    r->add_option("--config", run.config)->check(CLI::ExistingFile);
    r->add_option("--misclass-rate", run.misclass_rate)->check(CLI::Range(0.0, 1.0));
    r->add_option("--iou-degrade", run.iou_degrade)->check(CLI::Range(0.0, 1.0));
    r->add_option("--noise-seed", run.noise_seed);
    r->add_flag("!--no-karyogram", run.karyogram);

    ServeArgs serve;
    auto* s = app.add_subcommand("serve", "Start one service role");
    s->add_option("role", serve.role)
        ->required()
        ->check(CLI::IsMember({"backend", "orchestrator", "semseg", "instances", "dedup", "classify", "oracle"}));
    s->add_option("--host", serve.host);
    s->add_option("--port", serve.port);
    s->add_option("--config", serve.config)->check(CLI::ExistingFile);
    s->add_option("--truth-dir", serve.truth_dir)->check(CLI::ExistingDirectory);
    s->add_option("--db", serve.db);
    s->add_option("--queue-db", serve.queue_db);
    s->add_option("--tokens", serve.tokens)->check(CLI::ExistingFile);
    s->add_option("--workers", serve.workers)->check(CLI::PositiveNumber);

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "Score predictions against ground truth");
    e->add_option("--pred", ev.pred)->required()->check(CLI::ExistingDirectory);
    e->add_option("--truth", ev.truth)->required()->check(CLI::ExistingDirectory);
    e->add_option("--out", ev.out);
    e->add_option("--config", ev.config)->check(CLI::ExistingFile);
    e->add_option("--iou", ev.iou)->check(CLI::Range(0.0, 1.0));
    e->add_option("--cross-cover", ev.cross_cover)->check(CLI::Range(0.0, 1.0));
    e->add_option("--rot-tol", ev.rot_tol)->check(CLI::Range(0.0, 90.0));
    e->add_option("--facet", ev.facets);
    e->add_option("--min-segmentation", ev.min_segmentation);
    e->add_option("--min-class-recall", ev.min_class_recall);
    e->add_option("--system", ev.system);

    ReportArgs rep;
    auto* p = app.add_subcommand("report", "Render tables from evaluation records");
    p->add_option("--system", rep.systems, "name=records.json; the first is compared with the rest")->required();
    p->add_option("--facet", rep.facets);
    p->add_option("--out", rep.out);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*g) return cmd_generate(gen);
        if (*r) return cmd_run(run);
        if (*s) return cmd_serve(serve);
        if (*e) return cmd_evaluate(ev);
        if (*p) return cmd_report(rep);
    } catch (const Error& err) {
        std::cerr << "kayra: " << err.what() << "\n";
        return kExitFailed;
    } catch (const std::exception& err) {
        std::cerr << "kayra: " << err.what() << "\n";
        return kExitFailed;
    }
    return 0;
}
