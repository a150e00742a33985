#include "doctest.h"

#include <random>
#include <set>
#include <thread>

#include "httplib.h"

#include "kayra/backend.hpp"
#include "kayra/image_io.hpp"

using namespace kayra;
using namespace kayra::backend;
using nlohmann::json;

namespace {

Polygon rect_poly(double x, double y, double w, double h) { return {{x, y}, {x + w, y}, {x + w, y + h}, {x, y + h}}; }

Annotation rect_annotation(int id, ClassLabel label, int x, int y, int w, int h) {
    Annotation a;
    a.id = id;
    a.polygon = rect_poly(x, y, w, h);
    a.label = label;
    a.probs = asserted_probs(label);
    a.rotation = Rotation::from_degrees(10.0 * id);
    a.score = 0.5 + 0.01 * id;
    return a;
}

std::set<std::pair<int, int>> pixels_of(const Region& r) {
    std::set<std::pair<int, int>> out;
    for (int y = 0; y < r.bbox.h; ++y)
        for (int x = 0; x < r.bbox.w; ++x)
            if (r.mask.at(x, y)) out.insert({r.bbox.x0 + x, r.bbox.y0 + y});
    return out;
}

/// Brute-force pixel set of axis-aligned rectangles.
std::set<std::pair<int, int>> rect_pixels(std::initializer_list<std::array<int, 4>> rects) {
    std::set<std::pair<int, int>> out;
    for (const auto& [x0, y0, w, h] : rects)
        for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) out.insert({x, y});
    return out;
}

std::vector<Annotation> karyotype(const std::map<int, int>& counts) {
    std::vector<Annotation> out;
    int id = 1;
    for (const auto& [cls, n] : counts)
        for (int i = 0; i < n; ++i, ++id) out.push_back(rect_annotation(id, ClassLabel(cls), 30 * id, 10, 8, 20));
    return out;
}

std::map<int, int> normal(bool male) {
    std::map<int, int> m;
    for (int k = 1; k <= 22; ++k) m[k] = 2;
    m[23] = male ? 1 : 2;
    if (male) m[24] = 1;
    return m;
}

struct Env {
    std::shared_ptr<orchestrator::JobQueue> queue = std::make_shared<orchestrator::JobQueue>(":memory:");
    std::shared_ptr<Backend> backend = std::make_shared<Backend>(":memory:", queue);

    std::string add_image(const std::string& tenant, std::vector<Annotation> anns, int w = 200, int h = 80) {
        Raster r(w, h, 230);
        for (const auto& a : anns) {
            const Region reg = rasterize(a.polygon);
            for (const auto& [x, y] : pixels_of(reg))
                if (x < w && y < h) r.at(x, y) = static_cast<std::uint8_t>(20 + a.id);
        }
        const auto rec = backend->ingest(tenant, io::encode_png(r), "scan.png");
        backend->import_annotations(tenant, rec.image_id, std::move(anns));
        return rec.image_id;
    }
};

}  // namespace

TEST_CASE("filename grammar") {
    const auto f = parse_filename("12345_2023_07_PHA_BM.tif");
    REQUIRE(f);
    CHECK(*f == ClinicalFields{"12345", 2023, 7, "PHA", "BM"});
    CHECK(parse_filename("/data/in/P-9_1999_1_x_y.TIFF")->patient_id == "P-9");
    CHECK(parse_filename("a_2020_3_b_c.png")->image_no == 3);
    CHECK_FALSE(parse_filename("12345_23_07_PHA_BM.tif"));
    CHECK_FALSE(parse_filename("12345_2023_x7_PHA_BM.tif"));
    CHECK_FALSE(parse_filename("12345_2023_07_PHA.tif"));
    CHECK_FALSE(parse_filename("12345_2023_07_PHA_BM.jpg"));
    CHECK_FALSE(parse_filename("scan.png"));
}

TEST_CASE("dataset split by patient") {
    std::vector<ImageRecord> recs;
    for (int p = 0; p < 10; ++p) {
        const int n = p == 3 ? 50 : 2;
        for (int i = 0; i < n; ++i) {
            ImageRecord r;
            r.image_id = "img" + std::to_string(p) + "-" + std::to_string(i);
            r.fields = ClinicalFields{"P" + std::to_string(p), 2020, i, "PHA", "PB"};
            recs.push_back(r);
        }
    }
    const auto s = split_dataset_by_patient(recs, {0.8, 0.1, 0.1}, 17);
    CHECK(s.train_patients.size() == 8);
    CHECK(s.val_patients.size() == 1);
    CHECK(s.test_patients.size() == 1);
    CHECK(s.train.size() + s.val.size() + s.test.size() == recs.size());
    std::map<std::string, int> bucket_of;
    for (const auto& [bucket, ids] : {std::pair{0, &s.train}, {1, &s.val}, {2, &s.test}})
        for (const auto& id : *ids) {
            const std::string patient = id.substr(3, id.find('-') - 3);
            if (bucket_of.contains(patient)) CHECK(bucket_of[patient] == bucket);
            bucket_of[patient] = bucket;
        }
    CHECK(bucket_of.size() == 10);

    const auto again = split_dataset_by_patient(recs, {0.8, 0.1, 0.1}, 17);
    CHECK(again.train == s.train);
    CHECK(again.test_patients == s.test_patients);

    recs.push_back(ImageRecord{"orphan", "t", "x.png", 1, 1, std::nullopt, 0});
    try {
        (void)split_dataset_by_patient(recs, {0.8, 0.1, 0.1}, 1);
        FAIL("accepted a record without a patient id");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::MissingPatientId);
    }
    recs.pop_back();
    CHECK_THROWS_AS(split_dataset_by_patient(recs, {0.5, 0.1, 0.1}, 1), Error);
}

TEST_CASE("edit JSON round trip") {
    const std::vector<Edit> edits{DeleteEdit{1},
                                  MergeEdit{{1, 2}, ClassLabel(7)},
                                  MergeEdit{{3, 4, 5}, std::nullopt},
                                  SplitEdit{2, rect_poly(0, 0, 2, 2), rect_poly(2, 0, 2, 2)},
                                  RedrawEdit{3, rect_poly(1, 1, 3, 3)},
                                  ReclassifyEdit{4, ClassLabel::x()},
                                  RotateEdit{5, -12.5},
                                  FlipEdit{6}};
    for (const auto& e : edits) CHECK(edit_to_json(edit_from_json(json::parse(edit_to_json(e).dump()))) == edit_to_json(e));
    CHECK_THROWS_AS(edit_from_json({{"type", "explode"}, {"id", 1}}), Error);
    CHECK_THROWS_AS(edit_from_json({{"type", "reclassify"}, {"id", 1}, {"class", "25"}}), Error);
    CHECK_THROWS_AS(edit_from_json({{"type", "delete"}}), Error);
}

TEST_CASE("edit semantics") {
    const AnnotationSet base = initial_set("img", {rect_annotation(1, ClassLabel(1), 0, 0, 4, 4),
                                                   rect_annotation(2, ClassLabel(2), 4, 0, 4, 4),
                                                   rect_annotation(3, ClassLabel(3), 20, 20, 5, 9)});
    CHECK(base.next_id == 4);

    SUBCASE("delete") {
        const auto s = apply_edit_to(base, DeleteEdit{2});
        CHECK(s.version == 1);
        CHECK(s.annotations.size() == 2);
        CHECK(s.annotations[1].id == 3);
        try {
            (void)apply_edit_to(base, DeleteEdit{9});
            FAIL("deleted a missing id");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::UnknownAnnotation);
        }
    }
    SUBCASE("merge of adjacent squares covers exactly the source pixels") {
        const auto s = apply_edit_to(base, MergeEdit{{2, 1}, ClassLabel(5)});
        REQUIRE(s.annotations.size() == 2);
        const auto& m = s.annotations[0];
        CHECK(m.id == 4);
        CHECK(pixels_of(rasterize(m.polygon)) == rect_pixels({{0, 0, 4, 4}, {4, 0, 4, 4}}));
        CHECK(m.label == ClassLabel(5));
        CHECK(argmax_class(m.probs) == ClassLabel(5));
        CHECK(m.user_asserted);
        CHECK(m.rotation == base.annotations[1].rotation);
        CHECK(s.next_id == 5);

        const AnnotationSet tiny = initial_set("t", {rect_annotation(1, ClassLabel(1), 0, 0, 2, 2),
                                                     rect_annotation(2, ClassLabel(1), 2, 0, 2, 2)});
        const auto t = apply_edit_to(tiny, MergeEdit{{1, 2}, std::nullopt});
        CHECK(pixels_of(rasterize(t.annotations[0].polygon)).size() == 8);
        CHECK(t.annotations[0].label.is_unknown());
        CHECK(t.annotations[0].probs == uniform_probs());

        CHECK_THROWS_AS(apply_edit_to(base, MergeEdit{{1, 3}, std::nullopt}), Error);  // not connected
        CHECK_THROWS_AS(apply_edit_to(base, MergeEdit{{1}, std::nullopt}), Error);
        CHECK_THROWS_AS(apply_edit_to(base, MergeEdit{{1, 1}, std::nullopt}), Error);
    }
    SUBCASE("split") {
        const auto s = apply_edit_to(base, SplitEdit{3, rect_poly(20, 20, 5, 4), rect_poly(20, 24, 5, 5)});
        REQUIRE(s.annotations.size() == 4);
        CHECK(s.annotations[2].id == 4);
        CHECK(s.annotations[3].id == 5);
        CHECK(s.annotations[2].label == ClassLabel(3));
        CHECK(rasterize(s.annotations[3].polygon).area() == 25);
        CHECK_THROWS_AS(apply_edit_to(base, SplitEdit{3, {{0, 0}, {1, 1}}, rect_poly(0, 0, 1, 1)}), Error);
    }
    SUBCASE("redraw, reclassify, rotate, flip") {
        auto s = apply_edit_to(base, RedrawEdit{1, rect_poly(0, 0, 3, 3)});
        CHECK(rasterize(s.annotations[0].polygon).area() == 9);
        s = apply_edit_to(s, ReclassifyEdit{1, ClassLabel::y()});
        CHECK(s.annotations[0].label == ClassLabel::y());
        CHECK(s.annotations[0].user_asserted);
        s = apply_edit_to(s, RotateEdit{2, 30.0});
        CHECK(s.annotations[1].rotation.degrees() == doctest::Approx(50.0));
        s = apply_edit_to(s, FlipEdit{2});
        CHECK(s.annotations[1].rotation.sin == doctest::Approx(-std::sin(50.0 * std::numbers::pi / 180)));
        CHECK(s.annotations[1].rotation.cos == doctest::Approx(std::cos(50.0 * std::numbers::pi / 180)));
        CHECK(s.version == 4);
    }
}

TEST_CASE("store: versions, conflicts, sign-off") {
    Env env;
    env.backend->add_tenant({"a", "Lab A"});
    const auto id = env.add_image("a", {rect_annotation(1, ClassLabel(8), 10, 10, 6, 20),
                                        rect_annotation(2, ClassLabel(8), 30, 10, 6, 20)});
    CHECK(env.backend->annotations("a", id).set.version == 0);
    const auto [st, ev] = env.backend->apply_edit("a", id, DeleteEdit{1}, 0, "rev");
    CHECK(st.set.version == 1);
    CHECK(ev.resulting_version == 1);
    CHECK(ev.actor == "rev");

    try {
        (void)env.backend->apply_edit("a", id, DeleteEdit{2}, 0, "rev");
        FAIL("stale edit accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::VersionConflict);
    }
    CHECK(env.backend->annotations("a", id).set.version == 1);
    CHECK(env.backend->audit("a", id).size() == 1);
    CHECK(env.backend->replay_audit("a", id, 0).annotations.size() == 2);
    CHECK_THROWS_AS(env.backend->replay_audit("a", id, 2), Error);
    CHECK_THROWS_AS(env.backend->annotations("a", id, 5), Error);

    CHECK(env.backend->signoff("a", id, "dr").signed_off);
    const std::vector<Edit> all{DeleteEdit{2}, MergeEdit{{2, 3}, std::nullopt}, SplitEdit{2, rect_poly(0, 0, 1, 1), rect_poly(1, 0, 1, 1)},
                                RedrawEdit{2, rect_poly(0, 0, 2, 2)}, ReclassifyEdit{2, ClassLabel(1)}, RotateEdit{2, 5}, FlipEdit{2}};
    for (const auto& e : all) {
        try {
            (void)env.backend->apply_edit("a", id, e, 1, "rev");
            FAIL("edit on a signed-off set accepted");
        } catch (const Error& err) {
            CHECK(err.code() == ErrorCode::SignedOffImmutable);
        }
    }
    CHECK(env.backend->annotations("a", id).set.version == 1);
    CHECK(env.backend->annotations("a", id).signoff_user == "dr");
    CHECK_FALSE(env.backend->annotations("a", id, 0).signed_off);
}

TEST_CASE("audit replay equals stored snapshots for generated edit sequences") {
    Env env;
    env.backend->add_tenant({"a", "A"});
    std::mt19937 rng(2024);
    for (int seq = 0; seq < 60; ++seq) {
        std::vector<Annotation> anns;
        for (int i = 0; i < 6; ++i) {
            anns.push_back(rect_annotation(i + 1, ClassLabel(1 + static_cast<int>(rng() % 24)), 4 * i, 0, 4, 8 + i));
        }
        const auto id = env.add_image("a", anns, 64, 32);
        AnnotationSet local = env.backend->annotations("a", id).set;
        const int length = static_cast<int>(rng() % 31);
        std::vector<std::string> expected{set_to_json(local).dump()};
        for (int step = 0; step < length; ++step) {
            const auto& list = local.annotations;
            const int pick = list.empty() ? 99 : list[rng() % list.size()].id;
            Edit e;
            switch (rng() % 7) {
                case 0: e = DeleteEdit{pick}; break;
                case 1: {
                    const int other = list.empty() ? 98 : list[rng() % list.size()].id;
                    e = MergeEdit{{pick, other}, ClassLabel(static_cast<int>(rng() % 25))};
                    break;
                }
                case 2: e = SplitEdit{pick, rect_poly(rng() % 40, 0, 2, 3), rect_poly(rng() % 40, 5, 3, 2)}; break;
                case 3: e = RedrawEdit{pick, rect_poly(rng() % 50, rng() % 20, 1 + rng() % 6, 1 + rng() % 6)}; break;
                case 4: e = ReclassifyEdit{pick, ClassLabel(static_cast<int>(rng() % 25))}; break;
                case 5: e = RotateEdit{pick, static_cast<double>(static_cast<int>(rng() % 361) - 180) / 3.0}; break;
                default: e = FlipEdit{pick}; break;
            }
            std::optional<AnnotationSet> next;
            try {
                next = apply_edit_to(local, e);
            } catch (const Error&) {
            }
            if (next) {
                (void)env.backend->apply_edit("a", id, e, local.version, "gen");
                local = *next;
                expected.push_back(set_to_json(local).dump());
            } else {
                CHECK_THROWS_AS(env.backend->apply_edit("a", id, e, local.version, "gen"), Error);
            }
        }
        const int current = env.backend->annotations("a", id).set.version;
        REQUIRE(current == static_cast<int>(expected.size()) - 1);
        for (int v = 0; v <= current; ++v) {
            const std::string stored = set_to_json(env.backend->annotations("a", id, v).set).dump();
            CHECK(stored == expected[static_cast<std::size_t>(v)]);
            CHECK(set_to_json(env.backend->replay_audit("a", id, v)).dump() == stored);
        }
    }
}

TEST_CASE("karyogram grouping") {
    const auto& names = karyogram_group_names();
    CHECK(names[static_cast<std::size_t>(karyogram_group(ClassLabel(7)))] == "6–12");
    CHECK(names[static_cast<std::size_t>(karyogram_group(ClassLabel::x()))] == "X");
    CHECK(names[static_cast<std::size_t>(karyogram_group(ClassLabel::y()))] == "Y");
    CHECK(names[static_cast<std::size_t>(karyogram_group(ClassLabel::unknown()))] == "Unknown");
    CHECK(names[static_cast<std::size_t>(karyogram_group(ClassLabel(21)))] == "19–22");
    std::array<int, kKaryogramGroups> hits{};
    for (int v = 0; v <= 24; ++v) {
        const int g = karyogram_group(ClassLabel(v));
        REQUIRE(g >= 0);
        REQUIRE(g < kKaryogramGroups);
        ++hits[static_cast<std::size_t>(g)];
    }
    CHECK(hits == std::array<int, kKaryogramGroups>{3, 2, 7, 3, 3, 4, 1, 1, 1});

    const auto empty = compose_karyogram({}, Raster(10, 10, 200));
    REQUIRE(empty.groups.size() == 9);
    for (const auto& g : empty.groups) CHECK(g.ids.empty());

    Raster img(200, 100, 230);
    std::vector<Annotation> anns{rect_annotation(1, ClassLabel(7), 10, 10, 6, 20), rect_annotation(2, ClassLabel(6), 40, 10, 6, 12),
                                 rect_annotation(3, ClassLabel(7), 70, 10, 6, 30), rect_annotation(4, ClassLabel::x(), 100, 10, 6, 25),
                                 rect_annotation(5, ClassLabel::unknown(), 130, 10, 6, 9)};
    for (auto& a : anns) a.rotation = {};
    for (int y = 10; y < 40; ++y)
        for (int x = 70; x < 76; ++x) img.at(x, y) = 40;
    const auto layout = compose_karyogram(anns, img);
    CHECK(layout.groups[2].ids == std::vector<int>{2, 3, 1});
    CHECK(layout.groups[6].ids == std::vector<int>{4});
    CHECK(layout.groups[8].ids == std::vector<int>{5});
    long long dark = 0;
    for (auto p : layout.image.pixels()) dark += p == 40;
    CHECK(dark == 6 * 30);
    CHECK(io::decode_image(io::encode_png(layout.image)) == layout.image);
}

TEST_CASE("karyogram turns chromosomes upright") {
    Raster img(100, 100, 230);
    Annotation a = rect_annotation(1, ClassLabel(1), 20, 45, 40, 6);  // horizontal bar
    for (int y = 45; y < 51; ++y)
        for (int x = 20; x < 60; ++x) img.at(x, y) = 30;
    a.rotation = Rotation::from_degrees(90.0);
    const auto layout = compose_karyogram({a}, img);
    int min_x = 1 << 30, max_x = -1, min_y = 1 << 30, max_y = -1;
    for (int y = 0; y < layout.image.height(); ++y)
        for (int x = 0; x < layout.image.width(); ++x)
            if (layout.image.at(x, y) < 100 && x > 110) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
    CHECK(max_y - min_y + 1 >= 38);
    CHECK(max_x - min_x + 1 <= 8);
}

TEST_CASE("ISCN suggestions") {
    CHECK(iscn_suggest(karyotype(normal(false))).text == "46,XX");
    CHECK(iscn_suggest(karyotype(normal(true))).text == "46,XY");
    auto m = normal(false);
    m[8] = 1;
    CHECK(iscn_suggest(karyotype(m)).text == "45,XX,-8");
    m = normal(false);
    m[10] = 1;
    CHECK(iscn_suggest(karyotype(m)).text == "45,XX,-10");
    m = normal(false);
    m[21] = 3;
    CHECK(iscn_suggest(karyotype(m)).text == "47,XX,+21");
    m = normal(true);
    m[13] = 3;
    m[2] = 1;
    CHECK(iscn_suggest(karyotype(m)).text == "46,XY,-2,+13");
    const auto s = iscn_suggest(karyotype(normal(false)));
    CHECK_FALSE(s.uncertain);
    m = normal(false);
    m[0] = 1;
    const auto u = iscn_suggest(karyotype(m));
    CHECK(u.uncertain);
    CHECK(u.text == "47,XX");
    m = normal(false);
    m[23] = 0;
    CHECK(iscn_suggest(karyotype(m)).text == "44");
    m[7] = 3;
    CHECK(iscn_suggest(karyotype(m)).text == "45,+7");
}

TEST_CASE("ingest normalizes and parses") {
    Env env;
    env.backend->add_tenant({"a", "A"});
    Raster r(9, 4);
    for (int i = 0; i < 36; ++i) r.pixels()[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i * 7);
    const auto rec = env.backend->ingest("a", io::encode_tiff(r), "12345_2023_07_PHA_BM.tif");
    CHECK(env.backend->load_raster(rec.image_id) == r);
    REQUIRE(rec.fields);
    CHECK(rec.fields->cultivation == "PHA");
    CHECK(env.backend->image("a", rec.image_id).fields == rec.fields);
    const auto plain = env.backend->ingest("a", io::encode_png(r), "whatever.png");
    CHECK_FALSE(plain.fields);
    const std::string text = "just text";
    try {
        (void)env.backend->ingest("a", {text.begin(), text.end()}, "notes.tif");
        FAIL("accepted text");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnsupportedFormat);
    }
    CHECK(env.backend->images("a").size() == 2);
}

TEST_CASE("job results become version 0") {
    Env env;
    env.backend->add_tenant({"a", "A"});
    env.backend->add_tenant({"b", "B"});
    synth::SyntheticSpec spec;
    spec.seed = 1;
    spec.width = spec.height = 600;
    spec.chromosome_count = 6;
    const auto sp = synth::generate_spread(spec);
    const auto rec = env.backend->ingest("a", io::encode_png(sp.image), "P1_2024_1_PHA_PB.png");
    const auto job_id = env.backend->submit_job("a", rec.image_id);
    CHECK_THROWS_AS(env.backend->job("b", job_id), Error);
    CHECK(env.backend->job("a", job_id)["state"] == "Queued");

    protocol::LocalBackends stubs;
    orchestrator::WorkerOptions opt;
    CHECK(orchestrator::process_one(*env.queue, stubs,
                                    [&](const orchestrator::Job& j) { return env.backend->load_raster(j.image_id); }, opt));
    const auto j = env.backend->job("a", job_id);
    CHECK(j["state"] == "Done");
    CHECK(j["result"]["annotations"].size() == 6);
    const auto set = env.backend->annotations("a", rec.image_id);
    CHECK(set.set.version == 0);
    CHECK(set.set.annotations.size() == 6);
    CHECK(set.set.next_id == 7);
}

TEST_CASE("tenant isolation over HTTP") {
    Env env;
    const std::vector<std::string> tenants{"alpha", "beta", "gamma"};
    std::map<std::string, std::vector<std::string>> owned;
    std::mt19937 rng(5);
    for (const auto& t : tenants) {
        env.backend->add_tenant({t, t});
        env.backend->add_token("tok-" + t, t);
        const int n = 1 + static_cast<int>(rng() % 3);
        for (int i = 0; i < n; ++i) {
            owned[t].push_back(env.add_image(t, {rect_annotation(1, ClassLabel(1), 2, 2, 4, 8),
                                                 rect_annotation(2, ClassLabel(1), 10, 2, 4, 8)}));
        }
    }
    std::map<std::string, std::string> job_owner;
    for (const auto& t : tenants) job_owner[env.backend->submit_job(t, owned[t][0])] = t;

    BackendServer server(env.backend);
    const int port = server.bind("127.0.0.1", 0);
    std::thread th([&] { server.listen(); });
    httplib::Client c("127.0.0.1", port);

    CHECK(c.Get("/v1/images")->status == 401);
    CHECK(c.Get("/v1/images", {{"Authorization", "Bearer nope"}})->status == 401);

    const std::vector<std::pair<std::string, std::string>> reads{
        {"GET", ""}, {"GET", "/annotations"}, {"GET", "/audit"}, {"GET", "/replay?version=0"},
        {"GET", "/karyogram"}, {"GET", "/iscn"}, {"GET", "/raster"}};
    const std::vector<std::pair<std::string, std::string>> writes{
        {"/edits", R"({"edit": {"type": "delete", "id": 1}, "expected_version": 0})"},
        {"/jobs", ""},
        {"/signoff", R"({"user": "x"})"}};

    int foreign_success = 0, own_success = 0, checks = 0;
    for (int trial = 0; trial < 120; ++trial) {
        const auto& caller = tenants[rng() % tenants.size()];
        const auto& owner = tenants[rng() % tenants.size()];
        const auto& image = owned[owner][rng() % owned[owner].size()];
        const httplib::Headers auth{{"Authorization", "Bearer tok-" + caller}};
        const bool foreign = caller != owner;
        httplib::Result res;
        if (rng() % 2 == 0) {
            const auto& [m, suffix] = reads[rng() % reads.size()];
            res = c.Get("/v1/images/" + image + suffix, auth);
        } else if (foreign) {
            const auto& [suffix, body] = writes[rng() % writes.size()];
            res = c.Post("/v1/images/" + image + suffix, auth, body, "application/json");
        } else {
            res = c.Get("/v1/images/" + image + "/iscn", auth);
        }
        REQUIRE(res);
        ++checks;
        if (foreign) {
            CHECK(res->status == 404);
            foreign_success += res->status < 300;
        } else {
            CHECK(res->status == 200);
            own_success += res->status < 300;
        }
    }
    for (const auto& [job, owner] : job_owner)
        for (const auto& t : tenants) {
            const auto res = c.Get("/v1/jobs/" + job, {{"Authorization", "Bearer tok-" + t}});
            CHECK(res->status == (t == owner ? 200 : 404));
            foreign_success += t != owner && res->status < 300;
        }
    CHECK(foreign_success == 0);
    CHECK(own_success > 0);
    // Foreign writes left everything untouched.
    for (const auto& t : tenants)
        for (const auto& id : owned[t]) {
            const auto st = env.backend->annotations(t, id);
            CHECK(st.set.version == 0);
            CHECK_FALSE(st.signed_off);
        }

    // Own edits and conflicts map to the documented statuses.
    const httplib::Headers alpha{{"Authorization", "Bearer tok-alpha"}};
    const std::string img = owned["alpha"][0];
    auto r = c.Post("/v1/images/" + img + "/edits", alpha,
                    R"({"edit": {"type": "reclassify", "id": 1, "class": "21"}, "expected_version": 0})", "application/json");
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["annotations"]["version"] == 1);
    r = c.Post("/v1/images/" + img + "/edits", alpha,
               R"({"edit": {"type": "flip", "id": 1}, "expected_version": 0})", "application/json");
    CHECK(r->status == 409);
    CHECK(json::parse(r->body)["error"] == "VersionConflict");
    r = c.Post("/v1/images/" + img + "/edits", alpha,
               R"({"edit": {"type": "flip", "id": 77}, "expected_version": 1})", "application/json");
    CHECK(r->status == 404);
    CHECK(json::parse(r->body)["error"] == "UnknownAnnotation");
    CHECK(c.Post("/v1/images/" + img + "/signoff", alpha, "{}", "application/json")->status == 200);
    r = c.Post("/v1/images/" + img + "/edits", alpha,
               R"({"edit": {"type": "flip", "id": 1}, "expected_version": 1})", "application/json");
    CHECK(r->status == 409);
    CHECK(json::parse(r->body)["error"] == "SignedOffImmutable");
    const auto k = c.Get("/v1/images/" + img + "/karyogram", alpha);
    CHECK(k->get_header_value("Content-Type") == "image/png");

    httplib::MultipartFormDataItems items{{"file", std::string("not an image"), "x.tif", "image/tiff"}};
    CHECK(c.Post("/v1/images", alpha, items)->status == 415);
    server.stop();
    th.join();
}
