#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>
#include <thread>

#include "kayra/protocol.hpp"
#include "kayra/rle.hpp"

using namespace kayra;
using namespace kayra::protocol;
using nlohmann::json;

namespace {

BinaryMask random_mask(std::mt19937& rng, int w, int h, double density) {
    std::bernoulli_distribution d(density);
    BinaryMask m(w, h);
    for (auto& b : m.bits()) b = d(rng) ? 1 : 0;
    return m;
}

Raster random_raster(std::mt19937& rng, int w, int h) {
    std::uniform_int_distribution<int> d(0, 255);
    Raster r(w, h);
    for (auto& p : r.pixels()) p = static_cast<std::uint8_t>(d(rng));
    return r;
}

cascade::Detection random_detection(std::mt19937& rng) {
    std::uniform_int_distribution<int> pos(0, 500), size(1, 40);
    const int w = size(rng), h = size(rng);
    BinaryMask m = random_mask(rng, w, h, 0.6);
    m.set(0, 0);
    return {{{pos(rng), pos(rng), w, h}, m}, std::uniform_real_distribution<double>(0, 1)(rng)};
}

// Rectangle of length L and width W whose long axis points along (sin a, cos a).
BinaryMask rotated_rect(int size, double len, double wid, double deg) {
    const double a = deg * std::numbers::pi / 180.0;
    const double ux = std::sin(a), uy = std::cos(a);
    BinaryMask m(size, size);
    const double c = (size - 1) / 2.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dx = x - c, dy = y - c;
            const double along = dx * ux + dy * uy, across = -dx * uy + dy * ux;
            if (std::abs(along) <= len / 2 && std::abs(across) <= wid / 2) m.set(x, y);
        }
    return m;
}

// Oracle: major eigenvector of the 2x2 covariance via the characteristic polynomial.
double covariance_axis_degrees(const BinaryMask& m) {
    double n = 0, sx = 0, sy = 0;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.at(x, y)) {
                ++n;
                sx += x;
                sy += y;
            }
    const double cx = sx / n, cy = sy / n;
    double a = 0, b = 0, c = 0;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m.at(x, y)) {
                a += (x - cx) * (x - cx);
                b += (x - cx) * (y - cy);
                c += (y - cy) * (y - cy);
            }
    const double lambda = (a + c) / 2 + std::sqrt((a - c) * (a - c) / 4 + b * b);
    // (A - lambda I) v = 0  ->  v = (b, lambda - a)
    double vx = b, vy = lambda - a;
    if (std::abs(vx) + std::abs(vy) < 1e-12) {
        vx = a >= c ? 1 : 0;
        vy = a >= c ? 0 : 1;
    }
    double deg = std::atan2(vx, vy) * 180.0 / std::numbers::pi;
    while (deg <= -90) deg += 180;
    while (deg > 90) deg -= 180;
    return deg;
}

}  // namespace

TEST_CASE("stub_semseg") {
    CHECK_THROWS_AS(stub_semseg(Raster(992, 992, 255)), Error);
    LocalBackends local;
    const auto r = local.semseg({"x", Raster(992, 992, 255), std::nullopt});
    CHECK(r.warning);
    CHECK(std::all_of(r.mask.classes.begin(), r.mask.classes.end(), [](auto v) { return v == 0; }));

    Raster disk(992, 992, 230);
    for (int y = 0; y < 992; ++y)
        for (int x = 0; x < 992; ++x)
            if ((x - 400) * (x - 400) + (y - 500) * (y - 500) <= 80 * 80) disk.at(x, y) = 0;
    const auto sem = stub_semseg(disk);
    long long ones = 0, twos = 0;
    bool exact = true;
    for (int y = 0; y < 992; ++y)
        for (int x = 0; x < 992; ++x) {
            ones += sem.at(x, y) == 1;
            twos += sem.at(x, y) == 2;
            exact = exact && (sem.at(x, y) == 1) == (disk.at(x, y) == 0);
        }
    CHECK(exact);
    CHECK(twos == 0);
    CHECK(ones > 0);
}

TEST_CASE("stub_semseg covers synthetic chromosomes") {
    synth::SyntheticSpec spec;
    spec.seed = 2;
    const auto s = synth::generate_spread(spec);
    const auto in = cascade::prepare_semseg_input(s.image, s.image.bounds(), cascade::CascadeParams{});
    const auto sem = stub_semseg(in.canvas);
    // Foreground within one canvas cell of every GT pixel.
    long long total = 0, hit = 0;
    for (const auto& g : s.truth.instances) {
        for (int y = 0; y < g.mask.bbox.h; ++y)
            for (int x = 0; x < g.mask.bbox.w; ++x) {
                if (!g.mask.mask.at(x, y)) continue;
                ++total;
                const int cx = std::min(991, static_cast<int>((x + g.mask.bbox.x0 + 0.5) * in.scale));
                const int cy = std::min(991, static_cast<int>((y + g.mask.bbox.y0 + 0.5) * in.scale));
                bool near = false;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = std::clamp(cx + dx, 0, 991), ny = std::clamp(cy + dy, 0, 991);
                        near = near || sem.at(nx, ny) != 0;
                    }
                hit += near;
            }
    }
    CHECK(static_cast<double>(hit) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("stub_instances") {
    CHECK(stub_instances(Raster(100, 100, 200), 8).empty());

    synth::SyntheticSpec spec;
    spec.width = 400;
    spec.height = 400;
    spec.chromosome_count = 2;
    spec.classes = {ClassLabel(1), ClassLabel(2)};
    spec.seed = 1;
    const auto s = synth::generate_spread(spec);
    const auto dets = stub_instances(s.image, 64);
    REQUIRE(dets.size() == 2);
    for (const auto& g : s.truth.instances) {
        double best = 0;
        for (const auto& d : dets) best = std::max(best, region_iou(d.region, g.mask));
        CHECK(best >= 0.9);
    }
    for (const auto& d : dets) {
        CHECK(d.score >= 0.5);
        CHECK(d.score <= 1.0);
        CHECK(region_tighten(d.region) == d.region);
    }

    spec.overlap_pairs = 1;
    const auto o = synth::generate_spread(spec);
    const auto merged = stub_instances(o.image, 64);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].region.area() == region_union(o.truth.instances[0].mask, o.truth.instances[1].mask).area());
}

TEST_CASE("stub_classify rotation") {
    BinaryMask vertical(10, 60, true);
    auto r = stub_classify(Raster(10, 60, 50), vertical, false);
    CHECK(r.rotation_sin == doctest::Approx(0.0));
    CHECK(r.rotation_cos == doctest::Approx(1.0));

    BinaryMask horizontal(60, 10, true);
    r = stub_classify(Raster(60, 10, 50), horizontal, false);
    CHECK(r.rotation_sin == doctest::Approx(1.0));
    CHECK(r.rotation_cos == doctest::Approx(0.0).epsilon(1e-9));

    for (double deg : {30.0, -30.0, 60.0, 75.0}) {
        const BinaryMask m = rotated_rect(121, 90, 14, deg);
        r = stub_classify(Raster(121, 121, 50), m, false);
        const double got = std::atan2(r.rotation_sin, r.rotation_cos) * 180.0 / std::numbers::pi;
        CHECK(std::abs(got - deg) <= 1.0);
        CHECK(std::abs(got - covariance_axis_degrees(m)) <= 1e-6);
        const double sum = std::accumulate(r.probs.begin(), r.probs.end(), 0.0);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(r.rotation_sin * r.rotation_sin + r.rotation_cos * r.rotation_cos == doctest::Approx(1.0));
        const auto aug = stub_classify(Raster(121, 121, 50), m, true);
        CHECK(std::abs(std::atan2(aug.rotation_sin, aug.rotation_cos) * 180.0 / std::numbers::pi - deg) <= 2.0);
        CHECK(to_json(aug) == to_json(stub_classify(Raster(121, 121, 50), m, true)));
    }
    CHECK_THROWS_AS(stub_classify(Raster(4, 4), BinaryMask(4, 4), false), Error);
}

TEST_CASE("stub_classify picks the class whose expected area is nearest") {
    for (int k : {1, 9, 22}) {
        const ClassLabel label(k);
        const double target = synth::expected_area(label);
        const int h = static_cast<int>(std::lround(target / synth::kChromosomeWidth));
        BinaryMask m(16, h, true);
        const auto r = stub_classify(Raster(16, h, 50), m, false);
        const double area = 16.0 * h;
        ClassLabel nearest = ClassLabel(1);
        for (int i = 0; i < kClassCount; ++i) {
            const ClassLabel c = ClassLabel::from_index(i);
            if (std::abs(area - synth::expected_area(c)) < std::abs(area - synth::expected_area(nearest))) nearest = c;
        }
        CHECK(argmax_class(r.probs) == nearest);
    }
}

TEST_CASE("wire round trips on randomized instances") {
    std::mt19937 rng(31);
    for (int i = 0; i < 20; ++i) {
        const FrameHint f{static_cast<int>(rng() % 100), static_cast<int>(rng() % 100), 0.25 + (rng() % 100) / 100.0,
                          100, 120};
        SemSegRequest sr{"img" + std::to_string(i), random_raster(rng, 31, 17), i % 2 ? std::optional(f) : std::nullopt};
        const auto sr2 = semseg_request_from_json(json::parse(to_json(sr).dump()));
        CHECK(sr2.image_id == sr.image_id);
        CHECK(sr2.image == sr.image);
        CHECK(sr2.frame == sr.frame);

        cascade::SemanticMask sm(23, 19);
        for (auto& v : sm.classes) v = static_cast<std::uint8_t>(rng() % 3);
        const SemSegResponse sres{sm, i % 3 == 0, "v1"};
        const auto sres2 = semseg_response_from_json(to_json(sres));
        CHECK(sres2.mask == sm);
        CHECK(sres2.warning == sres.warning);

        InstanceResponse ir{{random_detection(rng), random_detection(rng)}, "v2"};
        const auto ir2 = instance_response_from_json(json::parse(to_json(ir).dump()));
        CHECK(ir2.detections == ir.detections);
        CHECK(ir2.model_version == "v2");

        InstanceRequest iq{"a", random_raster(rng, 9, 7), i % 2 ? 45 : 0, f};
        const auto iq2 = instance_request_from_json(to_json(iq));
        CHECK(iq2.image == iq.image);
        CHECK(iq2.angle_tag == iq.angle_tag);

        DedupRequest dq{"d", {random_detection(rng)}, i % 2 ? std::optional(random_mask(rng, 50, 40, 0.5)) : std::nullopt,
                        {0.6, 15.0, 0.2}};
        const auto dq2 = dedup_request_from_json(json::parse(to_json(dq).dump()));
        CHECK(dq2.detections == dq.detections);
        CHECK(dq2.semantic == dq.semantic);
        CHECK(dq2.params == dq.params);

        ClassifyRequest cq{"c", random_raster(rng, 12, 30), random_mask(rng, 12, 30, 0.5), i % 2 == 0, f};
        const auto cq2 = classify_request_from_json(json::parse(to_json(cq).dump()));
        CHECK(cq2.patch == cq.patch);
        CHECK(cq2.mask == cq.mask);
        CHECK(cq2.augmented == cq.augmented);

        ClassifyResponse cr;
        for (auto& p : cr.probs) p = static_cast<double>(rng() % 1000) / 1000.0;
        cr.rotation_sin = 0.6;
        cr.rotation_cos = 0.8;
        cr.model_version = "v3";
        const auto cr2 = classify_response_from_json(json::parse(to_json(cr).dump()));
        CHECK(cr2.probs == cr.probs);
        CHECK(cr2.rotation_sin == cr.rotation_sin);
    }
}

TEST_CASE("RLE round trips up to 992x992") {
    std::mt19937 rng(41);
    for (auto [w, h, d] : {std::tuple{1, 1, 0.5}, std::tuple{992, 992, 0.3}, std::tuple{640, 480, 0.01},
                           std::tuple{992, 992, 0.0}, std::tuple{17, 992, 1.0}}) {
        const BinaryMask m = random_mask(rng, w, h, d);
        CHECK(rle::decode(w, h, rle::encode(m)) == m);
        CHECK(rle::mask_from_json(json::parse(rle::mask_to_json(m).dump())) == m);
    }
    CHECK_THROWS_AS(rle::decode(2, 2, {1, 1}), Error);
    const std::vector<std::uint8_t> bytes{0, 1, 2, 250, 255};
    for (std::size_t n = 0; n <= bytes.size(); ++n) {
        const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
        CHECK(rle::base64_decode(rle::base64_encode(part)) == part);
    }
}

TEST_CASE("oracle backend") {
    auto reg = std::make_shared<OracleRegistry>();
    synth::SyntheticSpec spec;
    spec.seed = 6;
    spec.overlap_pairs = 1;
    const auto s = synth::generate_spread(spec);
    reg->add("s6", s.truth);
    OracleBackends oracle(reg, {});

    CHECK_THROWS_AS(oracle.instances({"nope", Raster(10, 10), 0, FrameHint{0, 0, 1.0, 10, 10}}), Error);
    try {
        (void)oracle.semseg({"nope", Raster(992, 992), FrameHint{}});
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnknownImageId);
    }

    // Zero noise: instances equal the registered masks.
    const Rect frame{0, 0, spec.width, spec.height};
    const auto resp = oracle.instances({"s6", s.image, 0, FrameHint{0, 0, 1.0, frame.w, frame.h}});
    REQUIRE(resp.detections.size() == s.truth.instances.size());
    for (std::size_t i = 0; i < resp.detections.size(); ++i) {
        CHECK(resp.detections[i].region == s.truth.instances[i].mask);
    }
    const auto& g = s.truth.instances[3];
    const auto cls = oracle.classify({"s6", crop(s.image, g.mask.bbox), g.mask.mask, false,
                                      FrameHint{g.mask.bbox.x0, g.mask.bbox.y0, 1.0, g.mask.bbox.w, g.mask.bbox.h}});
    CHECK(argmax_class(cls.probs) == g.label);
    CHECK(Rotation{cls.rotation_sin, cls.rotation_cos}.degrees() == doctest::Approx(g.angle_degrees));

    // Noise: masks stay near the requested IoU.
    OracleBackends noisy(reg, {0.2, 0.0, 3});
    const auto nresp = noisy.instances({"s6", s.image, 0, FrameHint{0, 0, 1.0, frame.w, frame.h}});
    for (std::size_t i = 0; i < nresp.detections.size(); ++i) {
        const double iou = region_iou(nresp.detections[i].region, s.truth.instances[i].mask);
        CHECK(iou < 1.0);
        CHECK(iou > 0.6);
    }
}

TEST_CASE("oracle misclassification flips exactly round(rate * N) instances") {
    auto reg = std::make_shared<OracleRegistry>();
    for (int i = 0; i < 10; ++i) {
        synth::GroundTruth gt;
        gt.width = gt.height = 10;
        for (int k = 0; k < 46; ++k) {
            synth::GtInstance inst;
            inst.id = k;
            gt.instances.push_back(inst);
        }
        reg->add("img" + std::to_string(i), gt);
    }
    REQUIRE(reg->instance_count() == 460);
    int flipped = 0;
    for (int i = 0; i < 10; ++i)
        for (int k = 0; k < 46; ++k) flipped += reg->is_flipped("img" + std::to_string(i), k, 0.1, 99);
    CHECK(flipped == 46);
    int again = 0;
    for (int i = 0; i < 10; ++i)
        for (int k = 0; k < 46; ++k) again += reg->is_flipped("img" + std::to_string(i), k, 0.1, 99);
    CHECK(again == flipped);
    CHECK_FALSE(reg->is_flipped("img0", 0, 0.0, 99));
}

TEST_CASE("stubs are deterministic") {
    synth::SyntheticSpec spec;
    spec.seed = 8;
    spec.width = spec.height = 700;
    spec.chromosome_count = 10;
    const auto s = synth::generate_spread(spec);
    LocalBackends a, b;
    CHECK(to_json(a.instances({"x", s.image, 0, std::nullopt})).dump() ==
          to_json(b.instances({"x", s.image, 0, std::nullopt})).dump());
}

TEST_CASE("HTTP services round trip and map errors") {
    auto reg = std::make_shared<OracleRegistry>();
    synth::SyntheticSpec spec;
    spec.seed = 2;
    spec.width = spec.height = 600;
    spec.chromosome_count = 6;
    const auto s = synth::generate_spread(spec);
    reg->add("s", s.truth);
    auto backends = std::make_shared<OracleBackends>(reg, OracleNoise{});
    ModelServer server(backends, {Service::SemSeg, Service::Instance, Service::Dedup, Service::Classify}, "oracle",
                       kOracleVersion);
    const int port = server.bind("127.0.0.1", 0);
    std::thread t([&] { server.listen(); });
    const std::string url = "http://127.0.0.1:" + std::to_string(port);
    HttpBackends client({url, url, url, url}, std::chrono::milliseconds(5000));

    const FrameHint f{0, 0, 1.0, 600, 600};
    const auto remote = client.instances({"s", s.image, 0, f});
    const auto local = backends->instances({"s", s.image, 0, f});
    CHECK(remote.detections == local.detections);
    CHECK(remote.model_version == kOracleVersion);
    try {
        (void)client.instances({"missing", s.image, 0, f});
        FAIL("expected UnknownImageId");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnknownImageId);
    }
    server.stop();
    t.join();

    HttpBackends dead({url, url, url, url}, std::chrono::milliseconds(300));
    try {
        (void)dead.dedup({"s", {}, std::nullopt, {}});
        FAIL("expected ServiceUnavailable");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ServiceUnavailable);
    }
    CHECK_THROWS_AS(HttpBackends({"ftp://x", url, url, url}, std::chrono::milliseconds(10)), Error);
}
