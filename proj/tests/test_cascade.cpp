#include "doctest.h"

#include <cmath>
#include <random>

#include "kayra/cascade.hpp"

using namespace kayra;
using namespace kayra::cascade;

namespace {

Detection rect_det(int x0, int y0, int w, int h, double score) {
    Region r{{x0, y0, w, h}, BinaryMask(w, h)};
    for (auto& b : r.mask.bits()) b = 1;
    return {r, score};
}

Raster white_with_blobs(int w, int h, const std::vector<Rect>& blobs) {
    Raster img(w, h, 235);
    for (const auto& b : blobs)
        for (int y = b.y0; y < b.y1(); ++y)
            for (int x = b.x0; x < b.x1(); ++x) img.at(x, y) = 50;
    return img;
}

bool contains_rect(const Rect& outer, const Rect& inner) {
    return inner.x0 >= outer.x0 && inner.y0 >= outer.y0 && inner.x1() <= outer.x1() && inner.y1() <= outer.y1();
}

}  // namespace

TEST_CASE("prefilter: blank image has no foreground") {
    try {
        (void)prefilter_crop(Raster(640, 480, 200), CascadeParams{});
        FAIL("expected NoForeground");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NoForeground);
    }
}

TEST_CASE("prefilter: centred blob is contained within the margin plus thumbnail quantization") {
    const Rect blob{462, 462, 100, 100};
    const Rect crop1 = prefilter_crop(white_with_blobs(1024, 1024, {blob}), CascadeParams{});
    CHECK(contains_rect(crop1, blob));
    // Thumbnail scale 0.25: one thumbnail pixel is 4 original pixels.
    const int slack = 16 + 4 + 1;
    CHECK(blob.x0 - crop1.x0 <= slack);
    CHECK(blob.y0 - crop1.y0 <= slack);
    CHECK(crop1.x1() - blob.x1() <= slack);
    CHECK(crop1.y1() - blob.y1() <= slack);
    CHECK(blob.x0 - crop1.x0 >= 16);
}

TEST_CASE("prefilter: blobs at opposite corners give the union rectangle") {
    const Rect a{40, 40, 60, 60}, b{900, 920, 70, 60};
    const Rect crop1 = prefilter_crop(white_with_blobs(1024, 1024, {a, b}), CascadeParams{});
    CHECK(contains_rect(crop1, a));
    CHECK(contains_rect(crop1, b));
    CHECK(contains_rect(crop1, rect_union(a, b)));
    CHECK(crop1.x0 >= 0);
    CHECK(crop1.x1() <= 1024);
}

TEST_CASE("semseg input is always the fixed canvas size") {
    const CascadeParams p;
    for (auto [w, h] : {std::pair{512, 512}, std::pair{600, 900}, std::pair{1830, 1830}, std::pair{2048, 1536}}) {
        Raster img(w, h, 100);
        const auto in = prepare_semseg_input(img, {0, 0, w, h}, p);
        CHECK(in.canvas.width() == 992);
        CHECK(in.canvas.height() == 992);
    }
    Raster crop(992, 992, 80);
    const auto in = prepare_semseg_input(crop, {0, 0, 992, 992}, p);
    CHECK(in.scale == 512.0 / 992);
    CHECK(in.content_w == 512);
    CHECK(in.content_h == 512);

    // Tall crop: pad columns replicate the last content column.
    Raster tall(1349, 1510);
    for (int y = 0; y < 1510; ++y)
        for (int x = 0; x < 1349; ++x) tall.at(x, y) = static_cast<std::uint8_t>((x + 3 * y) % 256);
    const auto t = prepare_semseg_input(tall, {0, 0, 1349, 1510}, p);
    CHECK(t.scale == 512.0 / 1349);
    bool replicated = true;
    for (int y = 0; y < 992; ++y)
        for (int x = t.content_w; x < 992; ++x)
            replicated = replicated && t.canvas.at(x, y) == t.canvas.at(t.content_w - 1, std::min(y, t.content_h - 1));
    CHECK(replicated);
}

TEST_CASE("mask_bbox_crop") {
    const CascadeParams p;
    SemanticMask empty(992, 992);
    CHECK_THROWS_AS(mask_bbox_crop(empty, {0, 0, 1830, 1830}, 512.0 / 1830, p), Error);

    // Scale 0.5 needs a crop1 whose short side is 1024.
    const Rect crop1{50, 40, 1024, 1984};
    SemanticMask sem(992, 992);
    for (int y = 100; y < 400; ++y)
        for (int x = 100; x < 300; ++x) sem.at(x, y) = 1;
    const Rect crop2 = mask_bbox_crop(sem, crop1, 0.5, p);
    const Rect expected = rect_intersection({50 + 200 - 12, 40 + 200 - 12, 400 + 24, 600 + 24}, crop1);
    CHECK(crop2 == expected);
    // Forward-map crop2 onto the canvas: the block must be covered.
    CHECK((crop2.x0 - crop1.x0) * 0.5 <= 100);
    CHECK((crop2.x1() - crop1.x0) * 0.5 >= 300);

    // Foreground filling the content area gives crop2 = crop1.
    SemanticMask full(992, 992);
    for (int y = 0; y < 992; ++y)
        for (int x = 0; x < 512; ++x) full.at(x, y) = 2;
    CHECK(mask_bbox_crop(full, crop1, 0.5, p) == crop1);
}

TEST_CASE("two_angle_merge examples and idempotence") {
    const CascadeParams p;
    const AffineTransform id = rotation_transform(100, 100, 0.0);
    const Detection d = rect_det(10, 10, 20, 30, 0.8);
    CHECK(two_angle_merge({d}, {d}, id, 100, 100, p).size() == 1);

    const Detection far = rect_det(60, 60, 10, 10, 0.6);
    CHECK(two_angle_merge({d}, {far}, id, 100, 100, p).size() == 2);

    // 10x10 vs 10x8 sharing 8 rows: IoU 0.8.
    const Detection hi = rect_det(0, 0, 10, 10, 0.9), lo = rect_det(0, 2, 10, 8, 0.7);
    CHECK(region_iou(hi.region, lo.region) == doctest::Approx(0.8));
    const auto merged = two_angle_merge({lo}, {hi}, id, 100, 100, p);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].score == 0.9);

    const auto once = two_angle_merge({d, far, hi}, {lo}, id, 100, 100, p);
    CHECK(two_angle_merge(once, {}, id, 100, 100, p) == once);
}

TEST_CASE("two_angle_merge maps rotated detections back") {
    const CascadeParams p;
    const int w = 120, h = 90;
    const AffineTransform rot = rotation_transform(w, h, 45.0);
    const auto [cw, ch] = rotated_canvas_size(w, h, 45.0);
    BinaryMask m(w, h);
    for (int y = 30; y < 60; ++y)
        for (int x = 40; x < 80; ++x) m.set(x, y);
    const BinaryMask rotated = rotate_mask(m, rot, cw, ch);
    const Region rr = region_from_mask(rotated);
    const auto merged = two_angle_merge({}, {{rr, 0.7}}, rot, w, h, p);
    REQUIRE(merged.size() == 1);
    CHECK(region_iou(merged[0].region, region_from_mask(m)) > 0.9);
}

TEST_CASE("resolve_duplicates") {
    const CascadeParams p;
    BinaryMask sem(100, 100);
    for (int y = 0; y < 50; ++y)
        for (int x = 0; x < 100; ++x) sem.set(x, y);

    const Detection outside = rect_det(10, 70, 10, 10, 0.9);
    CHECK(resolve_duplicates({outside}, &sem, p).empty());

    const Detection inside = rect_det(10, 10, 10, 10, 0.9);
    const auto kept = resolve_duplicates({inside}, &sem, p);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0] == inside);

    // 70x40 blocks offset by 10 columns: centroids 10 px apart, IoU 60*40 / 80*40 = 0.75.
    const Detection a = rect_det(20, 5, 70, 40, 0.6), b = rect_det(30, 5, 70, 40, 0.8);
    CHECK(region_iou(a.region, b.region) == doctest::Approx(0.75));
    const auto out = resolve_duplicates({a, b}, &sem, p);
    REQUIRE(out.size() == 1);
    CHECK(out[0].score == 0.8);
    CHECK(out[0].region.area() == 80 * 40);
    CHECK(out[0].region.bbox == Rect{20, 5, 80, 40});

    // No semantic mask: dedup only.
    CHECK(resolve_duplicates({a, b, outside}, nullptr, p).size() == 2);
}

TEST_CASE("back_transform translates by the crop2 origin") {
    RoiChain chain{{0, 0, 1830, 1830}, {100, 120, 1600, 1500}, 512.0 / 1500, 0, 0, {300, 400, 900, 800}};
    REQUIRE(chain.valid());
    CHECK(chain.crop2_to_original({0, 0}) == PointD{300, 400});
    const auto polys = back_transform({rect_det(5, 5, 10, 10, 1.0)}, chain);
    REQUIRE(polys.size() == 1);
    for (const auto& corner : {PointD{305, 405}, PointD{315, 405}, PointD{315, 415}, PointD{305, 415}}) {
        CHECK(std::find(polys[0].begin(), polys[0].end(), corner) != polys[0].end());
    }
}

TEST_CASE("random RoiChains invert coordinates within 1 px") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0, 1);
    double worst = 0;
    for (int c = 0; c < 50; ++c) {
        const int W = 600 + static_cast<int>(u(rng) * 2000), H = 600 + static_cast<int>(u(rng) * 2000);
        const int c1x = static_cast<int>(u(rng) * W / 4), c1y = static_cast<int>(u(rng) * H / 4);
        const int c1w = W - c1x - static_cast<int>(u(rng) * W / 4), c1h = H - c1y - static_cast<int>(u(rng) * H / 4);
        double s = 0;
        constrained_size(c1w, c1h, 512, 992, &s);
        const int c2x = c1x + static_cast<int>(u(rng) * c1w / 4), c2y = c1y + static_cast<int>(u(rng) * c1h / 4);
        const Rect crop2{c2x, c2y, c1x + c1w - c2x, c1y + c1h - c2y};
        const RoiChain chain{{0, 0, W, H}, {c1x, c1y, c1w, c1h}, s, 0, 0, crop2};
        REQUIRE(chain.valid());
        for (int i = 0; i < 1000; ++i) {
            const PointD p{u(rng) * W, u(rng) * H};
            const PointD a = chain.crop2_to_original(chain.original_to_crop2(p));
            const PointD b = chain.canvas_to_original(chain.original_to_canvas(p));
            worst = std::max({worst, std::hypot(a.x - p.x, a.y - p.y), std::hypot(b.x - p.x, b.y - p.y)});
        }
    }
    CHECK(worst <= 1.0);
}
