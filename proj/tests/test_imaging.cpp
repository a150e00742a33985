#include "doctest.h"

#include <cmath>
#include <numeric>
#include <random>

#include "kayra/imaging.hpp"
#include "kayra/polygon.hpp"

using namespace kayra;

namespace {

// Independent Otsu oracle: textbook w0*w1*(mu0-mu1)^2 in long double.
long double oracle_between_variance(const std::array<long long, 256>& hist, int t) {
    long double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (int i = 0; i < 256; ++i) {
        if (i <= t) {
            n0 += hist[i];
            s0 += static_cast<long double>(hist[i]) * i;
        } else {
            n1 += hist[i];
            s1 += static_cast<long double>(hist[i]) * i;
        }
    }
    if (n0 == 0 || n1 == 0) return 0;
    const long double n = n0 + n1;
    const long double d = s0 / n0 - s1 / n1;
    return (n0 / n) * (n1 / n) * d * d;
}

Raster random_raster(std::mt19937& rng, int w, int h, int lo = 0, int hi = 255) {
    std::uniform_int_distribution<int> d(lo, hi);
    Raster r(w, h);
    for (auto& p : r.pixels()) p = static_cast<std::uint8_t>(d(rng));
    return r;
}

BinaryMask random_mask(std::mt19937& rng, int w, int h, double density) {
    std::bernoulli_distribution d(density);
    BinaryMask m(w, h);
    for (auto& b : m.bits()) b = d(rng) ? 1 : 0;
    return m;
}

// Union-find oracle for connected components.
struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

// Background reachable from the border under 4-connectivity stays background.
BinaryMask fill_holes(const BinaryMask& m) {
    const int w = m.width(), h = m.height();
    std::vector<char> outside(static_cast<std::size_t>(w * h), 0);
    std::vector<std::pair<int, int>> stack;
    for (int x = 0; x < w; ++x) stack.insert(stack.end(), {{x, 0}, {x, h - 1}});
    for (int y = 0; y < h; ++y) stack.insert(stack.end(), {{0, y}, {w - 1, y}});
    while (!stack.empty()) {
        auto [x, y] = stack.back();
        stack.pop_back();
        if (x < 0 || y < 0 || x >= w || y >= h || m.at(x, y) || outside[y * w + x]) continue;
        outside[y * w + x] = 1;
        stack.insert(stack.end(), {{x + 1, y}, {x - 1, y}, {x, y + 1}, {x, y - 1}});
    }
    BinaryMask out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.set(x, y, !outside[y * w + x]);
    return out;
}

}  // namespace

TEST_CASE("otsu: extreme bimodal image picks the lowest maximizing level") {
    Raster r(10, 10);
    for (int i = 0; i < 100; ++i) r.pixels()[i] = i < 50 ? 0 : 255;
    CHECK(otsu_threshold(r) == 0);
}

TEST_CASE("otsu: constant image is degenerate") {
    Raster r(8, 8, 128);
    try {
        (void)otsu_threshold(r);
        FAIL("expected DegenerateHistogram");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::DegenerateHistogram);
    }
}

TEST_CASE("otsu: two clusters at 60 and 200 split between the means") {
    std::mt19937 rng(5);
    std::normal_distribution<double> a(60, 8), b(200, 8);
    Raster r(64, 64);
    for (int i = 0; i < 64 * 64; ++i) {
        const double v = i % 2 == 0 ? a(rng) : b(rng);
        r.pixels()[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    const int t = otsu_threshold(r);
    CHECK(t > 60);
    CHECK(t < 200);
    // Exhaustive scan oracle.
    const auto hist = histogram(r);
    long double best = -1;
    int best_t = -1;
    for (int k = 0; k <= 254; ++k) {
        const long double v = oracle_between_variance(hist, k);
        if (v > best * (1 + 1e-15L)) {
            best = v;
            best_t = k;
        }
    }
    CHECK(t == best_t);
}

TEST_CASE("otsu: matches exhaustive oracle and is permutation invariant on random images") {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        Raster r = random_raster(rng, 17 + trial, 13, trial % 3 == 0 ? 30 : 0, trial % 3 == 0 ? 90 : 255);
        const int t = otsu_threshold(r);
        const auto hist = histogram(r);
        const long double got = oracle_between_variance(hist, t);
        for (int k = 0; k <= 254; ++k) {
            CHECK(oracle_between_variance(hist, k) <= got * (1 + 1e-12L));
        }
        std::vector<std::uint8_t> shuffled(r.pixels().begin(), r.pixels().end());
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(otsu_threshold(Raster(r.width(), r.height(), shuffled)) == t);
    }
}

TEST_CASE("connected components: small examples") {
    BinaryMask empty(6, 4);
    CHECK(connected_components(empty).components.empty());

    BinaryMask diag(2, 2);
    diag.set(0, 0);
    diag.set(1, 1);
    const auto eight = connected_components(diag, Connectivity::Eight);
    REQUIRE(eight.components.size() == 1);
    CHECK(eight.components[0].area == 2);
    const auto four = connected_components(diag, Connectivity::Four);
    REQUIRE(four.components.size() == 2);
    CHECK(four.components[0].area == 1);
    CHECK(four.components[1].area == 1);

    BinaryMask m(5, 5);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) m.set(x, y);
    for (int x = 2; x < 5; ++x) m.set(x, 4);  // 1x3 bar at row 4, columns 2..4
    const auto cc = connected_components(m);
    REQUIRE(cc.components.size() == 2);
    CHECK(cc.components[0].area == 4);
    CHECK(cc.components[0].bbox == Rect{0, 0, 2, 2});
    CHECK(cc.components[1].area == 3);
    CHECK(cc.components[1].bbox == Rect{2, 4, 3, 1});
}

TEST_CASE("connected components agree with a union-find oracle") {
    std::mt19937 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const int w = 12 + trial % 7, h = 9 + trial % 5;
        const BinaryMask m = random_mask(rng, w, h, 0.45);
        for (auto conn : {Connectivity::Four, Connectivity::Eight}) {
            Dsu dsu(w * h);
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (!m.at(x, y)) continue;
                    for (int dy = 0; dy <= 1; ++dy) {
                        for (int dx = -1; dx <= 1; ++dx) {
                            if (dy == 0 && dx <= 0) continue;
                            if (conn == Connectivity::Four && dx != 0 && dy != 0) continue;
                            const int nx = x + dx, ny = y + dy;
                            if (nx < 0 || nx >= w || ny >= h || !m.at(nx, ny)) continue;
                            dsu.unite(y * w + x, ny * w + nx);
                        }
                    }
                }
            }
            const auto cc = connected_components(m, conn);
            long long total = 0;
            for (const auto& c : cc.components) total += c.area;
            CHECK(total == m.count());
            int expected_label = 0;
            std::vector<int> seen;
            for (int i = 0; i < w * h; ++i) {
                const int x = i % w, y = i / w;
                if (!m.at(x, y)) {
                    CHECK(cc.label_at(x, y) == 0);
                    continue;
                }
                for (int j = 0; j < i; ++j) {
                    const int jx = j % w, jy = j / w;
                    if (!m.at(jx, jy)) continue;
                    CHECK((dsu.find(i) == dsu.find(j)) == (cc.label_at(x, y) == cc.label_at(jx, jy)));
                }
                const int lbl = cc.label_at(x, y);
                if (std::find(seen.begin(), seen.end(), lbl) == seen.end()) {
                    seen.push_back(lbl);
                    CHECK(lbl == ++expected_label);  // first-encounter order
                }
            }
        }
    }
}

TEST_CASE("resize_constrained: documented cases") {
    double s = 0;
    CHECK(constrained_size(1830, 1830, 512, 992, &s) == std::pair{512, 512});
    CHECK(s == 512.0 / 1830);
    CHECK(constrained_size(600, 900, 512, 992, &s) == std::pair{512, 768});
    CHECK(s == doctest::Approx(512.0 / 600));
    CHECK(constrained_size(400, 1000, 512, 992, &s) == std::pair{397, 992});
    CHECK(s == doctest::Approx(992.0 / 1000));
    CHECK(constrained_size(992, 992, 512, 992, &s) == std::pair{512, 512});

    Raster r(600, 900, 77);
    const auto res = resize_constrained(r, 512, 992);
    CHECK(res.image.width() == 512);
    CHECK(res.image.height() == 768);
    CHECK(res.scale == 512.0 / 600);
}

TEST_CASE("resize_constrained never exceeds max_dim and hits min_dim off the cap branch") {
    std::mt19937 rng(1);
    std::uniform_int_distribution<int> d(20, 3000);
    for (int i = 0; i < 500; ++i) {
        const int w = d(rng), h = d(rng);
        double s = 0;
        const auto [ow, oh] = constrained_size(w, h, 512, 992, &s);
        CHECK(ow <= 992);
        CHECK(oh <= 992);
        if (std::lround(std::max(w, h) * 512.0 / std::min(w, h)) <= 992) {
            CHECK(std::abs(std::min(ow, oh) - 512) <= 1);
        }
    }
}

TEST_CASE("pad_edge_replicate") {
    Raster r(2, 2, std::vector<std::uint8_t>{1, 2, 3, 4});
    const Raster p = pad_edge_replicate(r, 3, 3);
    CHECK(std::vector<std::uint8_t>(p.pixels().begin(), p.pixels().end()) ==
          std::vector<std::uint8_t>{1, 2, 2, 3, 4, 4, 3, 4, 4});
    CHECK(pad_edge_replicate(r, 2, 2) == r);
    CHECK_THROWS_AS(pad_edge_replicate(r, 1, 3), Error);

    std::mt19937 rng(2);
    const Raster src = random_raster(rng, 512, 768);
    const Raster big = pad_edge_replicate(src, 992, 992);
    bool ok = true;
    for (int y = 0; y < 768; ++y)
        for (int x = 0; x < 512; ++x) ok = ok && big.at(x, y) == src.at(x, y);
    for (int y = 768; y < 992; ++y)
        for (int x = 0; x < 512; ++x) ok = ok && big.at(x, y) == src.at(x, 767);
    for (int y = 0; y < 992; ++y)
        for (int x = 512; x < 992; ++x) ok = ok && big.at(x, y) == src.at(511, std::min(y, 767));
    CHECK(ok);
}

TEST_CASE("rotate_expand: canvas sizes and invertibility") {
    Raster r(100, 200, 9);
    const auto zero = rotate_expand(r, 0.0);
    CHECK(zero.image == r);
    CHECK(zero.transform.m == AffineTransform::identity().m);

    const auto right = rotate_expand(r, 90.0);
    CHECK(right.image.width() == 200);
    CHECK(right.image.height() == 100);

    for (auto [w, h] : {std::pair{100, 200}, std::pair{37, 81}, std::pair{640, 480}}) {
        const auto [cw, ch] = rotated_canvas_size(w, h, 45.0);
        const double side = (w + h) * std::cos(std::numbers::pi / 4);
        CHECK(cw == static_cast<int>(std::ceil(side - 1e-9)));
        CHECK(ch == static_cast<int>(std::ceil(side - 1e-9)));
        const AffineTransform t = rotation_transform(w, h, 45.0);
        // Corners of the source rectangle (pixel-edge coordinates) land inside the canvas.
        for (PointD c : {PointD{-0.5, -0.5}, PointD{w - 0.5, -0.5}, PointD{-0.5, h - 0.5}, PointD{w - 0.5, h - 0.5}}) {
            const PointD q = t.apply(c);
            CHECK(q.x >= -0.5 - 1e-9);
            CHECK(q.y >= -0.5 - 1e-9);
            CHECK(q.x <= cw - 0.5 + 1e-9);
            CHECK(q.y <= ch - 0.5 + 1e-9);
        }
    }

    std::mt19937 rng(4);
    std::uniform_real_distribution<double> u(0, 300);
    for (double deg : {0.0, 30.0, 45.0, 90.0, 137.0}) {
        const AffineTransform t = rotation_transform(300, 200, deg);
        const AffineTransform inv = t.inverse();
        for (int i = 0; i < 200; ++i) {
            const PointD p{u(rng), u(rng) * 2 / 3};
            const PointD back = inv.apply(t.apply(p));
            CHECK(std::hypot(back.x - p.x, back.y - p.y) <= 0.5);
        }
    }
}

TEST_CASE("rotate_expand turns an axis at phi into phi - degrees") {
    // A vertical bar rotated by -30 ends up with its axis at +30.
    BinaryMask bar(21, 81);
    for (int y = 0; y < 81; ++y)
        for (int x = 8; x < 13; ++x) bar.set(x, y);
    const AffineTransform t = rotation_transform(21, 81, -30.0);
    const auto [cw, ch] = rotated_canvas_size(21, 81, -30.0);
    const BinaryMask rotated = rotate_mask(bar, t, cw, ch);
    const PointD top = t.apply({10, 0});
    const PointD bottom = t.apply({10, 80});
    const double angle = std::atan2(bottom.x - top.x, bottom.y - top.y) * 180 / std::numbers::pi;
    CHECK(angle == doctest::Approx(30.0).epsilon(1e-9));
    CHECK(rotated.count() > 0);
}

TEST_CASE("mask_iou") {
    BinaryMask a(4, 4), b(4, 4);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) a.set(x, y);
    for (int y = 1; y < 3; ++y)
        for (int x = 0; x < 2; ++x) b.set(x, y);
    CHECK(mask_iou(a, a) == 1.0);
    CHECK(mask_iou(a, b) == doctest::Approx(1.0 / 3));
    CHECK(mask_iou(a, b) == mask_iou(b, a));
    BinaryMask c(4, 4);
    c.set(3, 3);
    CHECK(mask_iou(a, c) == 0.0);
    CHECK(mask_iou(BinaryMask(4, 4), BinaryMask(4, 4)) == 0.0);
    CHECK_THROWS_AS(mask_iou(a, BinaryMask(3, 4)), Error);

    std::mt19937 rng(8);
    for (int i = 0; i < 50; ++i) {
        const BinaryMask x = random_mask(rng, 9, 7, 0.3), y = random_mask(rng, 9, 7, 0.3);
        CHECK(mask_iou(x, y) == mask_iou(y, x));
        if (x.any()) CHECK((mask_iou(x, y) == 1.0) == (x == y));
    }
}

TEST_CASE("region helpers agree with full-frame masks") {
    std::mt19937 rng(12);
    for (int i = 0; i < 40; ++i) {
        const BinaryMask a = random_mask(rng, 15, 11, 0.3), b = random_mask(rng, 15, 11, 0.3);
        const Region ra = region_from_mask(a), rb = region_from_mask(b);
        CHECK(region_iou(ra, rb) == doctest::Approx(mask_iou(a, b)));
        const Region u = region_union(ra, rb);
        BinaryMask expect(15, 11);
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 15; ++x) expect.set(x, y, a.at(x, y) || b.at(x, y));
        CHECK(region_to_mask(u, 15, 11) == expect);
    }
}

TEST_CASE("dilate matches brute force") {
    std::mt19937 rng(6);
    for (int r = 0; r <= 3; ++r) {
        const BinaryMask m = random_mask(rng, 20, 14, 0.05);
        const BinaryMask d = dilate(m, r);
        for (int y = 0; y < 14; ++y) {
            for (int x = 0; x < 20; ++x) {
                bool any = false;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int nx = x + dx, ny = y + dy;
                        if (nx >= 0 && ny >= 0 && nx < 20 && ny < 14 && m.at(nx, ny)) any = true;
                    }
                CHECK(d.at(x, y) == any);
            }
        }
    }
}

TEST_CASE("outline tracing: square, translation and exact rasterization round trip") {
    BinaryMask sq(30, 30);
    for (int y = 5; y < 15; ++y)
        for (int x = 5; x < 15; ++x) sq.set(x, y);
    const Polygon local = trace_outline(region_from_mask(sq));
    REQUIRE(local.size() == 4);
    const Polygon world = translate(local, 300, 400);
    for (const auto& corner : {PointD{305, 405}, PointD{315, 405}, PointD{315, 415}, PointD{305, 415}}) {
        CHECK(std::find(world.begin(), world.end(), corner) != world.end());
    }

    // Hole-free random blobs: trace then rasterize gives the same pixels.
    std::mt19937 rng(21);
    for (int trial = 0; trial < 60; ++trial) {
        BinaryMask m(24, 20);
        std::uniform_int_distribution<int> cx(4, 19), cy(4, 15), rad(2, 6);
        for (int k = 0; k < 3; ++k) {
            const int x0 = cx(rng), y0 = cy(rng), rr = rad(rng);
            for (int y = 0; y < 20; ++y)
                for (int x = 0; x < 24; ++x)
                    if ((x - x0) * (x - x0) + (y - y0) * (y - y0) <= rr * rr) m.set(x, y);
        }
        const Region piece = largest_component(region_from_mask(m));
        const Polygon poly = trace_outline(piece);
        REQUIRE(poly.size() >= 4);
        CHECK(is_simple(poly));
        const BinaryMask back = region_to_mask(rasterize(poly), 24, 20);
        CHECK(back == fill_holes(region_to_mask(piece, 24, 20)));
    }
}

TEST_CASE("outline tracing keeps diagonal pinches inside") {
    BinaryMask m(4, 4);
    m.set(0, 0);
    m.set(1, 1);
    m.set(2, 2);
    const Polygon poly = trace_outline(region_from_mask(m));
    const Region back = rasterize(poly);
    CHECK(region_to_mask(back, 4, 4) == m);
}
