#include "kayra/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "kayra/rle.hpp"

namespace kayra::synth {

namespace {

constexpr int kSegments = 16;

// Portable uniform draws: the engine is fully specified by the standard, the
// std distributions are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

private:
    std::mt19937_64 engine_;
};

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

int pixel_noise(std::uint64_t seed, int x, int y, int amplitude) {
    const std::uint64_t h = splitmix(seed ^ (static_cast<std::uint64_t>(x) << 32) ^ static_cast<std::uint64_t>(y));
    return static_cast<int>(h % static_cast<std::uint64_t>(2 * amplitude + 1)) - amplitude;
}

struct Pose {
    PointD center;
    double angle = 0.0;    // degrees, axis direction (sin, cos)
    double sagitta = 0.0;  // bend, px
};

/// One rasterized candidate: mask window plus the intensity of each set pixel.
struct Shape {
    Region region;
    Raster intensity;  // same window as region
};

Shape render_shape(ClassLabel label, const Pose& pose, const BandModel& bands, std::uint64_t noise_seed) {
    const double length = class_length(label);
    const double half_w = kChromosomeWidth / 2.0;
    const double chord = length - kChromosomeWidth;
    const double rad = pose.angle * std::numbers::pi / 180.0;
    const PointD dir{std::sin(rad), std::cos(rad)};
    const PointD nrm{std::cos(rad), -std::sin(rad)};

    std::array<PointD, kSegments + 1> pts;
    for (int i = 0; i <= kSegments; ++i) {
        const double t = static_cast<double>(i) / kSegments;
        const double along = (t - 0.5) * chord;
        const double off = pose.sagitta * (1.0 - (2 * t - 1) * (2 * t - 1));
        pts[i] = {pose.center.x + along * dir.x + off * nrm.x, pose.center.y + along * dir.y + off * nrm.y};
    }
    double minx = 1e18, miny = 1e18, maxx = -1e18, maxy = -1e18;
    for (const auto& p : pts) {
        minx = std::min(minx, p.x);
        miny = std::min(miny, p.y);
        maxx = std::max(maxx, p.x);
        maxy = std::max(maxy, p.y);
    }
    const Rect window{static_cast<int>(std::floor(minx - half_w)) - 1, static_cast<int>(std::floor(miny - half_w)) - 1,
                      static_cast<int>(std::ceil(maxx - minx + 2 * half_w)) + 3,
                      static_cast<int>(std::ceil(maxy - miny + 2 * half_w)) + 3};
    Shape shape{{window, BinaryMask(window.w, window.h)}, Raster(window.w, window.h, 0)};
    const double phase = std::fmod(label.value() * 1.7, bands.period_px);
    for (int y = 0; y < window.h; ++y) {
        for (int x = 0; x < window.w; ++x) {
            const PointD p{window.x0 + x + 0.5, window.y0 + y + 0.5};
            double best = 1e18;
            double best_t = 0.0;
            for (int i = 0; i < kSegments; ++i) {
                const PointD a = pts[i];
                const PointD b = pts[i + 1];
                const double vx = b.x - a.x, vy = b.y - a.y;
                const double len2 = vx * vx + vy * vy;
                double u = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
                u = std::clamp(u, 0.0, 1.0);
                const double dx = p.x - (a.x + u * vx), dy = p.y - (a.y + u * vy);
                const double d2 = dx * dx + dy * dy;
                if (d2 < best) {
                    best = d2;
                    best_t = (i + u) / kSegments;
                }
            }
            if (best > half_w * half_w) continue;
            shape.region.mask.set(x, y);
            const double along = best_t * chord;
            const bool cap = best_t <= 0.0 || best_t >= 1.0;
            const double frac = along / bands.period_px + phase / bands.period_px;
            const bool dark = !cap && (frac - std::floor(frac)) < 0.45;
            const int base = dark ? bands.dark : bands.light;
            const int v = base + pixel_noise(noise_seed, window.x0 + x, window.y0 + y, 6);
            shape.intensity.at(x, y) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
        }
    }
    const Rect tight = tight_bbox(shape.region.mask);
    return {{{window.x0 + tight.x0, window.y0 + tight.y0, tight.w, tight.h}, crop(shape.region.mask, tight)},
            crop(shape.intensity, tight)};
}

/// Canvas-sized occupancy of placed instances grown by the minimum gap.
class Occupancy {
public:
    Occupancy(int w, int h, int gap) : forbidden_(w, h), gap_(gap) {}

    [[nodiscard]] bool inside(const Region& r) const { return forbidden_.bounds().contains(r.bbox); }

    [[nodiscard]] bool collides(const Region& r) const {
        for (int y = 0; y < r.bbox.h; ++y) {
            for (int x = 0; x < r.bbox.w; ++x) {
                if (r.mask.at(x, y) && forbidden_.at(x + r.bbox.x0, y + r.bbox.y0)) return true;
            }
        }
        return false;
    }

    void add(const Region& r) {
        const Rect grown = rect_expand_clamp(r.bbox, gap_, forbidden_.bounds());
        BinaryMask local(grown.w, grown.h);
        for (int y = 0; y < grown.h; ++y) {
            for (int x = 0; x < grown.w; ++x) local.set(x, y, r.at(x + grown.x0, y + grown.y0));
        }
        local = dilate(local, gap_);
        for (int y = 0; y < grown.h; ++y) {
            for (int x = 0; x < grown.w; ++x) {
                if (local.at(x, y)) forbidden_.set(x + grown.x0, y + grown.y0);
            }
        }
    }

private:
    BinaryMask forbidden_;
    int gap_;
};

Pose random_pose(Rng& rng, const SyntheticSpec& spec) {
    const double radius = spec.spread_radius_frac * std::min(spec.width, spec.height);
    const double r = radius * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
    Pose p;
    p.center = {spec.width / 2.0 + r * std::cos(phi), spec.height / 2.0 + r * std::sin(phi)};
    p.angle = rng.uniform(-90.0, 90.0);
    p.sagitta = rng.uniform(-0.08, 0.08) * 100.0;
    return p;
}

bool adjacent(const Region& a, const Region& b) {
    // Some pixel of b is 8-adjacent to a pixel of a.
    const Rect grown{a.bbox.x0 - 1, a.bbox.y0 - 1, a.bbox.w + 2, a.bbox.h + 2};
    const Rect overlap = rect_intersection(grown, b.bbox);
    for (int y = overlap.y0; y < overlap.y1(); ++y) {
        for (int x = overlap.x0; x < overlap.x1(); ++x) {
            if (!b.at(x, y)) continue;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (a.at(x + dx, y + dy)) return true;
                }
            }
        }
    }
    return false;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (chromosome_count < 0 || overlap_pairs < 0 || touching_pairs < 0) {
        throw Error(ErrorCode::InvalidArgument, "counts must be non-negative");
    }
    if (overlap_pairs + touching_pairs > chromosome_count / 2) {
        throw Error(ErrorCode::InvalidArgument, "overlap_pairs + touching_pairs exceeds count / 2");
    }
    if (width < 64 || height < 64) throw Error(ErrorCode::InvalidArgument, "canvas too small");
    if (!classes.empty() && static_cast<int>(classes.size()) != chromosome_count) {
        throw Error(ErrorCode::InvalidArgument, "class list length differs from chromosome_count");
    }
    if (background - 40 < std::max(bands.dark, bands.light) + 6) {
        throw Error(ErrorCode::InvalidArgument, "band intensities must stay 40 below the background");
    }
}

std::vector<ClassLabel> default_classes(int count) {
    std::vector<ClassLabel> base;
    for (int k = 1; k <= 22; ++k) {
        base.emplace_back(k);
        base.emplace_back(k);
    }
    base.push_back(ClassLabel::x());
    base.push_back(ClassLabel::x());
    std::vector<ClassLabel> out;
    for (int i = 0; i < count; ++i) out.push_back(base[static_cast<std::size_t>(i) % base.size()]);
    return out;
}

double class_length(ClassLabel label) {
    if (label.is_autosome()) return 150.0 - 4.6 * (label.value() - 1);
    if (label == ClassLabel::x()) return class_length(ClassLabel(7));
    if (label == ClassLabel::y()) return (class_length(ClassLabel(21)) + class_length(ClassLabel(22))) / 2.0;
    return class_length(ClassLabel(12));
}

double expected_area(ClassLabel label) {
    static const std::array<double, kClassCount> table = [] {
        std::array<double, kClassCount> t{};
        for (int i = 0; i < kClassCount; ++i) {
            const Shape s = render_shape(ClassLabel::from_index(i), {{200.0, 200.0}, 0.0, 0.0}, {}, 0);
            t[static_cast<std::size_t>(i)] = static_cast<double>(s.region.area());
        }
        return t;
    }();
    if (label.is_unknown()) return table[11];
    return table[static_cast<std::size_t>(label.index())];
}

double normalize_axis_degrees(double degrees) {
    double a = std::fmod(degrees, 180.0);
    if (a <= -90.0) a += 180.0;
    if (a > 90.0) a -= 180.0;
    return a;
}

double principal_axis_degrees(const Region& r) {
    const PointD c = r.centroid();
    double mxx = 0, myy = 0, mxy = 0;
    for (int y = 0; y < r.bbox.h; ++y) {
        for (int x = 0; x < r.bbox.w; ++x) {
            if (!r.mask.at(x, y)) continue;
            const double dx = x + r.bbox.x0 - c.x;
            const double dy = y + r.bbox.y0 - c.y;
            mxx += dx * dx;
            myy += dy * dy;
            mxy += dx * dy;
        }
    }
    // Major axis at alpha from +x; the axis direction is (sin θ, cos θ), so θ = 90° - alpha.
    const double alpha = 0.5 * std::atan2(2 * mxy, mxx - myy) * 180.0 / std::numbers::pi;
    return normalize_axis_degrees(90.0 - alpha);
}

Spread generate_spread(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::vector<ClassLabel> classes = spec.classes.empty() ? default_classes(spec.chromosome_count) : spec.classes;
    for (std::size_t i = classes.size(); i > 1; --i) std::swap(classes[i - 1], classes[rng.index(i)]);

    Occupancy occ(spec.width, spec.height, spec.min_gap);
    std::vector<Shape> shapes;
    std::vector<ClassLabel> labels;
    std::vector<double> angles;
    GroundTruth gt;
    gt.seed = spec.seed;
    gt.width = spec.width;
    gt.height = spec.height;
    gt.tags = spec.tags;

    auto noise_seed = [&](std::size_t idx) { return splitmix(spec.seed * 1000003ULL + idx); };
    auto accept = [&](Shape s, ClassLabel label, double angle) {
        shapes.push_back(std::move(s));
        labels.push_back(label);
        angles.push_back(normalize_axis_degrees(angle));
    };
    auto fits = [&](const Shape& s) { return occ.inside(s.region) && !occ.collides(s.region); };

    std::size_t next_class = 0;

    if (spec.border_adjacent && next_class < classes.size()) {
        const ClassLabel label = classes[next_class];
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
            Pose pose{{0.0, rng.uniform(0.3, 0.7) * spec.height}, rng.uniform(-20.0, 20.0), 0.0};
            Shape s = render_shape(label, pose, spec.bands, noise_seed(next_class));
            // Slide so the left edge sits 2 px from the border.
            const int shift = 2 - s.region.bbox.x0;
            pose.center.x += shift;
            s = render_shape(label, pose, spec.bands, noise_seed(next_class));
            if (s.region.bbox.x0 < 0 || s.region.bbox.x0 > 4 || !fits(s)) continue;
            occ.add(s.region);
            accept(std::move(s), label, pose.angle);
            placed = true;
        }
        if (!placed) throw Error(ErrorCode::PlacementFailure, "cannot place the border-adjacent instance");
        ++next_class;
    }

    auto place_pair = [&](bool overlapping) {
        const ClassLabel la = classes[next_class];
        const ClassLabel lb = classes[next_class + 1];
        for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
            const Pose pa = random_pose(rng, spec);
            Shape a = render_shape(la, pa, spec.bands, noise_seed(next_class));
            if (!fits(a)) continue;
            for (int inner = 0; inner < 40; ++inner) {
                Pose pb;
                if (overlapping) {
                    const double reach = class_length(la) * 0.3;
                    pb.center = {pa.center.x + rng.uniform(-reach, reach), pa.center.y + rng.uniform(-reach, reach)};
                    pb.angle = pa.angle + (rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(50.0, 90.0);
                    pb.sagitta = rng.uniform(-4.0, 4.0);
                } else {
                    pb.angle = pa.angle + rng.uniform(-10.0, 10.0);
                    pb.center = pa.center;
                    pb.sagitta = 0.0;
                }
                Shape b = render_shape(lb, pb, spec.bands, noise_seed(next_class + 1));
                if (overlapping) {
                    const long long inter = region_intersection(a.region, b.region);
                    const double frac = static_cast<double>(inter) /
                                        static_cast<double>(std::min(a.region.area(), b.region.area()));
                    if (frac < 0.05 || frac > 0.20) continue;
                } else {
                    // Slide along the normal of a until the masks just separate.
                    const double rad = pa.angle * std::numbers::pi / 180.0;
                    const PointD nrm{std::cos(rad), -std::sin(rad)};
                    bool separated = false;
                    for (int step = 1; step < 60; ++step) {
                        Pose moved = pb;
                        moved.center = {pb.center.x + step * nrm.x, pb.center.y + step * nrm.y};
                        Shape cand = render_shape(lb, moved, spec.bands, noise_seed(next_class + 1));
                        if (region_intersection(a.region, cand.region) == 0) {
                            b = std::move(cand);
                            pb = moved;
                            separated = true;
                            break;
                        }
                    }
                    if (!separated || !adjacent(a.region, b.region)) continue;
                }
                if (!fits(b)) continue;
                occ.add(a.region);
                occ.add(b.region);
                accept(std::move(a), la, pa.angle);
                accept(std::move(b), lb, pb.angle);
                const int ia = static_cast<int>(shapes.size()) - 2;
                (overlapping ? gt.overlap_pairs : gt.touching_pairs).emplace_back(ia, ia + 1);
                next_class += 2;
                return;
            }
        }
        throw Error(ErrorCode::PlacementFailure, overlapping ? "cannot place an overlapping pair"
                                                             : "cannot place a touching pair");
    };

    for (int i = 0; i < spec.overlap_pairs; ++i) place_pair(true);
    for (int i = 0; i < spec.touching_pairs; ++i) place_pair(false);

    while (next_class < classes.size()) {
        const ClassLabel label = classes[next_class];
        bool placed = false;
        for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
            const Pose pose = random_pose(rng, spec);
            Shape s = render_shape(label, pose, spec.bands, noise_seed(next_class));
            if (!fits(s)) continue;
            occ.add(s.region);
            accept(std::move(s), label, pose.angle);
            placed = true;
            break;
        }
        if (!placed) throw Error(ErrorCode::PlacementFailure, "canvas cannot fit the requested count");
        ++next_class;
    }

    Raster image(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            image.at(x, y) = static_cast<std::uint8_t>(spec.background + pixel_noise(spec.seed, x, y, 4));
        }
    }
    BinaryMask painted(spec.width, spec.height);
    for (const auto& s : shapes) {
        const Rect& b = s.region.bbox;
        for (int y = 0; y < b.h; ++y) {
            for (int x = 0; x < b.w; ++x) {
                if (!s.region.mask.at(x, y)) continue;
                const int cx = x + b.x0, cy = y + b.y0;
                const std::uint8_t v = s.intensity.at(x, y);
                if (painted.at(cx, cy)) {
                    image.at(cx, cy) = static_cast<std::uint8_t>(std::max(20, std::min<int>(image.at(cx, cy), v) - 25));
                } else {
                    image.at(cx, cy) = v;
                    painted.set(cx, cy);
                }
            }
        }
    }

    for (std::size_t i = 0; i < shapes.size(); ++i) {
        GtInstance inst;
        inst.id = static_cast<int>(i);
        inst.mask = shapes[i].region;
        inst.label = labels[i];
        inst.angle_degrees = angles[i];
        inst.centroid = inst.mask.centroid();
        gt.instances.push_back(std::move(inst));
    }
    return {std::move(image), std::move(gt)};
}

nlohmann::json truth_to_json(const GroundTruth& gt) {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& i : gt.instances) {
        nlohmann::json r = rle::region_to_json(i.mask);
        r["id"] = i.id;
        r["class"] = i.label.str();
        r["angle_degrees"] = i.angle_degrees;
        r["centroid"] = {i.centroid.x, i.centroid.y};
        inst.push_back(std::move(r));
    }
    return {{"seed", gt.seed},
            {"width", gt.width},
            {"height", gt.height},
            {"instances", std::move(inst)},
            {"overlap_pairs", gt.overlap_pairs},
            {"touching_pairs", gt.touching_pairs},
            {"tags", gt.tags}};
}

GroundTruth truth_from_json(const nlohmann::json& j) {
    GroundTruth gt;
    gt.seed = j.value("seed", std::uint64_t{0});
    gt.width = j.at("width").get<int>();
    gt.height = j.at("height").get<int>();
    for (const auto& r : j.at("instances")) {
        GtInstance i;
        i.id = r.at("id").get<int>();
        i.mask = rle::region_from_json(r);
        const auto label = ClassLabel::parse(r.at("class").get<std::string>());
        if (!label) throw Error(ErrorCode::ProtocolError, "bad class in ground truth");
        i.label = *label;
        i.angle_degrees = r.at("angle_degrees").get<double>();
        i.centroid = {r.at("centroid").at(0).get<double>(), r.at("centroid").at(1).get<double>()};
        gt.instances.push_back(std::move(i));
    }
    gt.overlap_pairs = j.value("overlap_pairs", std::vector<std::pair<int, int>>{});
    gt.touching_pairs = j.value("touching_pairs", std::vector<std::pair<int, int>>{});
    gt.tags = j.value("tags", std::map<std::string, std::string>{});
    return gt;
}

}  // namespace kayra::synth
