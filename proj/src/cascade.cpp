#include "kayra/cascade.hpp"

#include <algorithm>
#include <cmath>

namespace kayra::cascade {

void CascadeParams::validate() const {
    if (crop1_margin < 0 || crop2_margin < 0) throw Error(ErrorCode::InvalidArgument, "margins must be >= 0");
    if (!(merge_iou > 0.0 && merge_iou < 1.0)) throw Error(ErrorCode::InvalidArgument, "merge_iou must be in (0,1)");
    if (semantic_agreement_min < 0.0 || semantic_agreement_min > 1.0) {
        throw Error(ErrorCode::InvalidArgument, "semantic_agreement_min must be in [0,1]");
    }
    if (thumb_max_dim < 1 || semseg_min_dim < 1 || semseg_min_dim > semseg_max_dim ||
        semseg_canvas < semseg_max_dim) {
        throw Error(ErrorCode::InvalidArgument, "inconsistent resize constraints");
    }
}

bool RoiChain::valid() const {
    return semseg_scale > 0.0 && !crop1.empty() && !crop2.empty() && image.contains(crop1) && crop1.contains(crop2);
}

BinaryMask SemanticMask::foreground() const {
    BinaryMask m(width, height);
    auto bits = m.bits();
    for (std::size_t i = 0; i < classes.size(); ++i) bits[i] = classes[i] != 0 ? 1 : 0;
    return m;
}

namespace {

int floor_eps(double v) { return static_cast<int>(std::floor(v + 1e-9)); }
int ceil_eps(double v) { return static_cast<int>(std::ceil(v - 1e-9)); }

}  // namespace

Rect prefilter_crop(const Raster& original, const CascadeParams& params) {
    const int w = original.width();
    const int h = original.height();
    const double s = std::min(1.0, static_cast<double>(params.thumb_max_dim) / std::max(w, h));
    const int tw = std::max(1, static_cast<int>(std::lround(w * s)));
    const int th = std::max(1, static_cast<int>(std::lround(h * s)));
    const Raster thumb = (tw == w && th == h) ? original : resize_bilinear(original, tw, th);

    int t = 0;
    try {
        t = otsu_threshold(thumb);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DegenerateHistogram) {
            throw Error(ErrorCode::NoForeground, "prefilter thumbnail has a single intensity");
        }
        throw;
    }
    const LabeledComponents cc = connected_components(threshold(thumb, t, params.dark_foreground));
    Rect box;
    for (const auto& c : cc.components) {
        if (c.area >= params.min_component_area) box = rect_union(box, c.bbox);
    }
    if (box.empty()) throw Error(ErrorCode::NoForeground, "no component survives the area filter");

    // Thumbnail pixel i covers original [i / sx, (i + 1) / sx).
    const double sx = static_cast<double>(tw) / w;
    const double sy = static_cast<double>(th) / h;
    const int x0 = floor_eps(box.x0 / sx);
    const int y0 = floor_eps(box.y0 / sy);
    const int x1 = ceil_eps(box.x1() / sx);
    const int y1 = ceil_eps(box.y1() / sy);
    return rect_expand_clamp({x0, y0, x1 - x0, y1 - y0}, params.crop1_margin, original.bounds());
}

SemsegInput prepare_semseg_input(const Raster& original, const Rect& crop1, const CascadeParams& params) {
    const Raster roi = crop(original, crop1);
    ResizeResult resized = resize_constrained(roi, params.semseg_min_dim, params.semseg_max_dim);
    SemsegInput out;
    out.scale = resized.scale;
    out.content_w = resized.image.width();
    out.content_h = resized.image.height();
    out.canvas = pad_edge_replicate(resized.image, params.semseg_canvas, params.semseg_canvas);
    return out;
}

Rect mask_bbox_crop(const SemanticMask& sem, const Rect& crop1, double semseg_scale, const CascadeParams& params) {
    const auto [cw, ch] = constrained_size(crop1.w, crop1.h, params.semseg_min_dim, params.semseg_max_dim);
    const Rect content = rect_intersection({0, 0, cw, ch}, {0, 0, sem.width, sem.height});
    int minx = content.x1(), miny = content.y1(), maxx = -1, maxy = -1;
    for (int y = content.y0; y < content.y1(); ++y) {
        for (int x = content.x0; x < content.x1(); ++x) {
            if (sem.at(x, y) == 0) continue;
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
        }
    }
    if (maxx < 0) throw Error(ErrorCode::EmptySemanticMask, "semantic mask has no foreground in the content area");

    const int x0 = floor_eps(minx / semseg_scale);
    const int y0 = floor_eps(miny / semseg_scale);
    const int x1 = ceil_eps((maxx + 1) / semseg_scale);
    const int y1 = ceil_eps((maxy + 1) / semseg_scale);
    const Rect local{crop1.x0 + x0, crop1.y0 + y0, x1 - x0, y1 - y0};
    return rect_expand_clamp(local, params.crop2_margin, crop1);
}

BinaryMask upscale_semantic(const SemanticMask& sem, const RoiChain& chain, int tolerance_px) {
    BinaryMask out(chain.crop2.w, chain.crop2.h);
    const double s = chain.semseg_scale;
    for (int y = 0; y < chain.crop2.h; ++y) {
        const double ly = (y + chain.crop2.y0 - chain.crop1.y0 + 0.5) * s;
        const int cy = std::min(static_cast<int>(ly), sem.height - 1);
        for (int x = 0; x < chain.crop2.w; ++x) {
            const double lx = (x + chain.crop2.x0 - chain.crop1.x0 + 0.5) * s;
            const int cx = std::min(static_cast<int>(lx), sem.width - 1);
            if (sem.at(cx, cy) != 0) out.set(x, y);
        }
    }
    return dilate(out, tolerance_px);
}

std::optional<Detection> unrotate_detection(const Detection& det, const AffineTransform& frame_to_canvas,
                                            int frame_w, int frame_h) {
    const AffineTransform canvas_to_frame = frame_to_canvas.inverse();
    const Rect& b = det.region.bbox;
    double minx = 1e18, miny = 1e18, maxx = -1e18, maxy = -1e18;
    for (const PointD corner : {PointD{b.x0 - 0.5, b.y0 - 0.5}, PointD{b.x1() - 0.5, b.y0 - 0.5},
                                PointD{b.x0 - 0.5, b.y1() - 0.5}, PointD{b.x1() - 0.5, b.y1() - 0.5}}) {
        const PointD p = canvas_to_frame.apply(corner);
        minx = std::min(minx, p.x);
        miny = std::min(miny, p.y);
        maxx = std::max(maxx, p.x);
        maxy = std::max(maxy, p.y);
    }
    const Rect window = rect_intersection(
        {static_cast<int>(std::floor(minx)) - 1, static_cast<int>(std::floor(miny)) - 1,
         static_cast<int>(std::ceil(maxx - minx)) + 3, static_cast<int>(std::ceil(maxy - miny)) + 3},
        {0, 0, frame_w, frame_h});
    if (window.empty()) return std::nullopt;
    Region r{window, BinaryMask(window.w, window.h)};
    for (int y = window.y0; y < window.y1(); ++y) {
        for (int x = window.x0; x < window.x1(); ++x) {
            const PointD q = frame_to_canvas.apply({static_cast<double>(x), static_cast<double>(y)});
            const long qx = std::lround(q.x);
            const long qy = std::lround(q.y);
            if (det.region.at(static_cast<int>(qx), static_cast<int>(qy))) r.mask.set(x - window.x0, y - window.y0);
        }
    }
    r = region_tighten(r);
    if (r.empty()) return std::nullopt;
    return Detection{std::move(r), det.score};
}

std::vector<Detection> nms(std::vector<Detection> pool, double iou_threshold) {
    std::stable_sort(pool.begin(), pool.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (auto& cand : pool) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return region_iou(k.region, cand.region) >= iou_threshold;
        });
        if (!suppressed) kept.push_back(std::move(cand));
    }
    return kept;
}

std::vector<Detection> two_angle_merge(const std::vector<Detection>& dets0, const std::vector<Detection>& dets45,
                                       const AffineTransform& rot45, int crop2_w, int crop2_h,
                                       const CascadeParams& params) {
    std::vector<Detection> pool = dets0;
    for (const auto& d : dets45) {
        if (auto back = unrotate_detection(d, rot45, crop2_w, crop2_h)) pool.push_back(std::move(*back));
    }
    return nms(std::move(pool), params.merge_iou);
}

std::vector<Detection> resolve_duplicates(const std::vector<Detection>& dets, const BinaryMask* semantic,
                                          const CascadeParams& params) {
    std::vector<Detection> work = dets;
    std::stable_sort(work.begin(), work.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });

    // (a) merge close, strongly overlapping pairs until nothing changes.
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t i = 0; i < work.size() && !changed; ++i) {
            const PointD ci = work[i].region.centroid();
            for (std::size_t j = i + 1; j < work.size(); ++j) {
                const PointD cj = work[j].region.centroid();
                if (std::hypot(ci.x - cj.x, ci.y - cj.y) > params.dedup_center_dist) continue;
                if (region_iou(work[i].region, work[j].region) < params.merge_iou) continue;
                work[i].region = region_union(work[i].region, work[j].region);
                work[i].score = std::max(work[i].score, work[j].score);
                work.erase(work.begin() + static_cast<std::ptrdiff_t>(j));
                changed = true;
                break;
            }
        }
    }
    if (semantic == nullptr) return work;

    // (b, c) semantic sanity check.
    std::vector<Detection> out;
    for (auto& d : work) {
        const long long area = d.region.area();
        if (area == 0) continue;
        Region inside = region_intersect_mask(d.region, *semantic);
        const double agreement = static_cast<double>(inside.area()) / static_cast<double>(area);
        if (agreement < params.semantic_agreement_min || inside.empty()) continue;
        out.push_back({std::move(inside), d.score});
    }
    return out;
}

std::vector<Polygon> back_transform(const std::vector<Detection>& dets, const RoiChain& chain) {
    std::vector<Polygon> out;
    out.reserve(dets.size());
    for (const auto& d : dets) {
        out.push_back(translate(trace_outline(d.region), chain.crop2.x0, chain.crop2.y0));
    }
    return out;
}

}  // namespace kayra::cascade
