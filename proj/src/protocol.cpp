#include "kayra/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "kayra/rle.hpp"

namespace kayra::protocol {

using cascade::Detection;
using cascade::SemanticMask;
using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
    return h;
}

std::uint64_t instance_key(std::uint64_t seed, const std::string& image_id, int instance_id) {
    return mix(mix(seed ^ hash_string(image_id)) + static_cast<std::uint64_t>(instance_id));
}

json optional_frame(const std::optional<FrameHint>& f) { return f ? to_json(*f) : json(nullptr); }

std::optional<FrameHint> frame_field(const json& j) {
    if (!j.contains("frame") || j.at("frame").is_null()) return std::nullopt;
    return frame_from_json(j.at("frame"));
}

json detections_to_json(const std::vector<Detection>& dets) {
    json arr = json::array();
    for (const auto& d : dets) arr.push_back(detection_to_json(d));
    return arr;
}

std::vector<Detection> detections_from_json(const json& j) {
    std::vector<Detection> out;
    for (const auto& d : j) out.push_back(detection_from_json(d));
    return out;
}

}  // namespace

// --- wire ------------------------------------------------------------------------

json to_json(const FrameHint& f) {
    return {{"x0", f.x0}, {"y0", f.y0}, {"scale", f.scale}, {"width", f.width}, {"height", f.height}};
}

FrameHint frame_from_json(const json& j) {
    return {j.at("x0").get<int>(), j.at("y0").get<int>(), j.at("scale").get<double>(), j.at("width").get<int>(),
            j.at("height").get<int>()};
}

json semantic_to_json(const SemanticMask& m) {
    json runs = json::array();
    for (const auto& [v, n] : rle::encode_values(m.classes)) runs.push_back({v, n});
    return {{"width", m.width}, {"height", m.height}, {"runs", runs}};
}

SemanticMask semantic_from_json(const json& j) {
    SemanticMask m(j.at("width").get<int>(), j.at("height").get<int>());
    std::vector<std::pair<std::uint8_t, std::uint32_t>> runs;
    for (const auto& r : j.at("runs")) runs.emplace_back(r.at(0).get<std::uint8_t>(), r.at(1).get<std::uint32_t>());
    m.classes = rle::decode_values(runs, m.classes.size());
    for (auto v : m.classes) {
        if (v > 2) throw Error(ErrorCode::ProtocolError, "semantic class outside {0, 1, 2}");
    }
    return m;
}

json detection_to_json(const Detection& d) {
    return {{"bbox", {d.region.bbox.x0, d.region.bbox.y0, d.region.bbox.w, d.region.bbox.h}},
            {"rle_mask", rle::mask_to_json(d.region.mask)},
            {"score", d.score}};
}

Detection detection_from_json(const json& j) {
    const json region = {{"bbox", j.at("bbox")}, {"rle", j.at("rle_mask")}};
    Detection d{rle::region_from_json(region), j.at("score").get<double>()};
    if (d.score < 0.0 || d.score > 1.0) throw Error(ErrorCode::ProtocolError, "detection score outside [0, 1]");
    return d;
}

json to_json(const SemSegRequest& r) {
    return {{"image_id", r.image_id}, {"image", rle::raster_to_json(r.image)}, {"frame", optional_frame(r.frame)}};
}

SemSegRequest semseg_request_from_json(const json& j) {
    return {j.at("image_id").get<std::string>(), rle::raster_from_json(j.at("image")), frame_field(j)};
}

json to_json(const SemSegResponse& r) {
    return {{"mask", semantic_to_json(r.mask)}, {"warning", r.warning}, {"model_version", r.model_version}};
}

SemSegResponse semseg_response_from_json(const json& j) {
    return {semantic_from_json(j.at("mask")), j.value("warning", false), j.at("model_version").get<std::string>()};
}

json to_json(const InstanceRequest& r) {
    return {{"image_id", r.image_id},
            {"image", rle::raster_to_json(r.image)},
            {"angle_tag", r.angle_tag},
            {"frame", optional_frame(r.frame)}};
}

InstanceRequest instance_request_from_json(const json& j) {
    InstanceRequest r{j.at("image_id").get<std::string>(), rle::raster_from_json(j.at("image")),
                      j.at("angle_tag").get<int>(), frame_field(j)};
    if (r.angle_tag != 0 && r.angle_tag != 45) throw Error(ErrorCode::ProtocolError, "angle_tag must be 0 or 45");
    return r;
}

json to_json(const InstanceResponse& r) {
    return {{"detections", detections_to_json(r.detections)}, {"model_version", r.model_version}};
}

InstanceResponse instance_response_from_json(const json& j) {
    return {detections_from_json(j.at("detections")), j.at("model_version").get<std::string>()};
}

json to_json(const DedupRequest& r) {
    return {{"image_id", r.image_id},
            {"detections", detections_to_json(r.detections)},
            {"semantic", r.semantic ? rle::mask_to_json(*r.semantic) : json(nullptr)},
            {"params",
             {{"merge_iou", r.params.merge_iou},
              {"dedup_center_dist", r.params.dedup_center_dist},
              {"semantic_agreement_min", r.params.semantic_agreement_min}}}};
}

DedupRequest dedup_request_from_json(const json& j) {
    DedupRequest r;
    r.image_id = j.value("image_id", "");
    r.detections = detections_from_json(j.at("detections"));
    if (j.contains("semantic") && !j.at("semantic").is_null()) r.semantic = rle::mask_from_json(j.at("semantic"));
    const auto& p = j.at("params");
    r.params = {p.at("merge_iou").get<double>(), p.at("dedup_center_dist").get<double>(),
                p.at("semantic_agreement_min").get<double>()};
    return r;
}

json to_json(const DedupResponse& r) {
    return {{"detections", detections_to_json(r.detections)}, {"model_version", r.model_version}};
}

DedupResponse dedup_response_from_json(const json& j) {
    return {detections_from_json(j.at("detections")), j.at("model_version").get<std::string>()};
}

json to_json(const ClassifyRequest& r) {
    return {{"image_id", r.image_id},
            {"patch", rle::raster_to_json(r.patch)},
            {"mask", rle::mask_to_json(r.mask)},
            {"augmented", r.augmented},
            {"frame", optional_frame(r.frame)}};
}

ClassifyRequest classify_request_from_json(const json& j) {
    ClassifyRequest r{j.at("image_id").get<std::string>(), rle::raster_from_json(j.at("patch")),
                      rle::mask_from_json(j.at("mask")), j.value("augmented", false), frame_field(j)};
    if (r.mask.width() != r.patch.width() || r.mask.height() != r.patch.height()) {
        throw Error(ErrorCode::DimensionMismatch, "classify mask and patch differ in size");
    }
    return r;
}

json to_json(const ClassifyResponse& r) {
    return {{"class_probs", r.probs},
            {"rotation_sin", r.rotation_sin},
            {"rotation_cos", r.rotation_cos},
            {"model_version", r.model_version}};
}

ClassifyResponse classify_response_from_json(const json& j) {
    ClassifyResponse r;
    const auto probs = j.at("class_probs").get<std::vector<double>>();
    if (probs.size() != kClassCount) throw Error(ErrorCode::ProtocolError, "class_probs must have 24 entries");
    std::copy(probs.begin(), probs.end(), r.probs.begin());
    r.rotation_sin = j.at("rotation_sin").get<double>();
    r.rotation_cos = j.at("rotation_cos").get<double>();
    r.model_version = j.at("model_version").get<std::string>();
    return r;
}

// --- stubs -----------------------------------------------------------------------

SemanticMask stub_semseg(const Raster& image, bool dark_foreground) {
    const BinaryMask fg = threshold(image, otsu_threshold(image), dark_foreground);
    SemanticMask m(image.width(), image.height());
    std::copy(fg.bits().begin(), fg.bits().end(), m.classes.begin());
    return m;
}

std::vector<Detection> stub_instances(const Raster& image, long long min_area, bool dark_foreground) {
    int t = 0;
    try {
        t = otsu_threshold(image);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DegenerateHistogram) return {};
        throw;
    }
    const auto cc = connected_components(threshold(image, t, dark_foreground), Connectivity::Eight);
    long long max_area = 0;
    for (const auto& c : cc.components) {
        if (c.area >= min_area) max_area = std::max(max_area, c.area);
    }
    std::vector<Detection> out;
    for (std::size_t i = 0; i < cc.components.size(); ++i) {
        const auto& c = cc.components[i];
        if (c.area < min_area) continue;
        out.push_back({cc.region(static_cast<int>(i) + 1),
                       0.5 + 0.5 * static_cast<double>(c.area) / static_cast<double>(max_area)});
    }
    return out;
}

ClassifyResponse stub_classify(const Raster& patch, const BinaryMask& mask, bool augmented) {
    if (mask.width() != patch.width() || mask.height() != patch.height()) {
        throw Error(ErrorCode::DimensionMismatch, "classify mask and patch differ in size");
    }
    const long long area = mask.count();
    if (area == 0) throw Error(ErrorCode::EmptyMask, "classify mask has no pixels");

    // Second moments, optionally with a deterministic sub-pixel jitter per pixel.
    double sx = 0, sy = 0;
    std::vector<PointD> pts;
    pts.reserve(static_cast<std::size_t>(area));
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask.at(x, y)) continue;
            PointD p{static_cast<double>(x), static_cast<double>(y)};
            if (augmented) {
                const std::uint64_t h = mix(0xA5A5ULL ^ (static_cast<std::uint64_t>(x) << 32) ^ static_cast<std::uint64_t>(y));
                p.x += (static_cast<double>(h & 0xFFFF) / 65535.0 - 0.5) * 0.5;
                p.y += (static_cast<double>((h >> 16) & 0xFFFF) / 65535.0 - 0.5) * 0.5;
            }
            sx += p.x;
            sy += p.y;
            pts.push_back(p);
        }
    }
    const double cx = sx / static_cast<double>(area), cy = sy / static_cast<double>(area);
    double mxx = 0, myy = 0, mxy = 0;
    for (const auto& p : pts) {
        mxx += (p.x - cx) * (p.x - cx);
        myy += (p.y - cy) * (p.y - cy);
        mxy += (p.x - cx) * (p.y - cy);
    }
    const double alpha = 0.5 * std::atan2(2 * mxy, mxx - myy) * 180.0 / std::numbers::pi;
    const Rotation rot = Rotation::from_degrees(synth::normalize_axis_degrees(90.0 - alpha));

    ClassifyResponse r;
    double best = -1e300;
    std::array<double, kClassCount> logits{};
    for (int i = 0; i < kClassCount; ++i) {
        logits[i] = -std::abs(static_cast<double>(area) - synth::expected_area(ClassLabel::from_index(i)));
        best = std::max(best, logits[i]);
    }
    double z = 0;
    for (int i = 0; i < kClassCount; ++i) z += r.probs[i] = std::exp(logits[i] - best);
    for (auto& p : r.probs) p /= z;
    r.rotation_sin = rot.sin;
    r.rotation_cos = rot.cos;
    r.model_version = kStubVersion;
    return r;
}

DedupResponse run_dedup(const DedupRequest& req, const std::string& model_version) {
    cascade::CascadeParams p;
    p.merge_iou = req.params.merge_iou;
    p.dedup_center_dist = req.params.dedup_center_dist;
    p.semantic_agreement_min = req.params.semantic_agreement_min;
    p.validate();
    const BinaryMask* sem = req.semantic ? &*req.semantic : nullptr;
    return {cascade::resolve_duplicates(req.detections, sem, p), model_version};
}

SemSegResponse LocalBackends::semseg(const SemSegRequest& req) {
    try {
        return {stub_semseg(req.image, params_.dark_foreground), false, kStubVersion};
    } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateHistogram) throw;
        return {SemanticMask(req.image.width(), req.image.height()), true, kStubVersion};
    }
}

InstanceResponse LocalBackends::instances(const InstanceRequest& req) {
    return {stub_instances(req.image, params_.instance_min_area, params_.dark_foreground), kStubVersion};
}

DedupResponse LocalBackends::dedup(const DedupRequest& req) { return run_dedup(req, kStubVersion); }

ClassifyResponse LocalBackends::classify(const ClassifyRequest& req) {
    return stub_classify(req.patch, req.mask, req.augmented);
}

// --- oracle ----------------------------------------------------------------------

void OracleRegistry::add(const std::string& image_id, synth::GroundTruth truth) {
    std::unique_lock lock(mutex_);
    truths_[image_id] = std::make_shared<const synth::GroundTruth>(std::move(truth));
}

std::shared_ptr<const synth::GroundTruth> OracleRegistry::find(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    const auto it = truths_.find(image_id);
    return it == truths_.end() ? nullptr : it->second;
}

std::size_t OracleRegistry::instance_count() const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& [id, gt] : truths_) n += gt->instances.size();
    return n;
}

bool OracleRegistry::is_flipped(const std::string& image_id, int instance_id, double rate, std::uint64_t seed) const {
    if (rate <= 0.0) return false;
    std::shared_lock lock(mutex_);
    std::vector<std::uint64_t> keys;
    for (const auto& [id, gt] : truths_) {
        for (const auto& inst : gt->instances) keys.push_back(instance_key(seed, id, inst.id));
    }
    const auto k = static_cast<std::size_t>(std::llround(std::min(rate, 1.0) * static_cast<double>(keys.size())));
    if (k == 0) return false;
    std::nth_element(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k - 1), keys.end());
    return instance_key(seed, image_id, instance_id) <= keys[k - 1];
}

namespace {

Region dilate_region(const Region& r, int radius) {
    const Rect bbox{r.bbox.x0 - radius, r.bbox.y0 - radius, r.bbox.w + 2 * radius, r.bbox.h + 2 * radius};
    BinaryMask padded(bbox.w, bbox.h);
    for (int y = 0; y < r.bbox.h; ++y)
        for (int x = 0; x < r.bbox.w; ++x)
            if (r.mask.at(x, y)) padded.set(x + radius, y + radius);
    return {bbox, dilate(padded, radius)};
}

Region erode_region(const Region& r, int radius) {
    BinaryMask inverse(r.bbox.w + 2, r.bbox.h + 2, true);
    for (int y = 0; y < r.bbox.h; ++y)
        for (int x = 0; x < r.bbox.w; ++x)
            if (r.mask.at(x, y)) inverse.set(x + 1, y + 1, false);
    const BinaryMask grown = dilate(inverse, radius);
    Region out{r.bbox, BinaryMask(r.bbox.w, r.bbox.h)};
    for (int y = 0; y < r.bbox.h; ++y)
        for (int x = 0; x < r.bbox.w; ++x) out.mask.set(x, y, !grown.at(x + 1, y + 1));
    return out;
}

/// Grows or shrinks the mask to the radius whose IoU with the original is
/// closest to `target_iou`.
Region degrade_region(const Region& r, double target_iou, bool grow) {
    Region best = r;
    double best_gap = std::abs(1.0 - target_iou);
    for (int radius = 1; radius <= 16; ++radius) {
        Region cand = grow ? dilate_region(r, radius) : erode_region(r, radius);
        if (cand.empty()) break;
        const double iou = region_iou(cand, r);
        const double gap = std::abs(iou - target_iou);
        if (gap < best_gap) {
            best_gap = gap;
            best = region_tighten(cand);
        }
        if (iou < target_iou) break;
    }
    return best;
}

const FrameHint& require_frame(const std::optional<FrameHint>& f) {
    if (!f) throw Error(ErrorCode::ProtocolError, "the oracle needs a frame hint");
    return *f;
}

}  // namespace

std::shared_ptr<const synth::GroundTruth> OracleBackends::truth(const std::string& image_id) const {
    auto gt = registry_->find(image_id);
    if (!gt) throw Error(ErrorCode::UnknownImageId, image_id);
    return gt;
}

SemSegResponse OracleBackends::semseg(const SemSegRequest& req) {
    const auto gt = truth(req.image_id);
    const FrameHint& f = require_frame(req.frame);
    const int cw = std::min(f.width, req.image.width());
    const int ch = std::min(f.height, req.image.height());
    SemanticMask out(req.image.width(), req.image.height());
    std::vector<int> stamp(out.classes.size(), -1);
    std::vector<std::uint8_t> cover(out.classes.size(), 0);
    // A canvas cell is foreground when any instance pixel intersects its footprint.
    for (const auto& inst : gt->instances) {
        const Region& r = inst.mask;
        for (int y = 0; y < r.bbox.h; ++y) {
            const int oy = y + r.bbox.y0 - f.y0;
            const int cy0 = std::max(0, static_cast<int>(std::floor(oy * f.scale)));
            const int cy1 = std::min(ch - 1, static_cast<int>(std::ceil((oy + 1) * f.scale)) - 1);
            for (int x = 0; x < r.bbox.w; ++x) {
                if (!r.mask.at(x, y)) continue;
                const int ox = x + r.bbox.x0 - f.x0;
                const int cx0 = std::max(0, static_cast<int>(std::floor(ox * f.scale)));
                const int cx1 = std::min(cw - 1, static_cast<int>(std::ceil((ox + 1) * f.scale)) - 1);
                for (int cy = cy0; cy <= cy1; ++cy) {
                    for (int cx = cx0; cx <= cx1; ++cx) {
                        const std::size_t i = static_cast<std::size_t>(cy) * out.width + cx;
                        if (stamp[i] == inst.id) continue;
                        stamp[i] = inst.id;
                        if (cover[i] < 2) ++cover[i];
                    }
                }
            }
        }
    }
    out.classes = std::move(cover);
    return {std::move(out), false, kOracleVersion};
}

InstanceResponse OracleBackends::instances(const InstanceRequest& req) {
    const auto gt = truth(req.image_id);
    const FrameHint& f = require_frame(req.frame);
    const Rect frame{f.x0, f.y0, f.width, f.height};
    InstanceResponse resp{{}, kOracleVersion};
    const AffineTransform rot = rotation_transform(f.width, f.height, static_cast<double>(req.angle_tag));
    for (const auto& inst : gt->instances) {
        const Rect clip = rect_intersection(inst.mask.bbox, frame);
        if (clip.empty()) continue;
        Region local{{clip.x0 - f.x0, clip.y0 - f.y0, clip.w, clip.h},
                     crop(inst.mask.mask, {clip.x0 - inst.mask.bbox.x0, clip.y0 - inst.mask.bbox.y0, clip.w, clip.h})};
        local = region_tighten(local);
        if (local.empty()) continue;
        if (noise_.iou_degrade > 0.0) {
            const bool grow = (instance_key(noise_.seed, req.image_id, inst.id) & 1U) == 0;
            local = degrade_region(local, 1.0 - noise_.iou_degrade, grow);
        }
        cascade::Detection det{local, req.angle_tag == 0 ? 1.0 : 0.95};
        if (req.angle_tag != 0) {
            // Forward rotation: the unrotation helper applied with the inverse transform.
            const auto mapped = cascade::unrotate_detection(det, rot.inverse(), req.image.width(), req.image.height());
            if (!mapped) continue;
            det = *mapped;
        } else {
            const Rect inside = rect_intersection(det.region.bbox, {0, 0, f.width, f.height});
            if (inside != det.region.bbox) {
                det.region = region_tighten(
                    {inside, crop(det.region.mask, {inside.x0 - det.region.bbox.x0, inside.y0 - det.region.bbox.y0,
                                                    inside.w, inside.h})});
                if (det.region.empty()) continue;
            }
        }
        resp.detections.push_back(std::move(det));
    }
    return resp;
}

DedupResponse OracleBackends::dedup(const DedupRequest& req) { return run_dedup(req, kOracleVersion); }

ClassifyResponse OracleBackends::classify(const ClassifyRequest& req) {
    const auto gt = truth(req.image_id);
    const FrameHint& f = require_frame(req.frame);
    if (!req.mask.any()) throw Error(ErrorCode::EmptyMask, "classify mask has no pixels");
    const Region query{{f.x0, f.y0, req.mask.width(), req.mask.height()}, req.mask};
    const synth::GtInstance* best = nullptr;
    double best_iou = 0.0;
    for (const auto& inst : gt->instances) {
        if (rect_intersection(inst.mask.bbox, query.bbox).empty()) continue;
        const double iou = region_iou(inst.mask, query);
        if (iou > best_iou) {
            best_iou = iou;
            best = &inst;
        }
    }
    ClassifyResponse r;
    r.model_version = kOracleVersion;
    if (!best) {
        r.probs = uniform_probs();
        return r;
    }
    int idx = best->label.index();
    if (registry_->is_flipped(req.image_id, best->id, noise_.misclass_rate, noise_.seed)) idx = (idx + 1) % kClassCount;
    const double rest = 0.1 / (kClassCount - 1);
    r.probs.fill(rest);
    r.probs[idx] = 0.9;
    const Rotation rot = Rotation::from_degrees(best->angle_degrees);
    r.rotation_sin = rot.sin;
    r.rotation_cos = rot.cos;
    return r;
}

// --- fault injection -------------------------------------------------------------

namespace {
[[noreturn]] void down(const char* what) { throw Error(ErrorCode::ServiceUnavailable, std::string(what) + " is down"); }
}  // namespace

SemSegResponse FaultInjectingBackends::semseg(const SemSegRequest& req) {
    if (plan_.semseg) down("semseg");
    return inner_->semseg(req);
}

InstanceResponse FaultInjectingBackends::instances(const InstanceRequest& req) {
    if (req.angle_tag == 0 ? plan_.instance0 : plan_.instance45) down("instance");
    return inner_->instances(req);
}

DedupResponse FaultInjectingBackends::dedup(const DedupRequest& req) {
    if (plan_.dedup) down("dedup");
    return inner_->dedup(req);
}

ClassifyResponse FaultInjectingBackends::classify(const ClassifyRequest& req) {
    if (plan_.classify) down("classify");
    return inner_->classify(req);
}

}  // namespace kayra::protocol
