#include "kayra/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <numeric>

namespace kayra::cascade {

using orchestrator::JobState;
using orchestrator::Stage;
using orchestrator::StageOutcome;
using orchestrator::StageStatus;
using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename T>
struct Attempt {
    std::optional<T> value;
    std::string error;
};

template <typename F>
auto with_retry(int retries, F&& call) -> Attempt<decltype(call())> {
    Attempt<decltype(call())> out;
    for (int i = 0; i <= retries; ++i) {
        try {
            out.value = call();
            return out;
        } catch (const std::exception& e) {
            out.error = e.what();
        }
    }
    return out;
}

/// Keeps the part of each detection inside a w x h frame; drops the empty ones.
std::vector<Detection> clip_to_frame(std::vector<Detection> dets, int w, int h) {
    std::vector<Detection> out;
    for (auto& d : dets) {
        const Rect inside = rect_intersection(d.region.bbox, {0, 0, w, h});
        if (inside.empty()) continue;
        if (inside != d.region.bbox) {
            d.region = region_tighten(
                {inside, crop(d.region.mask, {inside.x0 - d.region.bbox.x0, inside.y0 - d.region.bbox.y0, inside.w,
                                              inside.h})});
        }
        if (d.region.empty()) continue;
        d.score = std::clamp(d.score, 0.0, 1.0);
        out.push_back(std::move(d));
    }
    return out;
}

void check_classify_response(const protocol::ClassifyResponse& r) {
    const double sum = std::accumulate(r.probs.begin(), r.probs.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-6) throw Error(ErrorCode::ProtocolError, "class probabilities do not sum to 1");
    const double norm = r.rotation_sin * r.rotation_sin + r.rotation_cos * r.rotation_cos;
    if (std::abs(norm - 1.0) > 1e-6) throw Error(ErrorCode::ProtocolError, "rotation is not a unit vector");
}

}  // namespace

CascadeResult run_cascade(const Raster& original, const std::string& image_id, const CascadeParams& params,
                          protocol::StageBackends& backends, const RunOptions& options) {
    params.validate();
    const auto started = Clock::now();
    CascadeResult res;
    std::map<Stage, StageStatus> statuses;
    auto record = [&](Stage s, StageOutcome o, double ms, std::string detail = {}) {
        statuses[s] = {s, o, ms, std::move(detail)};
    };
    auto finish = [&]() -> CascadeResult {
        for (Stage s : orchestrator::kAllStages) {
            const auto it = statuses.find(s);
            res.statuses.push_back(it != statuses.end() ? it->second
                                                        : StageStatus{s, StageOutcome::Failed, 0.0, "not run"});
        }
        res.total_ms = ms_since(started);
        return std::move(res);
    };
    auto fail = [&](std::string why) -> CascadeResult {
        res.state = JobState::Failed;
        res.error = std::move(why);
        res.annotations.clear();
        return finish();
    };

    res.chain.image = original.bounds();

    // 1. Prefilter.
    auto t = Clock::now();
    Rect crop1;
    try {
        crop1 = prefilter_crop(original, params);
        record(Stage::Prefilter, StageOutcome::Ok, ms_since(t));
    } catch (const std::exception& e) {
        record(Stage::Prefilter, StageOutcome::Failed, ms_since(t), e.what());
        return fail(std::string("prefilter: ") + e.what());
    }
    res.chain.crop1 = crop1;
    res.chain.crop2 = crop1;

    // 2-3. Resize + pad, semantic segmentation.
    t = Clock::now();
    const SemsegInput in = prepare_semseg_input(original, crop1, params);
    res.chain.semseg_scale = in.scale;
    const protocol::FrameHint canvas_frame{crop1.x0, crop1.y0, in.scale, in.content_w, in.content_h};
    auto sem = with_retry(options.retries, [&] {
        auto r = backends.semseg({image_id, in.canvas, canvas_frame});
        if (r.mask.width != in.canvas.width() || r.mask.height != in.canvas.height()) {
            throw Error(ErrorCode::ProtocolError, "semantic mask size differs from the request");
        }
        return r;
    });
    std::optional<SemanticMask> semantic;
    if (sem.value) {
        semantic = std::move(sem.value->mask);
        record(Stage::SemSeg, StageOutcome::Ok, ms_since(t), sem.value->warning ? "warning: constant input" : "");
    } else {
        record(Stage::SemSeg, StageOutcome::Degraded, ms_since(t), sem.error + "; crop2 = crop1");
    }

    // 4. Mask-bbox crop.
    t = Clock::now();
    if (semantic) {
        try {
            res.chain.crop2 = mask_bbox_crop(*semantic, crop1, in.scale, params);
            record(Stage::MaskCrop, StageOutcome::Ok, ms_since(t));
        } catch (const Error& e) {
            semantic.reset();
            record(Stage::MaskCrop, StageOutcome::Degraded, ms_since(t), std::string(e.what()) + "; crop2 = crop1");
        }
    } else {
        record(Stage::MaskCrop, StageOutcome::Degraded, ms_since(t), "no semantic mask; crop2 = crop1");
    }
    const Rect crop2 = res.chain.crop2;

    // 5. Instances at two angles, issued concurrently.
    const Raster crop2_image = crop(original, crop2);
    const auto rotated = rotate_expand(crop2_image, params.second_angle);
    const protocol::FrameHint crop2_frame{crop2.x0, crop2.y0, 1.0, crop2.w, crop2.h};
    const int second_tag = static_cast<int>(std::lround(params.second_angle));
    auto run_angle = [&](const Raster& img, int tag) {
        const auto t0 = Clock::now();
        auto r = with_retry(options.retries, [&] { return backends.instances({image_id, img, tag, crop2_frame}); });
        return std::pair{std::move(r), ms_since(t0)};
    };
    auto fut45 = std::async(std::launch::async, run_angle, std::cref(rotated.image), second_tag);
    auto [inst0, ms0] = run_angle(crop2_image, 0);
    auto [inst45, ms45] = fut45.get();

    if (!inst0.value && !inst45.value) {
        record(Stage::Instance0, StageOutcome::Failed, ms0, inst0.error);
        record(Stage::Instance45, StageOutcome::Failed, ms45, inst45.error);
        return fail("both instance passes failed");
    }
    std::vector<Detection> dets0, dets45;
    if (inst0.value) {
        dets0 = clip_to_frame(std::move(inst0.value->detections), crop2.w, crop2.h);
        record(Stage::Instance0, StageOutcome::Ok, ms0);
    } else {
        record(Stage::Instance0, StageOutcome::Degraded, ms0, inst0.error + "; using the second angle only");
    }
    if (inst45.value) {
        dets45 = clip_to_frame(std::move(inst45.value->detections), rotated.image.width(), rotated.image.height());
        record(Stage::Instance45, StageOutcome::Ok, ms45);
    } else {
        record(Stage::Instance45, StageOutcome::Degraded, ms45, inst45.error + "; using angle 0 only");
    }
    const std::vector<Detection> merged =
        two_angle_merge(dets0, dets45, rotated.transform, crop2.w, crop2.h, params);

    // 6. Duplicate resolution + semantic sanity check.
    t = Clock::now();
    std::optional<BinaryMask> upscaled;
    if (semantic) {
        const int tolerance = static_cast<int>(std::ceil(1.0 / in.scale)) + 1;
        upscaled = upscale_semantic(*semantic, res.chain, tolerance);
    }
    protocol::DedupRequest dreq{image_id, merged, upscaled,
                                {params.merge_iou, params.dedup_center_dist, params.semantic_agreement_min}};
    auto dedup = with_retry(options.retries, [&] { return backends.dedup(dreq); });
    std::vector<Detection> finals;
    if (dedup.value) {
        finals = clip_to_frame(std::move(dedup.value->detections), crop2.w, crop2.h);
        record(Stage::Dedup, StageOutcome::Ok, ms_since(t), upscaled ? "" : "semantic sanity check skipped");
    } else {
        finals = merged;
        record(Stage::Dedup, StageOutcome::Degraded, ms_since(t), dedup.error + "; merged detections passed through");
    }
    std::stable_sort(finals.begin(), finals.end(), [](const Detection& a, const Detection& b) {
        const Rect &ra = a.region.bbox, &rb = b.region.bbox;
        return std::tie(ra.y0, ra.x0, ra.h, ra.w) < std::tie(rb.y0, rb.x0, rb.h, rb.w);
    });

    // 7. Classification + rotation.
    t = Clock::now();
    std::vector<Annotation> annotations(finals.size());
    std::string classify_error;
    for (std::size_t i = 0; i < finals.size() && classify_error.empty(); ++i) {
        const Region& r = finals[i].region;
        Raster patch = crop(crop2_image, r.bbox);
        for (int y = 0; y < r.bbox.h; ++y)
            for (int x = 0; x < r.bbox.w; ++x)
                if (!r.mask.at(x, y)) patch.at(x, y) = 255;
        protocol::ClassifyRequest creq{image_id, std::move(patch), r.mask, false,
                                       protocol::FrameHint{crop2.x0 + r.bbox.x0, crop2.y0 + r.bbox.y0, 1.0, r.bbox.w,
                                                           r.bbox.h}};
        auto call = [&] {
            auto resp = backends.classify(creq);
            check_classify_response(resp);
            return resp;
        };
        auto first = with_retry(options.retries, call);
        if (!first.value) {
            classify_error = first.error;
            break;
        }
        protocol::ClassifyResponse resp = std::move(*first.value);
        auto confident = [&](const protocol::ClassifyResponse& c) {
            return *std::max_element(c.probs.begin(), c.probs.end()) >= params.unknown_confidence_min;
        };
        if (!confident(resp)) {
            creq.augmented = true;
            auto second = with_retry(options.retries, call);
            if (!second.value) {
                classify_error = second.error;
                break;
            }
            resp = std::move(*second.value);
        }
        Annotation& a = annotations[i];
        a.probs = resp.probs;
        a.label = confident(resp) ? argmax_class(resp.probs) : ClassLabel::unknown();
        a.rotation = {resp.rotation_sin, resp.rotation_cos};
    }
    if (classify_error.empty()) {
        record(Stage::Classify, StageOutcome::Ok, ms_since(t));
    } else {
        for (auto& a : annotations) {
            a.probs = uniform_probs();
            a.label = ClassLabel::unknown();
            a.rotation = {};
        }
        record(Stage::Classify, StageOutcome::Degraded, ms_since(t), classify_error + "; all labels Unknown");
    }

    // 8. Back-transform to original coordinates.
    t = Clock::now();
    try {
        const auto polygons = back_transform(finals, res.chain);
        for (std::size_t i = 0; i < finals.size(); ++i) {
            annotations[i].id = static_cast<int>(i) + 1;
            annotations[i].polygon = polygons[i];
            annotations[i].score = finals[i].score;
        }
        record(Stage::BackTransform, StageOutcome::Ok, ms_since(t));
    } catch (const std::exception& e) {
        record(Stage::BackTransform, StageOutcome::Failed, ms_since(t), e.what());
        return fail(std::string("back-transform: ") + e.what());
    }
    res.annotations = std::move(annotations);

    const bool degraded = std::any_of(statuses.begin(), statuses.end(),
                                      [](const auto& kv) { return kv.second.outcome != StageOutcome::Ok; });
    if (degraded && res.annotations.empty()) return fail("degraded run produced no annotations");
    res.state = degraded ? JobState::Partial : JobState::Done;
    return finish();
}

namespace {

nlohmann::json rect_json(const Rect& r) { return nlohmann::json::array({r.x0, r.y0, r.w, r.h}); }

}  // namespace

nlohmann::json chain_to_json(const RoiChain& c) {
    return {{"image", rect_json(c.image)},
            {"crop1", rect_json(c.crop1)},
            {"semseg_scale", c.semseg_scale},
            {"semseg_pad", {c.semseg_pad_x, c.semseg_pad_y}},
            {"crop2", rect_json(c.crop2)}};
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CascadeParams, thumb_max_dim, min_component_area, crop1_margin,
                                                crop2_margin, semseg_min_dim, semseg_max_dim, semseg_canvas,
                                                merge_iou, dedup_center_dist, semantic_agreement_min, second_angle,
                                                instance_min_area, unknown_confidence_min, dark_foreground)

nlohmann::json params_to_json(const CascadeParams& p) { return p; }

CascadeParams params_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "cascade parameters must be an object");
    const nlohmann::json defaults = CascadeParams{};
    for (const auto& [k, v] : j.items()) {
        if (!defaults.contains(k)) throw Error(ErrorCode::InvalidArgument, "unknown cascade parameter " + k);
    }
    CascadeParams p;
    try {
        p = j.get<CascadeParams>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("cascade parameters: ") + e.what());
    }
    p.validate();
    return p;
}

nlohmann::json annotations_to_json(const std::vector<Annotation>& annotations) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : annotations) arr.push_back(a);
    return arr;
}

}  // namespace kayra::cascade
