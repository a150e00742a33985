#pragma once

// ROI narrowing and coordinate bookkeeping for the eight-stage flow:
//   original --prefilter--> crop1 --resize+pad--> 992x992 semantic canvas
//   --mask bbox--> crop2 --instances @0/45--> merge --> dedup --> polygons.
// crop1 and crop2 are both rectangles in original-image pixels.

#include <cstdint>
#include <optional>
#include <vector>

#include "kayra/imaging.hpp"
#include "kayra/polygon.hpp"

namespace kayra::cascade {

struct CascadeParams {
    int thumb_max_dim = 256;
    long long min_component_area = 8;  // thumbnail pixels
    int crop1_margin = 16;
    int crop2_margin = 12;
    int semseg_min_dim = 512;
    int semseg_max_dim = 992;
    int semseg_canvas = 992;
    double merge_iou = 0.7;
    double dedup_center_dist = 20.0;
    double semantic_agreement_min = 0.3;
    double second_angle = 45.0;
    long long instance_min_area = 64;        // crop2 pixels, classical instance stub
    double unknown_confidence_min = 0.25;    // max class prob below this -> Unknown
    bool dark_foreground = true;

    /// Throws InvalidArgument when an invariant is violated.
    void validate() const;
};

struct RoiChain {
    Rect image;  // original bounds
    Rect crop1;
    double semseg_scale = 1.0;
    int semseg_pad_x = 0;  // always zero: padding is appended bottom/right
    int semseg_pad_y = 0;
    Rect crop2;

    /// crop2-local -> original.
    [[nodiscard]] PointD crop2_to_original(PointD p) const { return {p.x + crop2.x0, p.y + crop2.y0}; }
    [[nodiscard]] PointD original_to_crop2(PointD p) const { return {p.x - crop2.x0, p.y - crop2.y0}; }
    /// Semantic canvas -> original (continuous pixel-corner coordinates).
    [[nodiscard]] PointD canvas_to_original(PointD p) const {
        return {(p.x - semseg_pad_x) / semseg_scale + crop1.x0, (p.y - semseg_pad_y) / semseg_scale + crop1.y0};
    }
    [[nodiscard]] PointD original_to_canvas(PointD p) const {
        return {(p.x - crop1.x0) * semseg_scale + semseg_pad_x, (p.y - crop1.y0) * semseg_scale + semseg_pad_y};
    }
    /// crop2 within crop1 within the image, positive scale.
    [[nodiscard]] bool valid() const;
};

/// Per-pixel class on the semantic canvas: 0 background, 1 chromosome, 2 overlap.
struct SemanticMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> classes;

    SemanticMask() = default;
    SemanticMask(int w, int h) : width(w), height(h), classes(static_cast<std::size_t>(w) * h, 0) {}

    [[nodiscard]] std::uint8_t at(int x, int y) const { return classes[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return classes[static_cast<std::size_t>(y) * width + x]; }
    /// Pixels of class 1 or 2.
    [[nodiscard]] BinaryMask foreground() const;

    friend bool operator==(const SemanticMask&, const SemanticMask&) = default;
};

/// One instance in crop2-local coordinates. `region.bbox` is the tight box.
struct Detection {
    Region region;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// Stage 1: thumbnail, Otsu, components, union of surviving boxes.
Rect prefilter_crop(const Raster& original, const CascadeParams& params);

struct SemsegInput {
    Raster canvas;      // semseg_canvas x semseg_canvas
    double scale = 1.0;
    int content_w = 0;  // unpadded extent on the canvas
    int content_h = 0;
};

/// Stage 2.
SemsegInput prepare_semseg_input(const Raster& original, const Rect& crop1, const CascadeParams& params);

/// Stage 4: tight box of the semantic foreground mapped back to original coords.
Rect mask_bbox_crop(const SemanticMask& sem, const Rect& crop1, double semseg_scale, const CascadeParams& params);

/// Semantic foreground resampled (nearest) onto crop2, dilated by `tolerance_px`.
BinaryMask upscale_semantic(const SemanticMask& sem, const RoiChain& chain, int tolerance_px);

/// Maps a rotated-canvas detection back into the unrotated frame (nearest).
std::optional<Detection> unrotate_detection(const Detection& det, const AffineTransform& frame_to_canvas,
                                            int frame_w, int frame_h);

/// Stage 5 merge: pooled greedy NMS on mask IoU.
std::vector<Detection> two_angle_merge(const std::vector<Detection>& dets0, const std::vector<Detection>& dets45,
                                       const AffineTransform& rot45, int crop2_w, int crop2_h,
                                       const CascadeParams& params);

/// Greedy mask-IoU NMS by descending score (stable for equal scores).
std::vector<Detection> nms(std::vector<Detection> pool, double iou_threshold);

/// Stage 6. `semantic` (crop2 frame) may be absent when the semantic stage degraded.
std::vector<Detection> resolve_duplicates(const std::vector<Detection>& dets, const BinaryMask* semantic,
                                          const CascadeParams& params);

/// Stage 8: outline of each detection, in original coordinates.
std::vector<Polygon> back_transform(const std::vector<Detection>& dets, const RoiChain& chain);

}  // namespace kayra::cascade
