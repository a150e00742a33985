#pragma once

// Raster primitives shared by every pipeline stage. All functions are pure.

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "kayra/error.hpp"

namespace kayra {

struct Rect {
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;

    [[nodiscard]] int x1() const { return x0 + w; }
    [[nodiscard]] int y1() const { return y0 + h; }
    [[nodiscard]] bool empty() const { return w <= 0 || h <= 0; }
    [[nodiscard]] long long area() const { return empty() ? 0 : static_cast<long long>(w) * h; }
    [[nodiscard]] bool contains(const Rect& o) const {
        return o.x0 >= x0 && o.y0 >= y0 && o.x1() <= x1() && o.y1() <= y1();
    }
    [[nodiscard]] bool contains(int x, int y) const { return x >= x0 && y >= y0 && x < x1() && y < y1(); }

    friend bool operator==(const Rect&, const Rect&) = default;
};

Rect rect_union(const Rect& a, const Rect& b);
/// Empty rect (w = h = 0) when the two do not overlap.
Rect rect_intersection(const Rect& a, const Rect& b);
Rect rect_expand_clamp(const Rect& r, int margin, const Rect& bounds);

struct PointD {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const PointD&, const PointD&) = default;
};

/// 8-bit grayscale image, row-major, 0 = black.
class Raster {
public:
    Raster() = default;
    Raster(int width, int height, std::uint8_t fill = 0);
    Raster(int width, int height, std::vector<std::uint8_t> pixels);

    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] bool empty() const { return pixels_.empty(); }
    [[nodiscard]] Rect bounds() const { return {0, 0, width_, height_}; }

    [[nodiscard]] std::uint8_t at(int x, int y) const { return pixels_[index(x, y)]; }
    std::uint8_t& at(int x, int y) { return pixels_[index(x, y)]; }

    [[nodiscard]] std::span<const std::uint8_t> pixels() const { return pixels_; }
    std::span<std::uint8_t> pixels() { return pixels_; }

    friend bool operator==(const Raster&, const Raster&) = default;

private:
    [[nodiscard]] std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> pixels_;
};

/// Boolean mask stored one byte per pixel (0 or 1).
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, bool fill = false);

    [[nodiscard]] int width() const { return width_; }
    [[nodiscard]] int height() const { return height_; }
    [[nodiscard]] Rect bounds() const { return {0, 0, width_, height_}; }

    [[nodiscard]] bool at(int x, int y) const { return bits_[index(x, y)] != 0; }
    void set(int x, int y, bool v = true) { bits_[index(x, y)] = v ? 1 : 0; }

    [[nodiscard]] std::span<const std::uint8_t> bits() const { return bits_; }
    std::span<std::uint8_t> bits() { return bits_; }

    [[nodiscard]] long long count() const;
    [[nodiscard]] bool any() const;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    [[nodiscard]] std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> bits_;
};

/// A mask that only stores its bounding window. `mask` has the size of
/// `bbox`; pixel (x, y) of the frame is set iff mask.at(x - bbox.x0, y - bbox.y0).
struct Region {
    Rect bbox;
    BinaryMask mask;

    [[nodiscard]] bool at(int x, int y) const {
        return bbox.contains(x, y) && mask.at(x - bbox.x0, y - bbox.y0);
    }
    [[nodiscard]] long long area() const { return mask.count(); }
    [[nodiscard]] bool empty() const { return bbox.empty() || !mask.any(); }
    [[nodiscard]] PointD centroid() const;

    friend bool operator==(const Region&, const Region&) = default;
};

/// Shrinks the window to the tight bbox of the set pixels; empty region stays empty.
Region region_tighten(const Region& r);
Region region_from_mask(const BinaryMask& mask);
/// Paints the region into a frame-sized mask.
BinaryMask region_to_mask(const Region& r, int frame_w, int frame_h);
long long region_intersection(const Region& a, const Region& b);
double region_iou(const Region& a, const Region& b);
Region region_union(const Region& a, const Region& b);
/// Keeps pixels of `r` that are also set in the frame mask `keep`.
Region region_intersect_mask(const Region& r, const BinaryMask& keep);

struct Component {
    int id = 0;
    long long area = 0;
    Rect bbox;
};

struct LabeledComponents {
    int width = 0;
    int height = 0;
    std::vector<int> labels;  // 0 = background
    std::vector<Component> components;

    [[nodiscard]] int label_at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    /// Region of component `id` (1-based).
    [[nodiscard]] Region region(int id) const;
};

enum class Connectivity { Four = 4, Eight = 8 };

/// 2x3 matrix mapping (x, y) -> (m[0]x + m[1]y + m[2], m[3]x + m[4]y + m[5]).
struct AffineTransform {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    static AffineTransform identity() { return {}; }
    static AffineTransform translation(double dx, double dy) { return {{1, 0, dx, 0, 1, dy}}; }
    static AffineTransform scaling(double s) { return {{s, 0, 0, 0, s, 0}}; }

    [[nodiscard]] PointD apply(PointD p) const {
        return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
    }
    [[nodiscard]] double determinant() const { return m[0] * m[4] - m[1] * m[3]; }
    /// Throws InvalidArgument when singular.
    [[nodiscard]] AffineTransform inverse() const;
    /// (this ∘ first): apply `first`, then this.
    [[nodiscard]] AffineTransform after(const AffineTransform& first) const;
};

// --- thresholding / labelling -------------------------------------------------

std::array<long long, 256> histogram(const Raster& image);

/// Otsu level t in [0, 254]; foreground is intensity <= t. Lowest t wins ties.
int otsu_threshold(const Raster& image);

/// Pixels with intensity <= t (dark foreground) or > t when `dark_foreground` is false.
BinaryMask threshold(const Raster& image, int t, bool dark_foreground = true);

LabeledComponents connected_components(const BinaryMask& mask, Connectivity connectivity = Connectivity::Eight);

// --- geometry -----------------------------------------------------------------

Raster crop(const Raster& image, const Rect& r);
BinaryMask crop(const BinaryMask& mask, const Rect& r);

Raster resize_bilinear(const Raster& image, int out_w, int out_h);
BinaryMask resize_nearest(const BinaryMask& mask, int out_w, int out_h);

struct ResizeResult {
    Raster image;
    double scale = 1.0;
};

/// Scales so the short side hits `min_dim`, unless that would push the long
/// side past `max_dim`, in which case the long side is pinned to `max_dim`.
ResizeResult resize_constrained(const Raster& image, int min_dim, int max_dim);

/// Output size of resize_constrained without resampling.
std::pair<int, int> constrained_size(int w, int h, int min_dim, int max_dim, double* scale_out = nullptr);

/// Source anchored at (0, 0); padding copies the last column / row.
Raster pad_edge_replicate(const Raster& image, int target_w, int target_h);

struct RotateResult {
    Raster image;
    AffineTransform transform;  // source pixel coords -> canvas pixel coords
};

/// Canvas size of a w x h rectangle rotated by `degrees`.
std::pair<int, int> rotated_canvas_size(int w, int h, double degrees);
/// Maps source pixel coordinates into the expanded canvas. Positive angles
/// turn an axis at angle phi (0 = vertical) into phi - degrees.
AffineTransform rotation_transform(int w, int h, double degrees);
RotateResult rotate_expand(const Raster& image, double degrees);

/// Nearest-neighbour rotation of a mask into the expanded canvas of its frame.
BinaryMask rotate_mask(const BinaryMask& mask, const AffineTransform& src_to_dst, int dst_w, int dst_h);

double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Square (Chebyshev) dilation.
BinaryMask dilate(const BinaryMask& mask, int radius);

/// Tight bbox of set pixels; empty Rect when none.
Rect tight_bbox(const BinaryMask& mask);

}  // namespace kayra
