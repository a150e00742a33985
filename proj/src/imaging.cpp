#include "kayra/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <boost/multiprecision/cpp_int.hpp>

namespace kayra {

std::string_view error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::DegenerateHistogram: return "DegenerateHistogram";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::TargetSmallerThanSource: return "TargetSmallerThanSource";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NoForeground: return "NoForeground";
        case ErrorCode::EmptySemanticMask: return "EmptySemanticMask";
        case ErrorCode::EmptyMask: return "EmptyMask";
        case ErrorCode::UnknownImageId: return "UnknownImageId";
        case ErrorCode::ServiceUnavailable: return "ServiceUnavailable";
        case ErrorCode::AllZeroMargins: return "AllZeroMargins";
        case ErrorCode::PlacementFailure: return "PlacementFailure";
        case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
        case ErrorCode::CorruptImage: return "CorruptImage";
        case ErrorCode::MissingPatientId: return "MissingPatientId";
        case ErrorCode::VersionConflict: return "VersionConflict";
        case ErrorCode::SignedOffImmutable: return "SignedOffImmutable";
        case ErrorCode::UnknownAnnotation: return "UnknownAnnotation";
        case ErrorCode::UnknownVersion: return "UnknownVersion";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::Unauthorized: return "Unauthorized";
        case ErrorCode::ProtocolError: return "ProtocolError";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

std::optional<ErrorCode> error_code_from_name(std::string_view name) {
    for (int i = 0; i <= static_cast<int>(ErrorCode::IoError); ++i) {
        const auto code = static_cast<ErrorCode>(i);
        if (error_code_name(code) == name) return code;
    }
    return std::nullopt;
}

// --- Rect ------------------------------------------------------------------------

Rect rect_union(const Rect& a, const Rect& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    const int x0 = std::min(a.x0, b.x0);
    const int y0 = std::min(a.y0, b.y0);
    return {x0, y0, std::max(a.x1(), b.x1()) - x0, std::max(a.y1(), b.y1()) - y0};
}

Rect rect_intersection(const Rect& a, const Rect& b) {
    const int x0 = std::max(a.x0, b.x0);
    const int y0 = std::max(a.y0, b.y0);
    const int x1 = std::min(a.x1(), b.x1());
    const int y1 = std::min(a.y1(), b.y1());
    if (x1 <= x0 || y1 <= y0) return {};
    return {x0, y0, x1 - x0, y1 - y0};
}

Rect rect_expand_clamp(const Rect& r, int margin, const Rect& bounds) {
    const Rect grown{r.x0 - margin, r.y0 - margin, r.w + 2 * margin, r.h + 2 * margin};
    return rect_intersection(grown, bounds);
}

// --- Raster / BinaryMask ------------------------------------------------------------

Raster::Raster(int width, int height, std::uint8_t fill)
    : width_(width), height_(height) {
    if (width < 1 || height < 1) {
        throw Error(ErrorCode::InvalidArgument, "raster dimensions must be positive");
    }
    pixels_.assign(static_cast<std::size_t>(width) * height, fill);
}

Raster::Raster(int width, int height, std::vector<std::uint8_t> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1 || pixels_.size() != static_cast<std::size_t>(width) * height) {
        throw Error(ErrorCode::InvalidArgument, "raster pixel buffer does not match its dimensions");
    }
}

BinaryMask::BinaryMask(int width, int height, bool fill)
    : width_(width), height_(height) {
    if (width < 0 || height < 0) {
        throw Error(ErrorCode::InvalidArgument, "mask dimensions must be non-negative");
    }
    bits_.assign(static_cast<std::size_t>(width) * height, fill ? 1 : 0);
}

long long BinaryMask::count() const {
    long long n = 0;
    for (auto b : bits_) n += b;
    return n;
}

bool BinaryMask::any() const {
    return std::any_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; });
}

// --- Region ---------------------------------------------------------------------------

PointD Region::centroid() const {
    double sx = 0, sy = 0;
    long long n = 0;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.at(x, y)) {
                sx += x + bbox.x0;
                sy += y + bbox.y0;
                ++n;
            }
        }
    }
    if (n == 0) return {};
    return {sx / static_cast<double>(n), sy / static_cast<double>(n)};
}

Region region_tighten(const Region& r) {
    const Rect t = tight_bbox(r.mask);
    if (t.empty()) return {};
    return {{r.bbox.x0 + t.x0, r.bbox.y0 + t.y0, t.w, t.h}, crop(r.mask, t)};
}

Region region_from_mask(const BinaryMask& mask) {
    return region_tighten({mask.bounds(), mask});
}

BinaryMask region_to_mask(const Region& r, int frame_w, int frame_h) {
    BinaryMask out(frame_w, frame_h);
    const Rect clip = rect_intersection(r.bbox, out.bounds());
    for (int y = clip.y0; y < clip.y1(); ++y) {
        for (int x = clip.x0; x < clip.x1(); ++x) {
            if (r.mask.at(x - r.bbox.x0, y - r.bbox.y0)) out.set(x, y);
        }
    }
    return out;
}

long long region_intersection(const Region& a, const Region& b) {
    const Rect overlap = rect_intersection(a.bbox, b.bbox);
    long long n = 0;
    for (int y = overlap.y0; y < overlap.y1(); ++y) {
        for (int x = overlap.x0; x < overlap.x1(); ++x) {
            if (a.mask.at(x - a.bbox.x0, y - a.bbox.y0) && b.mask.at(x - b.bbox.x0, y - b.bbox.y0)) ++n;
        }
    }
    return n;
}

double region_iou(const Region& a, const Region& b) {
    const long long inter = region_intersection(a, b);
    const long long uni = a.area() + b.area() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Region region_union(const Region& a, const Region& b) {
    if (a.empty()) return region_tighten(b);
    if (b.empty()) return region_tighten(a);
    const Rect box = rect_union(a.bbox, b.bbox);
    BinaryMask m(box.w, box.h);
    for (int y = box.y0; y < box.y1(); ++y) {
        for (int x = box.x0; x < box.x1(); ++x) {
            if (a.at(x, y) || b.at(x, y)) m.set(x - box.x0, y - box.y0);
        }
    }
    return region_tighten({box, std::move(m)});
}

Region region_intersect_mask(const Region& r, const BinaryMask& keep) {
    Region out{r.bbox, BinaryMask(r.bbox.w, r.bbox.h)};
    for (int y = 0; y < r.bbox.h; ++y) {
        for (int x = 0; x < r.bbox.w; ++x) {
            const int fx = x + r.bbox.x0;
            const int fy = y + r.bbox.y0;
            if (r.mask.at(x, y) && keep.bounds().contains(fx, fy) && keep.at(fx, fy)) out.mask.set(x, y);
        }
    }
    return region_tighten(out);
}

Region LabeledComponents::region(int id) const {
    const Component& c = components.at(static_cast<std::size_t>(id - 1));
    Region r{c.bbox, BinaryMask(c.bbox.w, c.bbox.h)};
    for (int y = c.bbox.y0; y < c.bbox.y1(); ++y) {
        for (int x = c.bbox.x0; x < c.bbox.x1(); ++x) {
            if (label_at(x, y) == id) r.mask.set(x - c.bbox.x0, y - c.bbox.y0);
        }
    }
    return r;
}

// --- AffineTransform -------------------------------------------------------------------

AffineTransform AffineTransform::inverse() const {
    const double det = determinant();
    if (det == 0.0 || !std::isfinite(det)) {
        throw Error(ErrorCode::InvalidArgument, "affine transform is singular");
    }
    const double a = m[4] / det;
    const double b = -m[1] / det;
    const double d = -m[3] / det;
    const double e = m[0] / det;
    return {{a, b, -(a * m[2] + b * m[5]), d, e, -(d * m[2] + e * m[5])}};
}

AffineTransform AffineTransform::after(const AffineTransform& first) const {
    const auto& f = first.m;
    return {{m[0] * f[0] + m[1] * f[3], m[0] * f[1] + m[1] * f[4], m[0] * f[2] + m[1] * f[5] + m[2],
             m[3] * f[0] + m[4] * f[3], m[3] * f[1] + m[4] * f[4], m[3] * f[2] + m[4] * f[5] + m[5]}};
}

// --- Otsu ---------------------------------------------------------------------------------

std::array<long long, 256> histogram(const Raster& image) {
    std::array<long long, 256> hist{};
    for (auto p : image.pixels()) ++hist[p];
    return hist;
}

int otsu_threshold(const Raster& image) {
    using boost::multiprecision::int256_t;
    const auto hist = histogram(image);
    const auto distinct = std::count_if(hist.begin(), hist.end(), [](long long c) { return c > 0; });
    if (distinct < 2) {
        throw Error(ErrorCode::DegenerateHistogram, "image has a single intensity");
    }

    long long total = 0;
    long long total_sum = 0;
    for (int i = 0; i < 256; ++i) {
        total += hist[i];
        total_sum += hist[i] * i;
    }

    // Between-class variance up to a positive constant factor:
    //   (total_sum * n0 - total * sum0)^2 / (n0 * n1)
    // compared exactly as fractions so that ties are real ties.
    int best_t = -1;
    int256_t best_num = 0;
    int256_t best_den = 1;
    long long n0 = 0;
    long long sum0 = 0;
    for (int t = 0; t <= 254; ++t) {
        n0 += hist[t];
        sum0 += hist[t] * t;
        const long long n1 = total - n0;
        int256_t num = 0;
        int256_t den = 1;
        if (n0 > 0 && n1 > 0) {
            const int256_t diff = int256_t(total_sum) * n0 - int256_t(total) * sum0;
            num = diff * diff;
            den = int256_t(n0) * n1;
        }
        if (best_t < 0 || num * best_den > best_num * den) {
            best_t = t;
            best_num = num;
            best_den = den;
        }
    }
    return best_t;
}

BinaryMask threshold(const Raster& image, int t, bool dark_foreground) {
    BinaryMask out(image.width(), image.height());
    auto src = image.pixels();
    auto dst = out.bits();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const bool below = src[i] <= t;
        dst[i] = (below == dark_foreground) ? 1 : 0;
    }
    return out;
}

LabeledComponents connected_components(const BinaryMask& mask, Connectivity connectivity) {
    LabeledComponents out;
    out.width = mask.width();
    out.height = mask.height();
    out.labels.assign(static_cast<std::size_t>(out.width) * out.height, 0);

    const bool eight = connectivity == Connectivity::Eight;
    std::vector<std::pair<int, int>> stack;
    int next = 0;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            if (!mask.at(x, y) || out.labels[static_cast<std::size_t>(y) * out.width + x] != 0) continue;
            const int id = ++next;
            Component comp{id, 0, {x, y, 1, 1}};
            int minx = x, maxx = x, miny = y, maxy = y;
            stack.clear();
            stack.emplace_back(x, y);
            out.labels[static_cast<std::size_t>(y) * out.width + x] = id;
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                ++comp.area;
                minx = std::min(minx, cx);
                maxx = std::max(maxx, cx);
                miny = std::min(miny, cy);
                maxy = std::max(maxy, cy);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        if (!eight && dx != 0 && dy != 0) continue;
                        const int nx = cx + dx;
                        const int ny = cy + dy;
                        if (nx < 0 || ny < 0 || nx >= out.width || ny >= out.height) continue;
                        auto& lbl = out.labels[static_cast<std::size_t>(ny) * out.width + nx];
                        if (lbl == 0 && mask.at(nx, ny)) {
                            lbl = id;
                            stack.emplace_back(nx, ny);
                        }
                    }
                }
            }
            comp.bbox = {minx, miny, maxx - minx + 1, maxy - miny + 1};
            out.components.push_back(comp);
        }
    }
    return out;
}

// --- geometry ------------------------------------------------------------------------------

Raster crop(const Raster& image, const Rect& r) {
    if (r.empty() || !image.bounds().contains(r)) {
        throw Error(ErrorCode::InvalidArgument, "crop rectangle outside image bounds");
    }
    Raster out(r.w, r.h);
    for (int y = 0; y < r.h; ++y) {
        for (int x = 0; x < r.w; ++x) out.at(x, y) = image.at(x + r.x0, y + r.y0);
    }
    return out;
}

BinaryMask crop(const BinaryMask& mask, const Rect& r) {
    if (!mask.bounds().contains(r)) {
        throw Error(ErrorCode::InvalidArgument, "crop rectangle outside mask bounds");
    }
    BinaryMask out(r.w, r.h);
    for (int y = 0; y < r.h; ++y) {
        for (int x = 0; x < r.w; ++x) out.set(x, y, mask.at(x + r.x0, y + r.y0));
    }
    return out;
}

namespace {

double bilinear_sample(const Raster& image, double sx, double sy) {
    sx = std::clamp(sx, 0.0, static_cast<double>(image.width() - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(image.height() - 1));
    const int x0 = static_cast<int>(std::floor(sx));
    const int y0 = static_cast<int>(std::floor(sy));
    const int x1 = std::min(x0 + 1, image.width() - 1);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const double fx = sx - x0;
    const double fy = sy - y0;
    const double top = image.at(x0, y0) * (1 - fx) + image.at(x1, y0) * fx;
    const double bottom = image.at(x0, y1) * (1 - fx) + image.at(x1, y1) * fx;
    return top * (1 - fy) + bottom * fy;
}

std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

Raster resize_bilinear(const Raster& image, int out_w, int out_h) {
    Raster out(out_w, out_h);
    const double rx = static_cast<double>(image.width()) / out_w;
    const double ry = static_cast<double>(image.height()) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double sy = (y + 0.5) * ry - 0.5;
        for (int x = 0; x < out_w; ++x) {
            out.at(x, y) = to_u8(bilinear_sample(image, (x + 0.5) * rx - 0.5, sy));
        }
    }
    return out;
}

BinaryMask resize_nearest(const BinaryMask& mask, int out_w, int out_h) {
    BinaryMask out(out_w, out_h);
    const double rx = static_cast<double>(mask.width()) / out_w;
    const double ry = static_cast<double>(mask.height()) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(static_cast<int>((y + 0.5) * ry), mask.height() - 1);
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(static_cast<int>((x + 0.5) * rx), mask.width() - 1);
            out.set(x, y, mask.at(sx, sy));
        }
    }
    return out;
}

std::pair<int, int> constrained_size(int w, int h, int min_dim, int max_dim, double* scale_out) {
    if (min_dim > max_dim || min_dim < 1) {
        throw Error(ErrorCode::InvalidArgument, "min_dim must be in [1, max_dim]");
    }
    double s = static_cast<double>(min_dim) / std::min(w, h);
    if (std::lround(std::max(w, h) * s) > max_dim) {
        s = static_cast<double>(max_dim) / std::max(w, h);
    }
    if (scale_out) *scale_out = s;
    const int ow = std::max(1, static_cast<int>(std::lround(w * s)));
    const int oh = std::max(1, static_cast<int>(std::lround(h * s)));
    return {ow, oh};
}

ResizeResult resize_constrained(const Raster& image, int min_dim, int max_dim) {
    double s = 1.0;
    const auto [ow, oh] = constrained_size(image.width(), image.height(), min_dim, max_dim, &s);
    return {resize_bilinear(image, ow, oh), s};
}

Raster pad_edge_replicate(const Raster& image, int target_w, int target_h) {
    if (target_w < image.width() || target_h < image.height()) {
        throw Error(ErrorCode::TargetSmallerThanSource, "pad target is smaller than the source");
    }
    Raster out(target_w, target_h);
    for (int y = 0; y < target_h; ++y) {
        const int sy = std::min(y, image.height() - 1);
        for (int x = 0; x < target_w; ++x) {
            out.at(x, y) = image.at(std::min(x, image.width() - 1), sy);
        }
    }
    return out;
}

namespace {

std::pair<double, double> sin_cos_degrees(double degrees) {
    // Exact values at multiples of 90 keep right-angle rotations lossless.
    const double r = std::fmod(degrees, 360.0);
    const double n = r < 0 ? r + 360.0 : r;
    if (n == 0.0) return {0.0, 1.0};
    if (n == 90.0) return {1.0, 0.0};
    if (n == 180.0) return {0.0, -1.0};
    if (n == 270.0) return {-1.0, 0.0};
    const double rad = degrees * std::numbers::pi / 180.0;
    return {std::sin(rad), std::cos(rad)};
}

}  // namespace

std::pair<int, int> rotated_canvas_size(int w, int h, double degrees) {
    const auto [s, c] = sin_cos_degrees(degrees);
    const double cw = w * std::abs(c) + h * std::abs(s);
    const double ch = w * std::abs(s) + h * std::abs(c);
    return {std::max(1, static_cast<int>(std::ceil(cw - 1e-9))),
            std::max(1, static_cast<int>(std::ceil(ch - 1e-9)))};
}

AffineTransform rotation_transform(int w, int h, double degrees) {
    const auto [s, c] = sin_cos_degrees(degrees);
    const auto [cw, ch] = rotated_canvas_size(w, h, degrees);
    // Continuous coordinates put pixel centres at index + 0.5; rotate about
    // the source centre and re-centre on the canvas.
    const double sx = w / 2.0 - 0.5;
    const double sy = h / 2.0 - 0.5;
    const double dx = cw / 2.0 - 0.5;
    const double dy = ch / 2.0 - 0.5;
    return {{c, -s, dx - (c * sx - s * sy), s, c, dy - (s * sx + c * sy)}};
}

RotateResult rotate_expand(const Raster& image, double degrees) {
    const auto [cw, ch] = rotated_canvas_size(image.width(), image.height(), degrees);
    const AffineTransform fwd = rotation_transform(image.width(), image.height(), degrees);
    if (cw == image.width() && ch == image.height() && fwd.m == AffineTransform::identity().m) {
        return {image, fwd};
    }
    const AffineTransform inv = fwd.inverse();
    Raster out(cw, ch);
    for (int y = 0; y < ch; ++y) {
        for (int x = 0; x < cw; ++x) {
            const PointD src = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            out.at(x, y) = to_u8(bilinear_sample(image, src.x, src.y));
        }
    }
    return {std::move(out), fwd};
}

BinaryMask rotate_mask(const BinaryMask& mask, const AffineTransform& src_to_dst, int dst_w, int dst_h) {
    const AffineTransform inv = src_to_dst.inverse();
    BinaryMask out(dst_w, dst_h);
    for (int y = 0; y < dst_h; ++y) {
        for (int x = 0; x < dst_w; ++x) {
            const PointD src = inv.apply({static_cast<double>(x), static_cast<double>(y)});
            const long sx = std::lround(src.x);
            const long sy = std::lround(src.y);
            if (sx >= 0 && sy >= 0 && sx < mask.width() && sy < mask.height() &&
                mask.at(static_cast<int>(sx), static_cast<int>(sy))) {
                out.set(x, y);
            }
        }
    }
    return out;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw Error(ErrorCode::DimensionMismatch, "masks differ in size");
    }
    long long inter = 0, uni = 0;
    auto ab = a.bits();
    auto bb = b.bits();
    for (std::size_t i = 0; i < ab.size(); ++i) {
        inter += ab[i] & bb[i];
        uni += ab[i] | bb[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
    if (radius <= 0) return mask;
    const int w = mask.width();
    const int h = mask.height();
    // Separable: horizontal then vertical running max.
    BinaryMask horiz(w, h);
    for (int y = 0; y < h; ++y) {
        int last = -1'000'000;
        for (int x = 0; x < w; ++x) {
            if (mask.at(x, y)) last = x;
            if (x - last <= radius) horiz.set(x, y);
        }
        int next = 1'000'000;
        for (int x = w - 1; x >= 0; --x) {
            if (mask.at(x, y)) next = x;
            if (next - x <= radius) horiz.set(x, y);
        }
    }
    BinaryMask out(w, h);
    for (int x = 0; x < w; ++x) {
        int last = -1'000'000;
        for (int y = 0; y < h; ++y) {
            if (horiz.at(x, y)) last = y;
            if (y - last <= radius) out.set(x, y);
        }
        int next = 1'000'000;
        for (int y = h - 1; y >= 0; --y) {
            if (horiz.at(x, y)) next = y;
            if (next - y <= radius) out.set(x, y);
        }
    }
    return out;
}

Rect tight_bbox(const BinaryMask& mask) {
    int minx = mask.width(), miny = mask.height(), maxx = -1, maxy = -1;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.at(x, y)) {
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
            }
        }
    }
    if (maxx < 0) return {};
    return {minx, miny, maxx - minx + 1, maxy - miny + 1};
}

}  // namespace kayra
