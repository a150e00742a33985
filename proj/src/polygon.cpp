#include "kayra/polygon.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kayra {

Region largest_component(const Region& r) {
    if (r.empty()) return {};
    const LabeledComponents cc = connected_components(r.mask, Connectivity::Eight);
    if (cc.components.size() == 1) return region_tighten(r);
    const auto best = std::max_element(cc.components.begin(), cc.components.end(),
                                       [](const Component& a, const Component& b) { return a.area < b.area; });
    Region piece = cc.region(best->id);
    piece.bbox.x0 += r.bbox.x0;
    piece.bbox.y0 += r.bbox.y0;
    return piece;
}

Polygon trace_outline(const Region& r) {
    const Region piece = largest_component(r);
    if (piece.empty()) return {};
    const BinaryMask& m = piece.mask;
    auto fg = [&](int x, int y) { return x >= 0 && y >= 0 && x < m.width() && y < m.height() && m.at(x, y); };

    // Topmost-leftmost pixel: its top-left corner is on the outer boundary and
    // the walk starts heading east with the region on the right-hand side.
    int sx = 0;
    while (!m.at(sx, 0)) ++sx;
    const int start_x = sx, start_y = 0;

    int vx = start_x, vy = start_y;
    int dx = 1, dy = 0;
    Polygon out;
    const auto push = [&](int x, int y) {
        out.push_back({static_cast<double>(x + piece.bbox.x0), static_cast<double>(y + piece.bbox.y0)});
    };
    const std::size_t guard = static_cast<std::size_t>(m.width() + 2) * (m.height() + 2) * 4 + 16;
    for (std::size_t step = 0; step < guard; ++step) {
        vx += dx;
        vy += dy;
        // Right-hand normal on a y-down grid.
        const int rx = -dy, ry = dx;
        const int ahead_right_x = (2 * vx + dx + rx - 1) / 2;
        const int ahead_right_y = (2 * vy + dy + ry - 1) / 2;
        const int ahead_left_x = (2 * vx + dx - rx - 1) / 2;
        const int ahead_left_y = (2 * vy + dy - ry - 1) / 2;
        int ndx = dx, ndy = dy;
        if (fg(ahead_left_x, ahead_left_y)) {
            ndx = dy;  // turn left
            ndy = -dx;
        } else if (!fg(ahead_right_x, ahead_right_y)) {
            ndx = -dy;  // turn right
            ndy = dx;
        }
        if (ndx != dx || ndy != dy) {
            push(vx, vy);
            dx = ndx;
            dy = ndy;
        }
        if (vx == start_x && vy == start_y && dx == 1 && dy == 0) break;
    }
    // The start vertex is a corner (entered heading north, left heading east),
    // so it is the last vertex pushed.
    return out;
}

Region rasterize(const Polygon& poly) {
    if (poly.size() < 3) return {};
    const Rect b = polygon_bounds(poly);
    if (b.empty()) return {};
    Region out{b, BinaryMask(b.w, b.h)};
    std::vector<double> xs;
    for (int row = 0; row < b.h; ++row) {
        const double yc = b.y0 + row + 0.5;
        xs.clear();
        for (std::size_t i = 0; i < poly.size(); ++i) {
            const PointD& p = poly[i];
            const PointD& q = poly[(i + 1) % poly.size()];
            if ((p.y <= yc) != (q.y <= yc)) {
                xs.push_back(p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            // Pixel x is inside when its centre x + 0.5 lies in [xs[k], xs[k+1]).
            const int first = static_cast<int>(std::ceil(xs[k] - 0.5));
            const int last = static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1;
            for (int x = std::max(first, b.x0); x <= std::min(last, b.x1() - 1); ++x) {
                out.mask.set(x - b.x0, row);
            }
        }
    }
    return region_tighten(out);
}

Polygon translate(const Polygon& poly, double dx, double dy) {
    Polygon out;
    out.reserve(poly.size());
    for (const auto& p : poly) out.push_back({p.x + dx, p.y + dy});
    return out;
}

Rect polygon_bounds(const Polygon& poly) {
    if (poly.empty()) return {};
    double minx = std::numeric_limits<double>::max(), miny = minx;
    double maxx = std::numeric_limits<double>::lowest(), maxy = maxx;
    for (const auto& p : poly) {
        minx = std::min(minx, p.x);
        miny = std::min(miny, p.y);
        maxx = std::max(maxx, p.x);
        maxy = std::max(maxy, p.y);
    }
    const int x0 = static_cast<int>(std::floor(minx));
    const int y0 = static_cast<int>(std::floor(miny));
    return {x0, y0, static_cast<int>(std::ceil(maxx)) - x0, static_cast<int>(std::ceil(maxy)) - y0};
}

namespace {

double cross(const PointD& o, const PointD& a, const PointD& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool proper_cross(const PointD& a, const PointD& b, const PointD& c, const PointD& d) {
    const double d1 = cross(c, d, a);
    const double d2 = cross(c, d, b);
    const double d3 = cross(a, b, c);
    const double d4 = cross(a, b, d);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

bool is_simple(const Polygon& poly) {
    const std::size_t n = poly.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (j == i + 1 || (i == 0 && j == n - 1)) continue;
            if (proper_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) return false;
        }
    }
    return true;
}

double hausdorff(const std::vector<PointD>& a, const std::vector<PointD>& b) {
    if (a.empty() || b.empty()) return a.empty() && b.empty() ? 0.0 : std::numeric_limits<double>::infinity();
    auto directed = [](const std::vector<PointD>& from, const std::vector<PointD>& to) {
        double worst = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(a, b), directed(b, a));
}

std::vector<PointD> boundary_points(const Region& r) {
    std::vector<PointD> pts;
    for (int y = r.bbox.y0; y < r.bbox.y1(); ++y) {
        for (int x = r.bbox.x0; x < r.bbox.x1(); ++x) {
            if (!r.at(x, y)) continue;
            const bool edge = !r.at(x - 1, y) || !r.at(x + 1, y) || !r.at(x, y - 1) || !r.at(x, y + 1);
            if (!edge) continue;
            for (int cy = 0; cy <= 1; ++cy) {
                for (int cx = 0; cx <= 1; ++cx) pts.push_back({static_cast<double>(x + cx), static_cast<double>(y + cy)});
            }
        }
    }
    return pts;
}

}  // namespace kayra
