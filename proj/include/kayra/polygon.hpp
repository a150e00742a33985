#pragma once

#include <vector>

#include "kayra/imaging.hpp"

namespace kayra {

using Polygon = std::vector<PointD>;

/// Largest 8-connected piece of a region (ties: first in row-major order).
Region largest_component(const Region& r);

/// Outer outline of the largest 8-connected piece of `r`, walked along pixel
/// edges. Vertices sit on pixel corners in the region's frame, clockwise on
/// screen, with collinear points removed. Returns an empty polygon for an
/// empty region.
Polygon trace_outline(const Region& r);

/// Pixels whose centres fall inside the polygon (even-odd rule). Inverse of
/// trace_outline for hole-free regions.
Region rasterize(const Polygon& poly);

Polygon translate(const Polygon& poly, double dx, double dy);

/// Axis-aligned bounds of the vertices, rounded outwards to whole pixels.
Rect polygon_bounds(const Polygon& poly);

/// True when no two non-adjacent edges properly cross. Edges that merely
/// touch at a shared vertex are allowed.
bool is_simple(const Polygon& poly);

/// Symmetric Hausdorff distance between two point sets.
double hausdorff(const std::vector<PointD>& a, const std::vector<PointD>& b);

/// Pixel-edge boundary points of a region (corners of every boundary pixel edge).
std::vector<PointD> boundary_points(const Region& r);

}  // namespace kayra
