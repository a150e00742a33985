#pragma once

// Deterministic synthetic metaphase spreads with exact ground truth. The
// images are not meant to look real; they exist to exercise every pipeline
// branch (disjoint, touching, overlapping and border-adjacent instances)
// against known masks, classes and angles.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "kayra/annotation.hpp"
#include "kayra/imaging.hpp"

namespace kayra::synth {

struct BandModel {
    int dark = 60;
    int light = 150;
    double period_px = 10.0;
};

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int width = 1830;
    int height = 1830;
    int chromosome_count = 46;
    std::vector<ClassLabel> classes;  // empty: default_classes(chromosome_count)
    int overlap_pairs = 0;
    int touching_pairs = 0;
    int background = 235;
    BandModel bands;
    bool border_adjacent = false;
    double spread_radius_frac = 0.36;  // of min(width, height)
    int min_gap = 8;                   // px between undeclared neighbours
    int max_attempts = 4000;           // per instance
    std::map<std::string, std::string> tags;

    void validate() const;
};

struct GtInstance {
    int id = 0;
    Region mask;  // canvas coordinates
    ClassLabel label;
    double angle_degrees = 0.0;  // long axis, (-90, 90], 0 = vertical
    PointD centroid;
};

struct GroundTruth {
    std::uint64_t seed = 0;
    int width = 0;
    int height = 0;
    std::vector<GtInstance> instances;
    std::vector<std::pair<int, int>> overlap_pairs;   // instance ids
    std::vector<std::pair<int, int>> touching_pairs;
    std::map<std::string, std::string> tags;
};

struct Spread {
    Raster image;
    GroundTruth truth;
};

Spread generate_spread(const SyntheticSpec& spec);

/// Two of each autosome plus XX, repeated or truncated to `count`.
std::vector<ClassLabel> default_classes(int count);

/// Chromosome length in pixels for the default 1830 px canvas.
double class_length(ClassLabel label);
inline constexpr double kChromosomeWidth = 16.0;

/// Pixel area of a straight, unbent instance of the class.
double expected_area(ClassLabel label);

/// Normalizes an axis angle into (-90, 90].
double normalize_axis_degrees(double degrees);

/// Long-axis angle of a region from its second moments, (-90, 90].
double principal_axis_degrees(const Region& r);

nlohmann::json truth_to_json(const GroundTruth& gt);
GroundTruth truth_from_json(const nlohmann::json& j);

}  // namespace kayra::synth
