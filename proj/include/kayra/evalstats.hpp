#pragma once

// Instance matching, outcome taxonomy, accuracy counting, Fisher's exact test
// and the three report tables.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "kayra/annotation.hpp"
#include "kayra/imaging.hpp"
#include "kayra/synthgen.hpp"

namespace kayra::eval {

enum class Outcome { Correct, MergedWithOther, Missed };

std::string_view outcome_name(Outcome o);
std::optional<Outcome> parse_outcome(std::string_view s);

struct MatchOutcome {
    Outcome kind = Outcome::Missed;
    int pred = -1;  // index into preds; -1 for Missed

    friend bool operator==(const MatchOutcome&, const MatchOutcome&) = default;
};

struct MatchParams {
    double iou_thresh = 0.5;
    double cross_cover = 0.25;  // fraction of another GT's area
};

/// One outcome per GT. Regions live on a shared width x height canvas.
std::vector<MatchOutcome> match_instances(const std::vector<Region>& preds, const std::vector<Region>& gts,
                                          const MatchParams& params = {});
/// Full-frame overload; throws DimensionMismatch when sizes differ.
std::vector<MatchOutcome> match_instances(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                                          const MatchParams& params = {});

/// Axis difference folded into [0, 90].
double axis_difference_degrees(double a, double b);

/// One row per GT instance; every aggregate is computed from these.
struct InstanceRecord {
    std::string spread_id;
    int gt_id = 0;
    Outcome outcome = Outcome::Missed;
    ClassLabel gt_class;
    std::optional<ClassLabel> pred_class;
    bool class_correct = false;
    bool rotation_correct = false;
    std::map<std::string, std::string> tags;

    friend bool operator==(const InstanceRecord&, const InstanceRecord&) = default;
};

nlohmann::json record_to_json(const InstanceRecord& r);
InstanceRecord record_from_json(const nlohmann::json& j);

/// Classification and rotation per GT. Only Correct outcomes carry a
/// prediction; everything else counts as incorrect on both axes.
std::vector<InstanceRecord> accuracy_counts(const std::vector<MatchOutcome>& outcomes,
                                            const std::vector<ClassLabel>& pred_classes,
                                            const std::vector<ClassLabel>& gt_classes,
                                            const std::vector<double>& pred_angles,
                                            const std::vector<double>& gt_angles, double rot_tol_deg = 15.0);

/// Rasterizes annotations onto the truth canvas and evaluates them.
std::vector<InstanceRecord> evaluate_spread(const std::vector<Annotation>& annotations,
                                            const synth::GroundTruth& truth, const std::string& spread_id,
                                            const MatchParams& params = {}, double rot_tol_deg = 15.0);

/// Two-sided p for [[a, b], [c, d]]: total probability of the tables with the
/// same margins that are no more likely than the observed one.
double fisher_exact_2x2(long long a, long long b, long long c, long long d);

struct PercentStyle {
    int decimals = 2;
    bool whole_extremes = false;  // 100 and 0 printed without decimals
    bool space = true;            // "98.91 %" vs "98.91%"
};

std::string format_percent(long long count, long long total, const PercentStyle& style);
std::string format_p(double p);

struct SystemRecords {
    std::string name;
    std::vector<InstanceRecord> records;
};

struct ReportOptions {
    std::vector<std::string> facet_keys;
    MatchParams match;
    double rot_tol_deg = 15.0;
    PercentStyle segmentation_style{2, false, true};
    PercentStyle classification_style{1, false, true};
    PercentStyle rotation_style{2, false, true};
    PercentStyle per_class_style{1, true, false};
};

struct EvalReport {
    nlohmann::json data;
    std::string text;
};

/// The first system is compared against each of the others.
EvalReport build_report(const std::vector<SystemRecords>& systems, const ReportOptions& options = {});

}  // namespace kayra::eval
