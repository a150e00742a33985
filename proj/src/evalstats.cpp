#include "kayra/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <tuple>

#include <boost/multiprecision/cpp_int.hpp>

#include "kayra/polygon.hpp"

namespace kayra::eval {

using nlohmann::json;

std::string_view outcome_name(Outcome o) {
    switch (o) {
        case Outcome::Correct: return "Correct";
        case Outcome::MergedWithOther: return "MergedWithOther";
        case Outcome::Missed: return "Missed";
    }
    return "Missed";
}

std::optional<Outcome> parse_outcome(std::string_view s) {
    for (Outcome o : {Outcome::Correct, Outcome::MergedWithOther, Outcome::Missed}) {
        if (outcome_name(o) == s) return o;
    }
    return std::nullopt;
}

// --- matching --------------------------------------------------------------------

std::vector<MatchOutcome> match_instances(const std::vector<Region>& preds, const std::vector<Region>& gts,
                                          const MatchParams& params) {
    const std::size_t np = preds.size(), ng = gts.size();
    std::vector<long long> gt_area(ng), pred_area(np);
    for (std::size_t g = 0; g < ng; ++g) gt_area[g] = gts[g].area();
    for (std::size_t p = 0; p < np; ++p) pred_area[p] = preds[p].area();

    std::vector<long long> inter(ng * np, 0);
    for (std::size_t g = 0; g < ng; ++g) {
        for (std::size_t p = 0; p < np; ++p) {
            if (rect_intersection(gts[g].bbox, preds[p].bbox).empty()) continue;
            inter[g * np + p] = region_intersection(gts[g], preds[p]);
        }
    }
    auto cover = [&](std::size_t g, std::size_t p) {
        return gt_area[g] == 0 ? 0.0 : static_cast<double>(inter[g * np + p]) / static_cast<double>(gt_area[g]);
    };
    // Largest coverage of any GT other than g by pred p.
    auto cross = [&](std::size_t g, std::size_t p) {
        double best = 0.0;
        for (std::size_t o = 0; o < ng; ++o) {
            if (o != g) best = std::max(best, cover(o, p));
        }
        return best;
    };

    std::vector<std::tuple<double, std::size_t, std::size_t>> candidates;
    for (std::size_t g = 0; g < ng; ++g) {
        for (std::size_t p = 0; p < np; ++p) {
            const long long i = inter[g * np + p];
            if (i == 0) continue;
            const double iou = static_cast<double>(i) / static_cast<double>(gt_area[g] + pred_area[p] - i);
            if (iou >= params.iou_thresh && cross(g, p) <= params.cross_cover) candidates.emplace_back(iou, g, p);
        }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });

    std::vector<MatchOutcome> out(ng);
    std::vector<bool> pred_used(np, false);
    for (const auto& [iou, g, p] : candidates) {
        if (out[g].kind == Outcome::Correct || pred_used[p]) continue;
        out[g] = {Outcome::Correct, static_cast<int>(p)};
        pred_used[p] = true;
    }
    for (std::size_t g = 0; g < ng; ++g) {
        if (out[g].kind == Outcome::Correct) continue;
        double best = -1.0;
        for (std::size_t p = 0; p < np; ++p) {
            const double c = cover(g, p);
            if (c >= params.cross_cover && cross(g, p) >= params.cross_cover && c > best) {
                best = c;
                out[g] = {Outcome::MergedWithOther, static_cast<int>(p)};
            }
        }
    }
    return out;
}

std::vector<MatchOutcome> match_instances(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts,
                                          const MatchParams& params) {
    const BinaryMask* ref = !gts.empty() ? &gts.front() : (!preds.empty() ? &preds.front() : nullptr);
    std::vector<Region> p, g;
    for (const auto* list : {&preds, &gts}) {
        for (const auto& m : *list) {
            if (m.width() != ref->width() || m.height() != ref->height()) {
                throw Error(ErrorCode::DimensionMismatch, "all masks must share one canvas");
            }
        }
    }
    for (const auto& m : preds) p.push_back(region_from_mask(m));
    for (const auto& m : gts) g.push_back(region_from_mask(m));
    return match_instances(p, g, params);
}

double axis_difference_degrees(double a, double b) {
    double d = std::fmod(std::abs(a - b), 180.0);
    return std::min(d, 180.0 - d);
}

// --- records ---------------------------------------------------------------------

json record_to_json(const InstanceRecord& r) {
    json j = {{"spread_id", r.spread_id},
              {"gt_id", r.gt_id},
              {"outcome", outcome_name(r.outcome)},
              {"gt_class", r.gt_class.str()},
              {"pred_class", r.pred_class ? json(r.pred_class->str()) : json(nullptr)},
              {"class_correct", r.class_correct},
              {"rotation_correct", r.rotation_correct},
              {"tags", r.tags}};
    return j;
}

InstanceRecord record_from_json(const json& j) {
    InstanceRecord r;
    r.spread_id = j.at("spread_id").get<std::string>();
    r.gt_id = j.at("gt_id").get<int>();
    const auto o = parse_outcome(j.at("outcome").get<std::string>());
    if (!o) throw Error(ErrorCode::InvalidArgument, "unknown outcome");
    r.outcome = *o;
    const auto gt = ClassLabel::parse(j.at("gt_class").get<std::string>());
    if (!gt) throw Error(ErrorCode::InvalidArgument, "unknown class");
    r.gt_class = *gt;
    if (!j.at("pred_class").is_null()) r.pred_class = ClassLabel::parse(j.at("pred_class").get<std::string>());
    r.class_correct = j.at("class_correct").get<bool>();
    r.rotation_correct = j.at("rotation_correct").get<bool>();
    r.tags = j.value("tags", std::map<std::string, std::string>{});
    return r;
}

std::vector<InstanceRecord> accuracy_counts(const std::vector<MatchOutcome>& outcomes,
                                            const std::vector<ClassLabel>& pred_classes,
                                            const std::vector<ClassLabel>& gt_classes,
                                            const std::vector<double>& pred_angles,
                                            const std::vector<double>& gt_angles, double rot_tol_deg) {
    if (outcomes.size() != gt_classes.size() || gt_classes.size() != gt_angles.size() ||
        pred_classes.size() != pred_angles.size()) {
        throw Error(ErrorCode::DimensionMismatch, "per-instance inputs differ in length");
    }
    std::vector<InstanceRecord> out;
    for (std::size_t g = 0; g < outcomes.size(); ++g) {
        InstanceRecord r;
        r.gt_id = static_cast<int>(g);
        r.outcome = outcomes[g].kind;
        r.gt_class = gt_classes[g];
        if (outcomes[g].kind == Outcome::Correct) {
            const auto p = static_cast<std::size_t>(outcomes[g].pred);
            r.pred_class = pred_classes.at(p);
            r.class_correct = pred_classes[p] == gt_classes[g];
            r.rotation_correct = axis_difference_degrees(pred_angles[p], gt_angles[g]) <= rot_tol_deg + 1e-9;
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<InstanceRecord> evaluate_spread(const std::vector<Annotation>& annotations,
                                            const synth::GroundTruth& truth, const std::string& spread_id,
                                            const MatchParams& params, double rot_tol_deg) {
    const Rect canvas{0, 0, truth.width, truth.height};
    std::vector<Region> preds;
    std::vector<ClassLabel> pred_classes;
    std::vector<double> pred_angles;
    for (const auto& a : annotations) {
        Region r = a.polygon.size() >= 3 ? rasterize(a.polygon) : Region{};
        const Rect inside = rect_intersection(r.bbox, canvas);
        if (inside.empty()) {
            r = Region{};
        } else if (inside != r.bbox) {
            r = region_tighten(
                {inside, crop(r.mask, {inside.x0 - r.bbox.x0, inside.y0 - r.bbox.y0, inside.w, inside.h})});
        }
        preds.push_back(std::move(r));
        pred_classes.push_back(a.label);
        pred_angles.push_back(a.rotation.degrees());
    }
    std::vector<Region> gts;
    std::vector<ClassLabel> gt_classes;
    std::vector<double> gt_angles;
    for (const auto& g : truth.instances) {
        gts.push_back(g.mask);
        gt_classes.push_back(g.label);
        gt_angles.push_back(g.angle_degrees);
    }
    auto records =
        accuracy_counts(match_instances(preds, gts, params), pred_classes, gt_classes, pred_angles, gt_angles, rot_tol_deg);
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].spread_id = spread_id;
        records[i].gt_id = truth.instances[i].id;
        records[i].tags = truth.tags;
    }
    return records;
}

// --- Fisher ----------------------------------------------------------------------

double fisher_exact_2x2(long long a, long long b, long long c, long long d) {
    using boost::multiprecision::cpp_int;
    using boost::multiprecision::cpp_rational;
    if (a < 0 || b < 0 || c < 0 || d < 0) throw Error(ErrorCode::InvalidArgument, "negative cell count");
    const long long r1 = a + b, r2 = c + d, c1 = a + c, n = r1 + r2;
    if (n == 0) throw Error(ErrorCode::AllZeroMargins, "empty table");

    auto binom = [](long long nn, long long k) {
        cpp_int v = 1;
        k = std::min(k, nn - k);
        for (long long i = 1; i <= k; ++i) v = v * (nn - k + i) / i;
        return v;
    };
    // Hypergeometric weights share the denominator C(n, c1).
    const long long lo = std::max(0LL, c1 - r2), hi = std::min(r1, c1);
    std::vector<cpp_int> w;
    for (long long x = lo; x <= hi; ++x) w.push_back(binom(r1, x) * binom(r2, c1 - x));
    const cpp_int& observed = w[static_cast<std::size_t>(a - lo)];
    const cpp_int scale = 1000000000000LL;  // relative tolerance 1e-12
    cpp_int sum = 0;
    for (const auto& v : w) {
        if (v * scale <= observed * (scale + 1)) sum += v;
    }
    const double p = cpp_rational(sum, binom(n, c1)).convert_to<double>();
    return std::min(p, 1.0);
}

// --- formatting ------------------------------------------------------------------

std::string format_percent(long long count, long long total, const PercentStyle& style) {
    const std::string unit = style.space ? " %" : "%";
    if (total <= 0) return "---";
    if (style.whole_extremes && (count == total || count == 0)) return (count == 0 ? "0" : "100") + unit;
    std::ostringstream os;
    os << std::fixed << std::setprecision(style.decimals)
       << 100.0 * static_cast<double>(count) / static_cast<double>(total) << unit;
    return os.str();
}

std::string format_p(double p) {
    if (p < 0.0001) return "<0.0001";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << p;
    return os.str();
}

// --- report ----------------------------------------------------------------------

namespace {

struct Counts {
    long long total = 0, correct = 0, merged = 0, missed = 0, cls = 0, rot = 0;
};

Counts count(const std::vector<InstanceRecord>& records) {
    Counts c;
    for (const auto& r : records) {
        ++c.total;
        c.correct += r.outcome == Outcome::Correct;
        c.merged += r.outcome == Outcome::MergedWithOther;
        c.missed += r.outcome == Outcome::Missed;
        c.cls += r.class_correct;
        c.rot += r.rotation_correct;
    }
    return c;
}

json fisher_entry(const std::string& a, const std::string& b, long long ca, long long na, long long cb, long long nb) {
    json e = {{"systems", {a, b}}, {"table", {{ca, na - ca}, {cb, nb - cb}}}};
    if (na + nb > 0) {
        const double p = fisher_exact_2x2(ca, na - ca, cb, nb - cb);
        e["p"] = p;
        e["p_text"] = format_p(p);
        e["significant"] = p < 0.05;
    }
    return e;
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }
std::string lpad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

std::string cell(long long n, long long total, const PercentStyle& st) {
    return std::to_string(n) + " (" + format_percent(n, total, st) + ")";
}

std::string frac_cell(long long n, long long total, const PercentStyle& st) {
    return std::to_string(n) + " / " + std::to_string(total) + " (" + format_percent(n, total, st) + ")";
}

/// Renders rows as aligned columns; the first column is left-aligned.
std::string render(const std::string& title, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()), 0);
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream os;
    os << title << "\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            os << (i == 0 ? pad(r[i], width[i]) : "  " + lpad(r[i], width[i]));
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace

EvalReport build_report(const std::vector<SystemRecords>& systems, const ReportOptions& options) {
    if (systems.empty()) throw Error(ErrorCode::InvalidArgument, "report needs at least one system");
    EvalReport rep;
    json& d = rep.data;
    d["config"] = {{"iou_thresh", options.match.iou_thresh},
                   {"cross_cover", options.match.cross_cover},
                   {"rot_tol_deg", options.rot_tol_deg},
                   {"rotation", "evaluated modulo 180 degrees"},
                   {"fisher", "two-sided; sum of probabilities of tables no more likely than the observed"}};

    std::vector<Counts> counts;
    for (const auto& s : systems) counts.push_back(count(s.records));

    std::vector<std::vector<std::string>> seg_rows{{"System", "Correct", "Merged with other object", "Missed"}};
    std::vector<std::vector<std::string>> cls_rows{{"System", "Correct classification", "Incorrect classification"}};
    std::vector<std::vector<std::string>> rot_rows{{"System", "Correct orientation", "Total"}};
    for (std::size_t i = 0; i < systems.size(); ++i) {
        const Counts& c = counts[i];
        const auto& name = systems[i].name;
        d["segmentation"].push_back({{"system", name},
                                     {"total", c.total},
                                     {"correct", c.correct},
                                     {"merged", c.merged},
                                     {"missed", c.missed},
                                     {"correct_pct", format_percent(c.correct, c.total, options.segmentation_style)},
                                     {"merged_pct", format_percent(c.merged, c.total, options.segmentation_style)},
                                     {"missed_pct", format_percent(c.missed, c.total, options.segmentation_style)}});
        d["classification"].push_back(
            {{"system", name},
             {"total", c.total},
             {"correct", c.cls},
             {"incorrect", c.total - c.cls},
             {"correct_pct", format_percent(c.cls, c.total, options.classification_style)},
             {"incorrect_pct", format_percent(c.total - c.cls, c.total, options.classification_style)}});
        d["rotation"].push_back({{"system", name},
                                 {"total", c.total},
                                 {"correct", c.rot},
                                 {"correct_pct", format_percent(c.rot, c.total, options.rotation_style)}});
        seg_rows.push_back({name, cell(c.correct, c.total, options.segmentation_style),
                            cell(c.merged, c.total, options.segmentation_style),
                            cell(c.missed, c.total, options.segmentation_style)});
        cls_rows.push_back({name, cell(c.cls, c.total, options.classification_style),
                            cell(c.total - c.cls, c.total, options.classification_style)});
        rot_rows.push_back({name, cell(c.rot, c.total, options.rotation_style), std::to_string(c.total)});
    }
    d["segmentation_p"] = json::array();
    d["classification_p"] = json::array();
    d["rotation_p"] = json::array();
    std::string p_lines;
    for (std::size_t i = 1; i < systems.size(); ++i) {
        const auto &a = counts[0], &b = counts[i];
        const auto &na = systems[0].name, &nb = systems[i].name;
        d["segmentation_p"].push_back(fisher_entry(na, nb, a.correct, a.total, b.correct, b.total));
        d["classification_p"].push_back(fisher_entry(na, nb, a.cls, a.total, b.cls, b.total));
        d["rotation_p"].push_back(fisher_entry(na, nb, a.rot, a.total, b.rot, b.total));
        for (const char* key : {"segmentation_p", "classification_p", "rotation_p"}) {
            const auto& e = d[key].back();
            if (e.contains("p_text")) {
                p_lines += std::string(key) + " " + na + " vs " + nb + ": p = " + e["p_text"].get<std::string>() + "\n";
            }
        }
    }

    // Per-class table.
    std::vector<std::string> header{"Group", "Class"};
    for (const auto& s : systems) header.push_back(s.name + " correct");
    if (systems.size() > 1) header.push_back("p-value");
    std::vector<std::vector<std::string>> class_rows{header};
    std::vector<ClassLabel> order;
    for (int v = 1; v <= 24; ++v) order.emplace_back(v);
    d["per_class"] = json::array();
    for (ClassLabel label : order) {
        std::vector<std::pair<long long, long long>> per;  // (correct, total)
        bool present = false;
        for (const auto& s : systems) {
            long long ok = 0, tot = 0;
            for (const auto& r : s.records) {
                if (r.gt_class != label) continue;
                ++tot;
                ok += r.class_correct;
            }
            present = present || tot > 0;
            per.emplace_back(ok, tot);
        }
        if (!present) continue;
        json row = {{"class", label.str()}, {"group", std::string(1, denver_group(label))}};
        std::vector<std::string> text{std::string(1, denver_group(label)), label.str()};
        for (std::size_t i = 0; i < systems.size(); ++i) {
            row["systems"].push_back({{"system", systems[i].name},
                                      {"correct", per[i].first},
                                      {"total", per[i].second},
                                      {"pct", format_percent(per[i].first, per[i].second, options.per_class_style)}});
            text.push_back(frac_cell(per[i].first, per[i].second, options.per_class_style));
        }
        if (systems.size() > 1) {
            const auto& [ca, na] = per[0];
            const auto& [cb, nb] = per[1];
            // A single instance per system supports no test.
            if (na >= 2 && nb >= 2) {
                json e = fisher_entry(systems[0].name, systems[1].name, ca, na, cb, nb);
                row["p"] = e["p"];
                row["p_text"] = e["p_text"];
                row["significant"] = e["significant"];
                text.push_back(e["p_text"].get<std::string>() + (e["significant"].get<bool>() ? " *" : ""));
            } else {
                text.push_back("---");
            }
        }
        d["per_class"].push_back(row);
        class_rows.push_back(text);
    }

    // Facets.
    d["facets"] = json::object();
    std::string facet_text;
    for (const auto& key : options.facet_keys) {
        std::vector<std::vector<std::string>> rows{{"System", key, "N", "Segmentation correct", "Classification correct"}};
        for (const auto& s : systems) {
            std::map<std::string, std::vector<InstanceRecord>> groups;
            for (const auto& r : s.records) {
                const auto it = r.tags.find(key);
                groups[it == r.tags.end() ? "(none)" : it->second].push_back(r);
            }
            for (const auto& [value, recs] : groups) {
                const Counts c = count(recs);
                d["facets"][key].push_back(
                    {{"system", s.name},
                     {"value", value},
                     {"total", c.total},
                     {"segmentation_correct", c.correct},
                     {"classification_correct", c.cls},
                     {"segmentation_pct", format_percent(c.correct, c.total, options.classification_style)},
                     {"classification_pct", format_percent(c.cls, c.total, options.classification_style)}});
                rows.push_back({s.name, value, std::to_string(c.total),
                                cell(c.correct, c.total, options.classification_style),
                                cell(c.cls, c.total, options.classification_style)});
            }
        }
        facet_text += "\n" + render("Facet: " + key, rows);
    }

    std::ostringstream tol;
    tol << options.rot_tol_deg;
    std::ostringstream text;
    text << render("Segmentation", seg_rows) << "\n"
         << render("Classification", cls_rows) << "\n"
         << render("Orientation (modulo 180 deg, tolerance " + tol.str() + " deg)", rot_rows)
         << "\n"
         << render("Per-class classification (* p < 0.05)", class_rows);
    if (!p_lines.empty()) text << "\nFisher's exact test (two-sided, sum of small probabilities)\n" << p_lines;
    text << facet_text;
    rep.text = text.str();
    return rep;
}

}  // namespace kayra::eval
