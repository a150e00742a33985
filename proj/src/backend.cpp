#include "kayra/backend.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <regex>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "kayra/image_io.hpp"

namespace kayra::backend {

using nlohmann::json;

// Filenames and dataset splits.

std::optional<ClinicalFields> parse_filename(const std::string& filename) {
    static const std::regex re(R"(^([^_/\\]+)_([0-9]{4})_([0-9]+)_([^_/\\]+)_([^_./\\]+)\.(tif|tiff|png|bmp)$)",
                               std::regex::icase);
    const auto slash = filename.find_last_of("/\\");
    const std::string base = slash == std::string::npos ? filename : filename.substr(slash + 1);
    std::smatch m;
    if (!std::regex_match(base, m, re)) return std::nullopt;
    ClinicalFields f;
    f.patient_id = m[1];
    f.year = std::stoi(m[2]);
    try {
        f.image_no = std::stoi(m[3]);
    } catch (const std::out_of_range&) {
        return std::nullopt;
    }
    f.cultivation = m[4];
    f.type = m[5];
    return f;
}

json record_to_json(const ImageRecord& r) {
    json j{{"image_id", r.image_id}, {"tenant_id", r.tenant_id}, {"filename", r.filename},
           {"width", r.width},       {"height", r.height},       {"ingested_at", r.ingested_at}};
    if (r.fields) {
        j["fields"] = {{"patient_id", r.fields->patient_id},
                       {"year", r.fields->year},
                       {"image_no", r.fields->image_no},
                       {"cultivation", r.fields->cultivation},
                       {"type", r.fields->type}};
    } else {
        j["fields"] = nullptr;
    }
    return j;
}

DatasetSplit split_dataset_by_patient(const std::vector<ImageRecord>& records, const SplitRatios& ratios,
                                      std::uint64_t seed) {
    for (double r : {ratios.train, ratios.val, ratios.test}) {
        if (!(r >= 0.0)) throw Error(ErrorCode::InvalidArgument, "ratios must be non-negative");
    }
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
        throw Error(ErrorCode::InvalidArgument, "ratios must sum to 1");
    }
    std::set<std::string> unique;
    for (const auto& r : records) {
        if (!r.fields || r.fields->patient_id.empty()) {
            throw Error(ErrorCode::MissingPatientId, "image " + r.image_id + " has no patient id");
        }
        unique.insert(r.fields->patient_id);
    }
    std::vector<std::string> patients(unique.begin(), unique.end());
    std::mt19937_64 rng(seed);
    std::shuffle(patients.begin(), patients.end(), rng);
    const auto n = static_cast<double>(patients.size());
    const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
    const auto n_val = std::min(patients.size() - n_train, static_cast<std::size_t>(std::llround(ratios.val * n)));

    DatasetSplit out;
    std::map<std::string, int> where;
    for (std::size_t i = 0; i < patients.size(); ++i) {
        const int bucket = i < n_train ? 0 : i < n_train + n_val ? 1 : 2;
        where[patients[i]] = bucket;
        (bucket == 0 ? out.train_patients : bucket == 1 ? out.val_patients : out.test_patients).push_back(patients[i]);
    }
    for (const auto& r : records) {
        const int bucket = where.at(r.fields->patient_id);
        (bucket == 0 ? out.train : bucket == 1 ? out.val : out.test).push_back(r.image_id);
    }
    return out;
}

// Edits.

namespace {

json polygon_json(const Polygon& p) {
    json a = json::array();
    for (const auto& v : p) a.push_back({v.x, v.y});
    return a;
}

Polygon polygon_from(const json& j) {
    if (!j.is_array()) throw Error(ErrorCode::InvalidArgument, "polygon must be an array of [x, y]");
    Polygon p;
    for (const auto& v : j) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
            throw Error(ErrorCode::InvalidArgument, "polygon vertex must be [x, y]");
        }
        p.push_back({v[0].get<double>(), v[1].get<double>()});
    }
    return p;
}

ClassLabel label_from(const json& j) {
    const auto l = j.is_string() ? ClassLabel::parse(j.get<std::string>()) : std::nullopt;
    if (!l) throw Error(ErrorCode::InvalidArgument, "bad class label " + j.dump());
    return *l;
}

int id_from(const json& j) {
    if (!j.contains("id") || !j["id"].is_number_integer()) throw Error(ErrorCode::InvalidArgument, "edit needs an id");
    return j["id"].get<int>();
}

}  // namespace

json edit_to_json(const Edit& e) {
    return std::visit(
        [](const auto& v) -> json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, DeleteEdit>) {
                return {{"type", "delete"}, {"id", v.id}};
            } else if constexpr (std::is_same_v<T, MergeEdit>) {
                json j{{"type", "merge"}, {"ids", v.ids}};
                if (v.label) j["class"] = v.label->str();
                return j;
            } else if constexpr (std::is_same_v<T, SplitEdit>) {
                return {{"type", "split"},
                        {"id", v.id},
                        {"polygon_a", polygon_json(v.polygon_a)},
                        {"polygon_b", polygon_json(v.polygon_b)}};
            } else if constexpr (std::is_same_v<T, RedrawEdit>) {
                return {{"type", "redraw"}, {"id", v.id}, {"polygon", polygon_json(v.polygon)}};
            } else if constexpr (std::is_same_v<T, ReclassifyEdit>) {
                return {{"type", "reclassify"}, {"id", v.id}, {"class", v.label.str()}};
            } else if constexpr (std::is_same_v<T, RotateEdit>) {
                return {{"type", "rotate"}, {"id", v.id}, {"degrees", v.degrees}};
            } else {
                return {{"type", "flip"}, {"id", v.id}};
            }
        },
        e);
}

Edit edit_from_json(const json& j) {
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
        throw Error(ErrorCode::InvalidArgument, "edit must be an object with a type");
    }
    const std::string type = j["type"];
    if (type == "delete") return DeleteEdit{id_from(j)};
    if (type == "merge") {
        MergeEdit m;
        if (!j.contains("ids") || !j["ids"].is_array()) throw Error(ErrorCode::InvalidArgument, "merge needs ids");
        for (const auto& v : j["ids"]) {
            if (!v.is_number_integer()) throw Error(ErrorCode::InvalidArgument, "merge ids must be integers");
            m.ids.push_back(v.get<int>());
        }
        if (j.contains("class") && !j["class"].is_null()) m.label = label_from(j["class"]);
        return m;
    }
    if (type == "split") {
        if (!j.contains("polygon_a") || !j.contains("polygon_b")) {
            throw Error(ErrorCode::InvalidArgument, "split needs polygon_a and polygon_b");
        }
        return SplitEdit{id_from(j), polygon_from(j["polygon_a"]), polygon_from(j["polygon_b"])};
    }
    if (type == "redraw") {
        if (!j.contains("polygon")) throw Error(ErrorCode::InvalidArgument, "redraw needs a polygon");
        return RedrawEdit{id_from(j), polygon_from(j["polygon"])};
    }
    if (type == "reclassify") {
        if (!j.contains("class")) throw Error(ErrorCode::InvalidArgument, "reclassify needs a class");
        return ReclassifyEdit{id_from(j), label_from(j["class"])};
    }
    if (type == "rotate") {
        if (!j.contains("degrees") || !j["degrees"].is_number()) {
            throw Error(ErrorCode::InvalidArgument, "rotate needs degrees");
        }
        return RotateEdit{id_from(j), j["degrees"].get<double>()};
    }
    if (type == "flip") return FlipEdit{id_from(j)};
    throw Error(ErrorCode::InvalidArgument, "unknown edit type " + type);
}

json set_to_json(const AnnotationSet& s) {
    return {{"image_id", s.image_id}, {"version", s.version}, {"next_id", s.next_id}, {"annotations", s.annotations}};
}

AnnotationSet set_from_json(const json& j) {
    AnnotationSet s;
    s.image_id = j.at("image_id").get<std::string>();
    s.version = j.at("version").get<int>();
    s.next_id = j.at("next_id").get<int>();
    s.annotations = j.at("annotations").get<std::vector<Annotation>>();
    return s;
}

AnnotationSet initial_set(const std::string& image_id, std::vector<Annotation> annotations) {
    AnnotationSet s;
    s.image_id = image_id;
    s.annotations = std::move(annotations);
    for (const auto& a : s.annotations) s.next_id = std::max(s.next_id, a.id + 1);
    return s;
}

namespace {

std::size_t position_of(const AnnotationSet& s, int id) {
    for (std::size_t i = 0; i < s.annotations.size(); ++i)
        if (s.annotations[i].id == id) return i;
    throw Error(ErrorCode::UnknownAnnotation, "annotation " + std::to_string(id));
}

Region checked_region(const Polygon& p) {
    if (p.size() < 3) throw Error(ErrorCode::InvalidArgument, "polygon needs at least 3 vertices");
    for (const auto& v : p) {
        if (!std::isfinite(v.x) || !std::isfinite(v.y)) throw Error(ErrorCode::InvalidArgument, "non-finite vertex");
    }
    Region r = rasterize(p);
    if (r.empty()) throw Error(ErrorCode::InvalidArgument, "polygon covers no pixel centre");
    return r;
}

}  // namespace

AnnotationSet apply_edit_to(const AnnotationSet& set, const Edit& edit) {
    AnnotationSet s = set;
    auto& list = s.annotations;
    std::visit(
        [&](const auto& e) {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, DeleteEdit>) {
                list.erase(list.begin() + static_cast<std::ptrdiff_t>(position_of(s, e.id)));
            } else if constexpr (std::is_same_v<T, MergeEdit>) {
                if (e.ids.size() < 2) throw Error(ErrorCode::InvalidArgument, "merge needs at least two ids");
                if (std::set<int>(e.ids.begin(), e.ids.end()).size() != e.ids.size()) {
                    throw Error(ErrorCode::InvalidArgument, "merge ids must be distinct");
                }
                std::vector<std::size_t> pos;
                for (int id : e.ids) pos.push_back(position_of(s, id));
                Region u;
                double score = 0.0;
                for (std::size_t p : pos) {
                    u = u.empty() ? rasterize(list[p].polygon) : region_union(u, rasterize(list[p].polygon));
                    score = std::max(score, list[p].score);
                }
                if (u.empty() || largest_component(u).area() != u.area()) {
                    throw Error(ErrorCode::InvalidArgument, "merged annotations must form one connected piece");
                }
                Annotation merged;
                merged.id = s.next_id++;
                merged.polygon = trace_outline(u);
                merged.label = e.label.value_or(ClassLabel::unknown());
                merged.probs = asserted_probs(merged.label);
                merged.rotation = list[pos.front()].rotation;
                merged.score = score;
                merged.user_asserted = true;
                const std::size_t at = *std::min_element(pos.begin(), pos.end());
                std::sort(pos.begin(), pos.end(), std::greater<>());
                for (std::size_t p : pos) list.erase(list.begin() + static_cast<std::ptrdiff_t>(p));
                list.insert(list.begin() + static_cast<std::ptrdiff_t>(at), std::move(merged));
            } else if constexpr (std::is_same_v<T, SplitEdit>) {
                const std::size_t p = position_of(s, e.id);
                checked_region(e.polygon_a);
                checked_region(e.polygon_b);
                Annotation a = list[p], b = list[p];
                a.id = s.next_id++;
                b.id = s.next_id++;
                a.polygon = e.polygon_a;
                b.polygon = e.polygon_b;
                list[p] = std::move(a);
                list.insert(list.begin() + static_cast<std::ptrdiff_t>(p) + 1, std::move(b));
            } else if constexpr (std::is_same_v<T, RedrawEdit>) {
                const std::size_t p = position_of(s, e.id);
                checked_region(e.polygon);
                list[p].polygon = e.polygon;
            } else if constexpr (std::is_same_v<T, ReclassifyEdit>) {
                auto& a = list[position_of(s, e.id)];
                a.label = e.label;
                a.probs = asserted_probs(e.label);
                a.user_asserted = true;
            } else if constexpr (std::is_same_v<T, RotateEdit>) {
                if (!std::isfinite(e.degrees)) throw Error(ErrorCode::InvalidArgument, "non-finite rotation");
                auto& a = list[position_of(s, e.id)];
                a.rotation = Rotation::from_degrees(a.rotation.degrees() + e.degrees);
            } else {
                auto& a = list[position_of(s, e.id)];
                a.rotation.sin = -a.rotation.sin;
            }
        },
        edit);
    ++s.version;
    return s;
}

json event_to_json(const AuditEvent& e) {
    return {{"event_id", e.event_id}, {"image_id", e.image_id},   {"tenant_id", e.tenant_id},
            {"actor", e.actor},       {"timestamp", e.timestamp}, {"edit", edit_to_json(e.edit)},
            {"resulting_version", e.resulting_version}};
}

// Karyogram and ISCN.

const std::array<std::string, kKaryogramGroups>& karyogram_group_names() {
    static const std::array<std::string, kKaryogramGroups> names{
        "1–" "3", "4–" "5", "6–" "12", "13–" "15", "16–" "18", "19–" "22",
        "X", "Y", "Unknown"};
    return names;
}

int karyogram_group(ClassLabel label) {
    const int v = label.value();
    if (v >= 1 && v <= 3) return 0;
    if (v >= 4 && v <= 5) return 1;
    if (v >= 6 && v <= 12) return 2;
    if (v >= 13 && v <= 15) return 3;
    if (v >= 16 && v <= 18) return 4;
    if (v >= 19 && v <= 22) return 5;
    if (label == ClassLabel::x()) return 6;
    if (label == ClassLabel::y()) return 7;
    return 8;
}

namespace {

/// Upright patch of one annotation with white outside the mask.
Raster upright_patch(const Annotation& a, const Raster& image) {
    Region r = rasterize(a.polygon);
    const Rect inside = rect_intersection(r.bbox, image.bounds());
    if (inside.empty()) return {};
    r = region_tighten({inside, crop(r.mask, {inside.x0 - r.bbox.x0, inside.y0 - r.bbox.y0, inside.w, inside.h})});
    if (r.empty()) return {};
    Raster patch = crop(image, r.bbox);
    for (int y = 0; y < r.bbox.h; ++y)
        for (int x = 0; x < r.bbox.w; ++x)
            if (!r.mask.at(x, y)) patch.at(x, y) = 255;
    const double theta = a.rotation.degrees();
    const auto rotated = rotate_expand(patch, theta);
    const BinaryMask m = rotate_mask(r.mask, rotated.transform, rotated.image.width(), rotated.image.height());
    Raster out = rotated.image;
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x)
            if (!m.at(x, y)) out.at(x, y) = 255;
    const Rect tight = tight_bbox(m);
    return tight.empty() ? Raster{} : crop(out, tight);
}

std::string ascii_name(std::string s) {
    const std::string dash = "–";
    for (auto p = s.find(dash); p != std::string::npos; p = s.find(dash)) s.replace(p, dash.size(), "-");
    return s;
}

}  // namespace

KaryogramLayout compose_karyogram(const std::vector<Annotation>& annotations, const Raster& image) {
    struct Item {
        ClassLabel label;
        int id;
        Raster patch;
    };
    std::array<std::vector<Item>, kKaryogramGroups> rows;
    for (const auto& a : annotations) {
        rows[static_cast<std::size_t>(karyogram_group(a.label))].push_back({a.label, a.id, upright_patch(a, image)});
    }
    for (auto& row : rows) {
        std::stable_sort(row.begin(), row.end(), [](const Item& x, const Item& y) {
            if (x.label != y.label) return x.label.value() < y.label.value();
            return x.patch.height() > y.patch.height();
        });
    }

    constexpr int kLabelWidth = 110, kGap = 12, kMinRow = 40;
    int width = kLabelWidth + kGap, height = kGap;
    std::array<int, kKaryogramGroups> row_h{};
    for (std::size_t g = 0; g < rows.size(); ++g) {
        int w = kLabelWidth + kGap, h = kMinRow;
        for (const auto& it : rows[g]) {
            w += it.patch.width() + kGap;
            h = std::max(h, it.patch.height());
        }
        row_h[g] = h;
        width = std::max(width, w);
        height += h + kGap;
    }

    KaryogramLayout layout;
    cv::Mat canvas(height, width, CV_8UC1, cv::Scalar(255));
    int y = kGap;
    for (std::size_t g = 0; g < rows.size(); ++g) {
        KaryogramLayout::Group group{karyogram_group_names()[g], {}};
        cv::putText(canvas, ascii_name(group.name), {8, y + row_h[g] / 2 + 8}, cv::FONT_HERSHEY_SIMPLEX, 0.7,
                    cv::Scalar(0), 2);
        int x = kLabelWidth + kGap;
        for (const auto& it : rows[g]) {
            group.ids.push_back(it.id);
            const int top = y + row_h[g] - it.patch.height();
            for (int py = 0; py < it.patch.height(); ++py)
                for (int px = 0; px < it.patch.width(); ++px) canvas.at<std::uint8_t>(top + py, x + px) = it.patch.at(px, py);
            x += it.patch.width() + kGap;
        }
        y += row_h[g] + kGap;
        cv::line(canvas, {0, y - kGap / 2}, {width - 1, y - kGap / 2}, cv::Scalar(200), 1);
        layout.groups.push_back(std::move(group));
    }
    layout.image = Raster(width, height);
    std::copy(canvas.datastart, canvas.dataend, layout.image.pixels().begin());
    return layout;
}

IscnSuggestion iscn_suggest(const std::vector<Annotation>& annotations) {
    std::array<int, kClassCount + 1> counts{};
    bool uncertain = false;
    for (const auto& a : annotations) {
        if (a.label.is_unknown()) uncertain = true;
        else ++counts[static_cast<std::size_t>(a.label.value())];
    }
    std::string text = std::to_string(annotations.size());
    const std::string sex =
        std::string(static_cast<std::size_t>(counts[23]), 'X') + std::string(static_cast<std::size_t>(counts[24]), 'Y');
    if (!sex.empty()) text += "," + sex;
    for (int k = 1; k <= 22; ++k) {
        const int c = counts[static_cast<std::size_t>(k)];
        for (int i = 2; i < c; ++i) text += ",+" + std::to_string(k);
        for (int i = c; i < 2; ++i) text += ",-" + std::to_string(k);
    }
    return {text, uncertain};
}

// Service.

json state_to_json(const SetState& s) {
    json j = set_to_json(s.set);
    j["signed_off"] = s.signed_off;
    j["signoff_user"] = s.signoff_user ? json(*s.signoff_user) : json(nullptr);
    return j;
}

namespace {

constexpr const char* kSchema = R"(
    CREATE TABLE IF NOT EXISTS tenants (tenant_id TEXT PRIMARY KEY, name TEXT NOT NULL);
    CREATE TABLE IF NOT EXISTS tokens (
        token TEXT PRIMARY KEY,
        tenant_id TEXT NOT NULL REFERENCES tenants(tenant_id));
    CREATE TABLE IF NOT EXISTS images (
        seq INTEGER PRIMARY KEY AUTOINCREMENT,
        image_id TEXT UNIQUE NOT NULL,
        tenant_id TEXT NOT NULL REFERENCES tenants(tenant_id),
        filename TEXT NOT NULL,
        width INTEGER NOT NULL,
        height INTEGER NOT NULL,
        fields TEXT,
        ingested_at INTEGER NOT NULL,
        raster BLOB NOT NULL);
    CREATE TABLE IF NOT EXISTS annotation_sets (
        image_id TEXT PRIMARY KEY REFERENCES images(image_id),
        current_version INTEGER NOT NULL,
        signed_off INTEGER NOT NULL DEFAULT 0,
        signoff_user TEXT,
        source_job TEXT);
    CREATE TABLE IF NOT EXISTS snapshots (
        image_id TEXT NOT NULL REFERENCES images(image_id),
        version INTEGER NOT NULL,
        body TEXT NOT NULL,
        PRIMARY KEY (image_id, version));
    CREATE TABLE IF NOT EXISTS audit_events (
        event_id INTEGER PRIMARY KEY AUTOINCREMENT,
        image_id TEXT NOT NULL REFERENCES images(image_id),
        tenant_id TEXT NOT NULL,
        actor TEXT NOT NULL,
        timestamp INTEGER NOT NULL,
        edit TEXT NOT NULL,
        resulting_version INTEGER NOT NULL,
        UNIQUE (image_id, resulting_version));
    CREATE TRIGGER IF NOT EXISTS audit_no_update BEFORE UPDATE ON audit_events
        BEGIN SELECT RAISE(ABORT, 'audit log is append-only'); END;
    CREATE TRIGGER IF NOT EXISTS audit_no_delete BEFORE DELETE ON audit_events
        BEGIN SELECT RAISE(ABORT, 'audit log is append-only'); END;
)";

constexpr const char* kImageColumns = "image_id, tenant_id, filename, width, height, fields, ingested_at";

ImageRecord read_record(db::Statement& s) {
    ImageRecord r;
    r.image_id = s.text(0);
    r.tenant_id = s.text(1);
    r.filename = s.text(2);
    r.width = static_cast<int>(s.integer(3));
    r.height = static_cast<int>(s.integer(4));
    if (!s.is_null(5)) {
        const json f = json::parse(s.text(5));
        r.fields = ClinicalFields{f["patient_id"], f["year"], f["image_no"], f["cultivation"], f["type"]};
    }
    r.ingested_at = s.integer(6);
    return r;
}

AuditEvent read_event(db::Statement& s) {
    AuditEvent e;
    e.event_id = s.integer(0);
    e.image_id = s.text(1);
    e.tenant_id = s.text(2);
    e.actor = s.text(3);
    e.timestamp = s.integer(4);
    e.edit = edit_from_json(json::parse(s.text(5)));
    e.resulting_version = static_cast<int>(s.integer(6));
    return e;
}

constexpr const char* kEventColumns = "event_id, image_id, tenant_id, actor, timestamp, edit, resulting_version";

[[noreturn]] void not_found(const std::string& what) { throw Error(ErrorCode::NotFound, what); }

}  // namespace

Backend::Backend(const std::string& db_path, std::shared_ptr<orchestrator::JobQueue> queue, orchestrator::NowFn now)
    : db_(db_path), queue_(std::move(queue)), now_(std::move(now)) {
    db_.exec(kSchema);
}

void Backend::add_tenant(const Tenant& t) {
    if (t.tenant_id.empty()) throw Error(ErrorCode::InvalidArgument, "empty tenant id");
    std::lock_guard lock(mu_);
    db_.query("INSERT INTO tenants (tenant_id, name) VALUES (?, ?) ON CONFLICT(tenant_id) DO UPDATE SET name = excluded.name",
              t.tenant_id, t.name)
        .run();
}

void Backend::add_token(const std::string& token, const std::string& tenant_id) {
    if (token.empty()) throw Error(ErrorCode::InvalidArgument, "empty token");
    std::lock_guard lock(mu_);
    if (!db_.query("SELECT 1 FROM tenants WHERE tenant_id = ?", tenant_id).step()) not_found("tenant " + tenant_id);
    db_.query("INSERT INTO tokens (token, tenant_id) VALUES (?, ?) "
              "ON CONFLICT(token) DO UPDATE SET tenant_id = excluded.tenant_id",
              token, tenant_id)
        .run();
}

void Backend::load_token_file(const std::string& path) {
    const auto bytes = io::read_file(path);
    json doc;
    try {
        doc = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, path + ": " + e.what());
    }
    if (!doc.is_array()) throw Error(ErrorCode::InvalidArgument, path + ": expected an array");
    for (const auto& e : doc) {
        const std::string tenant = e.at("tenant_id");
        add_tenant({tenant, e.value("name", tenant)});
        add_token(e.at("token"), tenant);
    }
}

std::string Backend::authenticate(const std::string& bearer_token) {
    std::lock_guard lock(mu_);
    auto s = db_.query("SELECT tenant_id FROM tokens WHERE token = ?", bearer_token);
    if (!s.step()) throw Error(ErrorCode::Unauthorized, "unknown token");
    return s.text(0);
}

ImageRecord Backend::ingest(const std::string& tenant_id, const std::vector<std::uint8_t>& bytes,
                            const std::string& filename) {
    const Raster raster = io::decode_image(bytes);
    const auto png = io::encode_png(raster);
    ImageRecord r;
    r.tenant_id = tenant_id;
    r.filename = filename;
    r.width = raster.width();
    r.height = raster.height();
    r.fields = parse_filename(filename);
    r.ingested_at = now_();
    std::optional<std::string> fields;
    if (r.fields) {
        fields = json{{"patient_id", r.fields->patient_id},
                      {"year", r.fields->year},
                      {"image_no", r.fields->image_no},
                      {"cultivation", r.fields->cultivation},
                      {"type", r.fields->type}}
                     .dump();
    }
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    auto ins = db_.query("INSERT INTO images (image_id, tenant_id, filename, width, height, fields, ingested_at, raster) "
                         "VALUES (hex(randomblob(16)), ?, ?, ?, ?, ?, ?, ?)",
                         tenant_id, filename, r.width, r.height, fields, r.ingested_at);
    ins.bind_blob(7, png);
    ins.run();
    char id[32];
    std::snprintf(id, sizeof id, "img-%06lld", static_cast<long long>(db_.last_insert_rowid()));
    db_.query("UPDATE images SET image_id = ? WHERE seq = ?", std::string(id), db_.last_insert_rowid()).run();
    tx.commit();
    r.image_id = id;
    return r;
}

ImageRecord Backend::image(const std::string& tenant_id, const std::string& image_id) {
    std::lock_guard lock(mu_);
    auto s = db_.query(std::string("SELECT ") + kImageColumns + " FROM images WHERE image_id = ? AND tenant_id = ?",
                       image_id, tenant_id);
    if (!s.step()) not_found("image " + image_id);
    return read_record(s);
}

std::vector<ImageRecord> Backend::images(const std::string& tenant_id) {
    std::lock_guard lock(mu_);
    auto s = db_.query(std::string("SELECT ") + kImageColumns + " FROM images WHERE tenant_id = ? ORDER BY seq",
                       tenant_id);
    std::vector<ImageRecord> out;
    while (s.step()) out.push_back(read_record(s));
    return out;
}

Raster Backend::load_raster(const std::string& image_id) {
    std::vector<std::uint8_t> png;
    {
        std::lock_guard lock(mu_);
        auto s = db_.query("SELECT raster FROM images WHERE image_id = ?", image_id);
        if (!s.step()) not_found("image " + image_id);
        png = s.blob(0);
    }
    return io::decode_image(png);
}

void Backend::require_image(const std::string& tenant_id, const std::string& image_id) {
    if (!db_.query("SELECT 1 FROM images WHERE image_id = ? AND tenant_id = ?", image_id, tenant_id).step()) {
        not_found("image " + image_id);
    }
}

int Backend::current_version(const std::string& image_id) {
    auto s = db_.query("SELECT current_version FROM annotation_sets WHERE image_id = ?", image_id);
    if (!s.step()) not_found("no annotations for image " + image_id);
    return static_cast<int>(s.integer(0));
}

AnnotationSet Backend::snapshot(const std::string& image_id, int version) {
    auto s = db_.query("SELECT body FROM snapshots WHERE image_id = ? AND version = ?", image_id, version);
    if (!s.step()) throw Error(ErrorCode::UnknownVersion, "version " + std::to_string(version));
    return set_from_json(json::parse(s.text(0)));
}

std::string Backend::submit_job(const std::string& tenant_id, const std::string& image_id) {
    {
        std::lock_guard lock(mu_);
        require_image(tenant_id, image_id);
    }
    return queue_->enqueue(tenant_id, image_id, "db:" + image_id);
}

void Backend::adopt_result(const orchestrator::Job& job) {
    if (job.state != orchestrator::JobState::Done && job.state != orchestrator::JobState::Partial) return;
    const auto result = queue_->result(job.job_id);
    if (!result) return;
    const AnnotationSet set = initial_set(job.image_id, result->annotations.get<std::vector<Annotation>>());
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    if (db_.query("SELECT 1 FROM annotation_sets WHERE image_id = ?", job.image_id).step()) return;
    db_.query("INSERT INTO annotation_sets (image_id, current_version, source_job) VALUES (?, 0, ?)", job.image_id,
              job.job_id)
        .run();
    db_.query("INSERT INTO snapshots (image_id, version, body) VALUES (?, 0, ?)", job.image_id,
              set_to_json(set).dump())
        .run();
    tx.commit();
}

json Backend::job(const std::string& tenant_id, const std::string& job_id) {
    const auto job = queue_->find(job_id);
    if (!job || job->tenant_id != tenant_id) not_found("job " + job_id);
    adopt_result(*job);
    json j = orchestrator::job_to_json(*job);
    if (const auto r = queue_->result(job_id);
        r && job->state != orchestrator::JobState::Queued && job->state != orchestrator::JobState::Running) {
        j["result"] = orchestrator::result_to_json(*r);
    }
    return j;
}

void Backend::import_annotations(const std::string& tenant_id, const std::string& image_id,
                                 std::vector<Annotation> annotations) {
    const AnnotationSet set = initial_set(image_id, std::move(annotations));
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    require_image(tenant_id, image_id);
    if (db_.query("SELECT 1 FROM annotation_sets WHERE image_id = ?", image_id).step()) {
        throw Error(ErrorCode::VersionConflict, "image " + image_id + " already has annotations");
    }
    db_.query("INSERT INTO annotation_sets (image_id, current_version) VALUES (?, 0)", image_id).run();
    db_.query("INSERT INTO snapshots (image_id, version, body) VALUES (?, 0, ?)", image_id, set_to_json(set).dump())
        .run();
    tx.commit();
}

SetState Backend::annotations(const std::string& tenant_id, const std::string& image_id, std::optional<int> version) {
    std::lock_guard lock(mu_);
    require_image(tenant_id, image_id);
    auto s = db_.query("SELECT current_version, signed_off, signoff_user FROM annotation_sets WHERE image_id = ?",
                       image_id);
    if (!s.step()) not_found("no annotations for image " + image_id);
    const int current = static_cast<int>(s.integer(0));
    const int v = version.value_or(current);
    if (v < 0 || v > current) throw Error(ErrorCode::UnknownVersion, "version " + std::to_string(v));
    SetState st;
    st.set = snapshot(image_id, v);
    st.signed_off = s.integer(1) != 0 && v == current;
    st.signoff_user = st.signed_off ? s.opt_text(2) : std::nullopt;
    return st;
}

std::pair<SetState, AuditEvent> Backend::apply_edit(const std::string& tenant_id, const std::string& image_id,
                                                    const Edit& edit, int expected_version, const std::string& actor) {
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    require_image(tenant_id, image_id);
    auto s = db_.query("SELECT current_version, signed_off FROM annotation_sets WHERE image_id = ?", image_id);
    if (!s.step()) not_found("no annotations for image " + image_id);
    const int current = static_cast<int>(s.integer(0));
    if (s.integer(1) != 0) throw Error(ErrorCode::SignedOffImmutable, "image " + image_id + " is signed off");
    if (expected_version != current) {
        throw Error(ErrorCode::VersionConflict,
                    "expected version " + std::to_string(expected_version) + ", current is " + std::to_string(current));
    }
    const AnnotationSet next = apply_edit_to(snapshot(image_id, current), edit);

    AuditEvent e;
    e.image_id = image_id;
    e.tenant_id = tenant_id;
    e.actor = actor;
    e.timestamp = now_();
    e.edit = edit;
    e.resulting_version = next.version;
    db_.query("INSERT INTO audit_events (image_id, tenant_id, actor, timestamp, edit, resulting_version) "
              "VALUES (?, ?, ?, ?, ?, ?)",
              image_id, tenant_id, actor, e.timestamp, edit_to_json(edit).dump(), next.version)
        .run();
    e.event_id = db_.last_insert_rowid();
    db_.query("INSERT INTO snapshots (image_id, version, body) VALUES (?, ?, ?)", image_id, next.version,
              set_to_json(next).dump())
        .run();
    db_.query("UPDATE annotation_sets SET current_version = ? WHERE image_id = ?", next.version, image_id).run();
    tx.commit();
    return {SetState{next, false, std::nullopt}, e};
}

std::vector<AuditEvent> Backend::audit(const std::string& tenant_id, const std::string& image_id) {
    std::lock_guard lock(mu_);
    require_image(tenant_id, image_id);
    auto s = db_.query(std::string("SELECT ") + kEventColumns +
                           " FROM audit_events WHERE image_id = ? ORDER BY resulting_version",
                       image_id);
    std::vector<AuditEvent> out;
    while (s.step()) out.push_back(read_event(s));
    return out;
}

AnnotationSet Backend::replay_audit(const std::string& tenant_id, const std::string& image_id, int up_to_version) {
    std::lock_guard lock(mu_);
    require_image(tenant_id, image_id);
    const int current = current_version(image_id);
    if (up_to_version < 0 || up_to_version > current) {
        throw Error(ErrorCode::UnknownVersion, "version " + std::to_string(up_to_version));
    }
    AnnotationSet set = snapshot(image_id, 0);
    auto s = db_.query(std::string("SELECT ") + kEventColumns +
                           " FROM audit_events WHERE image_id = ? AND resulting_version <= ? "
                           "ORDER BY resulting_version",
                       image_id, up_to_version);
    while (s.step()) {
        const AuditEvent e = read_event(s);
        set = apply_edit_to(set, e.edit);
        if (set.version != e.resulting_version) throw Error(ErrorCode::IoError, "audit log has a gap");
    }
    if (set.version != up_to_version) throw Error(ErrorCode::IoError, "audit log is incomplete");
    return set;
}

SetState Backend::signoff(const std::string& tenant_id, const std::string& image_id, const std::string& user) {
    std::lock_guard lock(mu_);
    db::Transaction tx(db_);
    require_image(tenant_id, image_id);
    auto s = db_.query("SELECT current_version, signed_off FROM annotation_sets WHERE image_id = ?", image_id);
    if (!s.step()) not_found("no annotations for image " + image_id);
    if (s.integer(1) != 0) throw Error(ErrorCode::SignedOffImmutable, "image " + image_id + " is already signed off");
    const int current = static_cast<int>(s.integer(0));
    db_.query("UPDATE annotation_sets SET signed_off = 1, signoff_user = ? WHERE image_id = ?", user, image_id).run();
    SetState st{snapshot(image_id, current), true, user};
    tx.commit();
    return st;
}

KaryogramLayout Backend::karyogram(const std::string& tenant_id, const std::string& image_id,
                                   std::optional<int> version) {
    const SetState st = annotations(tenant_id, image_id, version);
    return compose_karyogram(st.set.annotations, load_raster(image_id));
}

IscnSuggestion Backend::iscn(const std::string& tenant_id, const std::string& image_id, std::optional<int> version) {
    return iscn_suggest(annotations(tenant_id, image_id, version).set.annotations);
}

}  // namespace kayra::backend
