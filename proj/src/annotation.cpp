#include "kayra/annotation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>

#include "kayra/error.hpp"

namespace kayra {

std::string ClassLabel::str() const {
    if (value_ >= 1 && value_ <= 22) return std::to_string(value_);
    if (value_ == 23) return "X";
    if (value_ == 24) return "Y";
    return "Unknown";
}

std::optional<ClassLabel> ClassLabel::parse(std::string_view s) {
    if (s == "X") return x();
    if (s == "Y") return y();
    if (s == "Unknown") return unknown();
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v < 1 || v > 22) return std::nullopt;
    return ClassLabel(v);
}

char denver_group(ClassLabel label) {
    const int v = label.value();
    if (v == 23) return 'C';
    if (v == 24) return 'G';
    if (v >= 1 && v <= 3) return 'A';
    if (v >= 4 && v <= 5) return 'B';
    if (v >= 6 && v <= 12) return 'C';
    if (v >= 13 && v <= 15) return 'D';
    if (v >= 16 && v <= 18) return 'E';
    if (v >= 19 && v <= 20) return 'F';
    if (v >= 21 && v <= 22) return 'G';
    return '?';
}

ClassProbs uniform_probs() {
    ClassProbs p;
    p.fill(1.0 / kClassCount);
    return p;
}

ClassProbs asserted_probs(ClassLabel label) {
    if (label.is_unknown()) return uniform_probs();
    ClassProbs p;
    p.fill(0.5 / (kClassCount - 1));
    p[static_cast<std::size_t>(label.index())] = 0.5;
    return p;
}

ClassLabel argmax_class(const ClassProbs& probs) {
    const auto it = std::max_element(probs.begin(), probs.end());
    return ClassLabel::from_index(static_cast<int>(it - probs.begin()));
}

Rotation Rotation::from_degrees(double degrees) {
    const double rad = degrees * std::numbers::pi / 180.0;
    return {std::sin(rad), std::cos(rad)};
}

double Rotation::degrees() const {
    return std::atan2(sin, cos) * 180.0 / std::numbers::pi;
}

void to_json(nlohmann::json& j, const Annotation& a) {
    nlohmann::json poly = nlohmann::json::array();
    for (const auto& p : a.polygon) poly.push_back({p.x, p.y});
    j = nlohmann::json{{"id", a.id},
                       {"polygon", std::move(poly)},
                       {"class", a.label.str()},
                       {"probs", a.probs},
                       {"rotation", {{"sin", a.rotation.sin}, {"cos", a.rotation.cos}}},
                       {"score", a.score}};
    if (a.user_asserted) j["user_asserted"] = true;
}

void from_json(const nlohmann::json& j, Annotation& a) {
    a.id = j.at("id").get<int>();
    a.polygon.clear();
    for (const auto& p : j.at("polygon")) a.polygon.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    const auto label = ClassLabel::parse(j.at("class").get<std::string>());
    if (!label) throw Error(ErrorCode::ProtocolError, "bad class label " + j.at("class").dump());
    a.label = *label;
    const auto& probs = j.at("probs");
    if (probs.size() != kClassCount) throw Error(ErrorCode::ProtocolError, "probs must have 24 entries");
    for (std::size_t i = 0; i < kClassCount; ++i) a.probs[i] = probs[i].get<double>();
    a.rotation = {j.at("rotation").at("sin").get<double>(), j.at("rotation").at("cos").get<double>()};
    a.score = j.at("score").get<double>();
    a.user_asserted = j.value("user_asserted", false);
}

}  // namespace kayra
