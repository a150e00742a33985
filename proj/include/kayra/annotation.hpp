#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "kayra/polygon.hpp"

namespace kayra {

inline constexpr int kClassCount = 24;  // 1..22, X, Y

/// Chromosome class. Values 1..22 are autosomes, 23 = X, 24 = Y, 0 = Unknown.
class ClassLabel {
public:
    constexpr ClassLabel() = default;
    constexpr explicit ClassLabel(int value) : value_(value) {}

    static constexpr ClassLabel unknown() { return ClassLabel(0); }
    static constexpr ClassLabel x() { return ClassLabel(23); }
    static constexpr ClassLabel y() { return ClassLabel(24); }
    /// Index 0..23 into a probability vector.
    static constexpr ClassLabel from_index(int idx) { return ClassLabel(idx + 1); }

    [[nodiscard]] constexpr int value() const { return value_; }
    [[nodiscard]] constexpr bool is_unknown() const { return value_ == 0; }
    [[nodiscard]] constexpr bool is_autosome() const { return value_ >= 1 && value_ <= 22; }
    [[nodiscard]] constexpr int index() const { return value_ - 1; }

    [[nodiscard]] std::string str() const;
    /// Accepts "1".."22", "X", "Y", "Unknown"; nullopt otherwise.
    static std::optional<ClassLabel> parse(std::string_view s);

    friend constexpr auto operator<=>(const ClassLabel&, const ClassLabel&) = default;

private:
    int value_ = 0;
};

/// Denver group letter: A-G for autosomes, 'C' for X, 'G' for Y, '?' for Unknown.
char denver_group(ClassLabel label);

using ClassProbs = std::array<double, kClassCount>;

ClassProbs uniform_probs();
/// Distribution flagged as user-asserted: half the mass on `label`, the rest
/// spread evenly; exactly uniform for Unknown.
ClassProbs asserted_probs(ClassLabel label);
/// Argmax class (lowest index on ties).
ClassLabel argmax_class(const ClassProbs& probs);

/// Long-axis orientation as (sin θ, cos θ); θ = 0 is vertical.
struct Rotation {
    double sin = 0.0;
    double cos = 1.0;

    static Rotation from_degrees(double degrees);
    [[nodiscard]] double degrees() const;

    friend bool operator==(const Rotation&, const Rotation&) = default;
};

struct Annotation {
    int id = 0;
    Polygon polygon;
    ClassLabel label;
    ClassProbs probs = uniform_probs();
    Rotation rotation;
    double score = 0.0;
    bool user_asserted = false;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

void to_json(nlohmann::json& j, const Annotation& a);
void from_json(const nlohmann::json& j, Annotation& a);

}  // namespace kayra
