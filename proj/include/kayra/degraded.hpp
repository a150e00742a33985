#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

namespace kayra::orchestrator {

enum class Stage { Prefilter, SemSeg, MaskCrop, Instance0, Instance45, Dedup, Classify, BackTransform };

inline constexpr std::array<Stage, 8> kAllStages{Stage::Prefilter, Stage::SemSeg,     Stage::MaskCrop,
                                                 Stage::Instance0, Stage::Instance45, Stage::Dedup,
                                                 Stage::Classify,  Stage::BackTransform};

enum class StageOutcome { Ok, Degraded, Failed };

enum class JobState { Queued, Running, Done, Partial, Failed };

std::string_view stage_name(Stage s);
std::optional<Stage> parse_stage(std::string_view s);
std::string_view outcome_name(StageOutcome o);
std::string_view job_state_name(JobState s);
std::optional<JobState> parse_job_state(std::string_view s);
[[nodiscard]] inline bool is_terminal(JobState s) {
    return s == JobState::Done || s == JobState::Partial || s == JobState::Failed;
}

struct StageStatus {
    Stage stage = Stage::Prefilter;
    StageOutcome outcome = StageOutcome::Ok;
    double latency_ms = 0.0;
    std::string detail;

    friend bool operator==(const StageStatus&, const StageStatus&) = default;
};

void to_json(nlohmann::json& j, const StageStatus& s);
void from_json(const nlohmann::json& j, StageStatus& s);

enum class FallbackAction {
    FailJob,                    // nothing downstream can run
    Crop2FromCrop1,             // semantic stage lost: crop2 := crop1, skip the semantic sanity check
    UseAngle0Only,
    UseAngle45Only,
    PassThroughDetections,      // dedup lost: keep the merged detections as they are
    LabelUnknown,               // classifier lost: Unknown, uniform probs, rotation (0, 1)
};

struct UpstreamState {
    bool instance0_failed = false;
    bool instance45_failed = false;
};

/// What to do after `stage` failed (post-retry). Total over all stages.
FallbackAction degraded_fallback(Stage stage, const UpstreamState& upstream);

}  // namespace kayra::orchestrator
