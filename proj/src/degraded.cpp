#include "kayra/degraded.hpp"

#include "kayra/error.hpp"

namespace kayra::orchestrator {

std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::Prefilter: return "Prefilter";
        case Stage::SemSeg: return "SemSeg";
        case Stage::MaskCrop: return "MaskCrop";
        case Stage::Instance0: return "Instance0";
        case Stage::Instance45: return "Instance45";
        case Stage::Dedup: return "Dedup";
        case Stage::Classify: return "Classify";
        case Stage::BackTransform: return "BackTransform";
    }
    return "?";
}

std::optional<Stage> parse_stage(std::string_view s) {
    for (Stage st : kAllStages) {
        if (stage_name(st) == s) return st;
    }
    return std::nullopt;
}

std::string_view outcome_name(StageOutcome o) {
    switch (o) {
        case StageOutcome::Ok: return "Ok";
        case StageOutcome::Degraded: return "Degraded";
        case StageOutcome::Failed: return "Failed";
    }
    return "?";
}

std::string_view job_state_name(JobState s) {
    switch (s) {
        case JobState::Queued: return "Queued";
        case JobState::Running: return "Running";
        case JobState::Done: return "Done";
        case JobState::Partial: return "Partial";
        case JobState::Failed: return "Failed";
    }
    return "?";
}

std::optional<JobState> parse_job_state(std::string_view s) {
    for (JobState st : {JobState::Queued, JobState::Running, JobState::Done, JobState::Partial, JobState::Failed}) {
        if (job_state_name(st) == s) return st;
    }
    return std::nullopt;
}

void to_json(nlohmann::json& j, const StageStatus& s) {
    j = {{"stage", stage_name(s.stage)},
         {"outcome", outcome_name(s.outcome)},
         {"latency_ms", s.latency_ms},
         {"detail", s.detail}};
}

void from_json(const nlohmann::json& j, StageStatus& s) {
    const auto stage = parse_stage(j.at("stage").get<std::string>());
    if (!stage) throw Error(ErrorCode::ProtocolError, "unknown stage");
    s.stage = *stage;
    const auto o = j.at("outcome").get<std::string>();
    s.outcome = o == "Ok" ? StageOutcome::Ok : o == "Degraded" ? StageOutcome::Degraded : StageOutcome::Failed;
    s.latency_ms = j.at("latency_ms").get<double>();
    s.detail = j.value("detail", "");
}

FallbackAction degraded_fallback(Stage stage, const UpstreamState& upstream) {
    switch (stage) {
        case Stage::Prefilter: return FallbackAction::FailJob;
        case Stage::SemSeg:
        case Stage::MaskCrop: return FallbackAction::Crop2FromCrop1;
        case Stage::Instance0:
            return upstream.instance45_failed ? FallbackAction::FailJob : FallbackAction::UseAngle45Only;
        case Stage::Instance45:
            return upstream.instance0_failed ? FallbackAction::FailJob : FallbackAction::UseAngle0Only;
        case Stage::Dedup: return FallbackAction::PassThroughDetections;
        case Stage::Classify: return FallbackAction::LabelUnknown;
        case Stage::BackTransform: return FallbackAction::FailJob;
    }
    return FallbackAction::FailJob;
}

}  // namespace kayra::orchestrator
