#pragma once

// Drives the eight stages against a StageBackends implementation, recording
// one status per stage and applying the degraded-mode fallbacks.

#include <string>
#include <vector>

#include "kayra/annotation.hpp"
#include "kayra/cascade.hpp"
#include "kayra/degraded.hpp"
#include "kayra/protocol.hpp"

namespace kayra::cascade {

struct RunOptions {
    int retries = 1;  // extra attempts per stage call before falling back
};

struct CascadeResult {
    std::vector<Annotation> annotations;
    RoiChain chain;
    std::vector<orchestrator::StageStatus> statuses;  // one per stage, pipeline order
    orchestrator::JobState state = orchestrator::JobState::Done;
    std::string error;  // set when state is Failed
    double total_ms = 0.0;
};

CascadeResult run_cascade(const Raster& original, const std::string& image_id, const CascadeParams& params,
                          protocol::StageBackends& backends, const RunOptions& options = {});

nlohmann::json chain_to_json(const RoiChain& chain);
nlohmann::json params_to_json(const CascadeParams& p);
/// Missing keys keep their defaults; unknown keys throw InvalidArgument.
CascadeParams params_from_json(const nlohmann::json& j);

/// Canonical annotation JSON for a result: stable across reruns.
nlohmann::json annotations_to_json(const std::vector<Annotation>& annotations);

}  // namespace kayra::cascade
