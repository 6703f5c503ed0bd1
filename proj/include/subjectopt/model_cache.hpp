#pragma once

#include <filesystem>
#include <string>

namespace subjectopt {

/// Where pretrained weights are looked up. SUBJECTOPT_MODEL_CACHE overrides
/// the root; SUBJECTOPT_OFFLINE=1 substitutes deterministic stubs for
/// weight-backed feature extractors.
struct ModelCache {
    std::filesystem::path root;
    bool offline = false;

    static ModelCache from_environment();

    std::filesystem::path artifact_path(const std::string& artifact) const { return root / artifact; }
    bool has_artifact(const std::string& artifact) const;
};

} // namespace subjectopt
