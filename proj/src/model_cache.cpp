#include "subjectopt/model_cache.hpp"

#include <cstdlib>

namespace subjectopt {

ModelCache ModelCache::from_environment() {
    ModelCache cache;
    if (const char* root = std::getenv("SUBJECTOPT_MODEL_CACHE"); root && *root) {
        cache.root = root;
    } else if (const char* home = std::getenv("HOME"); home && *home) {
        cache.root = std::filesystem::path(home) / ".cache" / "subjectopt" / "models";
    } else {
        cache.root = ".subjectopt-models";
    }
    if (const char* offline = std::getenv("SUBJECTOPT_OFFLINE"))
        cache.offline = std::string(offline) == "1" || std::string(offline) == "true";
    return cache;
}

bool ModelCache::has_artifact(const std::string& artifact) const {
    std::error_code ec;
    return std::filesystem::exists(artifact_path(artifact), ec);
}

} // namespace subjectopt
