#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace subjectopt {

/// a weighs the DINO distance, b the IR distance, c the background penalty.
struct LossWeights {
    double a = 1.0;
    double b = 1.0;
    double c = 10.0;

    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Stop when the loss has not improved by x percent over the last n iterations.
struct EarlyStopPolicy {
    bool enabled = true;
    double x_percent = 3.0;
    int n_window = 7;

    friend bool operator==(const EarlyStopPolicy&, const EarlyStopPolicy&) = default;
};

enum class OptimizerKind { adam, sgd };

struct AdamSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    friend bool operator==(const AdamSettings&, const AdamSettings&) = default;
};

struct Resolution {
    int height = 512;
    int width = 512;

    friend bool operator==(const Resolution&, const Resolution&) = default;
};

struct OptimizationConfig {
    std::uint64_t seed = 0;
    double learning_rate = 3e-4;
    LossWeights weights;
    int max_iterations = 60;
    EarlyStopPolicy early_stop;
    // Unset: the backbone's default truncation depth K / denoise steps t.
    std::optional<int> truncation_depth;
    std::optional<int> denoise_steps;
    Resolution resolution;
    int adapter_rank = 16;
    // Empty: every attention projection layer of the backbone.
    std::vector<std::string> target_layers;
    double adapter_scale = 1.0;
    OptimizerKind optimizer = OptimizerKind::adam;
    AdamSettings adam;
    // Keep every frame_stride-th frame in the returned history.
    int frame_stride = 1;

    // Throws ValidationError naming the offending field.
    void validate() const;

    friend bool operator==(const OptimizationConfig&, const OptimizationConfig&) = default;
};

struct InversionConfig {
    double strength = 0.75;
    int renoise_iterations = 4;

    void validate() const;

    friend bool operator==(const InversionConfig&, const InversionConfig&) = default;
};

nlohmann::json to_json(const OptimizationConfig& cfg);
// Missing keys keep the values already in `base`; wrong types raise
// ValidationError with the dotted field path.
OptimizationConfig config_from_json(const nlohmann::json& j, OptimizationConfig base = {});

nlohmann::json to_json(const InversionConfig& cfg);
InversionConfig inversion_from_json(const nlohmann::json& j, InversionConfig base = {});

// Stable 16-hex-digit digest of the canonical JSON form.
std::string config_hash(const OptimizationConfig& cfg);
std::string digest_hex(const std::string& text);

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& name);

} // namespace subjectopt
