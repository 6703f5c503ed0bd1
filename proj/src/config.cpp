#include "subjectopt/config.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/rng.hpp"

#include <cmath>
#include <cstdio>

namespace subjectopt {

using nlohmann::json;

namespace {

void require(bool ok, const char* field, const std::string& what) {
    if (!ok) throw ValidationError(field, what);
}

template <typename T>
void read_field(const json& j, const char* key, const std::string& path, T& out) {
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return;
    const std::string field = path.empty() ? key : path + "." + key;
    if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ValidationError(field, "expected a number");
    } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ValidationError(field, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ValidationError(field, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
            if (it->is_number_integer() && !it->is_number_unsigned() && it->get<std::int64_t>() < 0)
                throw ValidationError(field, "expected a non-negative integer");
        }
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ValidationError(field, "expected a string");
    }
    out = it->get<T>();
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    if (it->is_null()) {
        out.reset();
        return;
    }
    T value{};
    read_field(j, key, "", value);
    out = value;
}

const json& object_at(const json& j, const char* key) {
    static const json empty = json::object();
    const auto it = j.find(key);
    if (it == j.end() || it->is_null()) return empty;
    if (!it->is_object()) throw ValidationError(key, "expected an object");
    return *it;
}

} // namespace

void OptimizationConfig::validate() const {
    require(std::isfinite(learning_rate) && learning_rate > 0, "learning_rate", "must be finite and > 0");
    require(std::isfinite(weights.a), "loss_weights.a", "must be finite");
    require(std::isfinite(weights.b), "loss_weights.b", "must be finite");
    require(std::isfinite(weights.c), "loss_weights.c", "must be finite");
    require(weights.a >= 0 && weights.b >= 0 && weights.c >= 0, "loss_weights", "weights must be >= 0");
    require(max_iterations >= 1, "max_iterations", "must be >= 1");
    require(std::isfinite(early_stop.x_percent) && early_stop.x_percent >= 0, "early_stop.x_percent",
            "must be finite and >= 0");
    require(early_stop.n_window >= 1, "early_stop.n_window", "must be >= 1");
    require(max_iterations >= early_stop.n_window, "max_iterations", "must be >= early_stop.n_window");
    require(!truncation_depth || *truncation_depth >= 1, "truncation_depth", "must be >= 1");
    require(!denoise_steps || *denoise_steps >= 1, "denoise_steps", "must be >= 1");
    require(!truncation_depth || !denoise_steps || *truncation_depth <= *denoise_steps, "truncation_depth",
            "must not exceed denoise_steps");
    require(resolution.height >= 1 && resolution.width >= 1, "resolution", "must be positive");
    require(adapter_rank >= 1, "adapter_rank", "must be >= 1");
    require(std::isfinite(adapter_scale), "adapter_scale", "must be finite");
    require(adam.beta1 >= 0 && adam.beta1 < 1, "adam.beta1", "must be in [0, 1)");
    require(adam.beta2 >= 0 && adam.beta2 < 1, "adam.beta2", "must be in [0, 1)");
    require(adam.epsilon > 0, "adam.epsilon", "must be > 0");
    require(frame_stride >= 1, "frame_stride", "must be >= 1");
}

void InversionConfig::validate() const {
    require(strength >= 0.0 && strength <= 1.0, "inversion.strength", "must be in [0, 1]");
    require(renoise_iterations >= 0, "inversion.renoise_iterations", "must be >= 0");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ValidationError("optimizer", "expected 'adam' or 'sgd', got '" + name + "'");
}

json to_json(const OptimizationConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["learning_rate"] = cfg.learning_rate;
    j["loss_weights"] = {{"a", cfg.weights.a}, {"b", cfg.weights.b}, {"c", cfg.weights.c}};
    j["max_iterations"] = cfg.max_iterations;
    j["early_stop"] = {{"enabled", cfg.early_stop.enabled},
                       {"x_percent", cfg.early_stop.x_percent},
                       {"n_window", cfg.early_stop.n_window}};
    j["truncation_depth"] = cfg.truncation_depth ? json(*cfg.truncation_depth) : json(nullptr);
    j["denoise_steps"] = cfg.denoise_steps ? json(*cfg.denoise_steps) : json(nullptr);
    j["resolution"] = {{"height", cfg.resolution.height}, {"width", cfg.resolution.width}};
    j["adapter_rank"] = cfg.adapter_rank;
    j["target_layers"] = cfg.target_layers;
    j["adapter_scale"] = cfg.adapter_scale;
    j["optimizer"] = to_string(cfg.optimizer);
    j["adam"] = {{"beta1", cfg.adam.beta1}, {"beta2", cfg.adam.beta2}, {"epsilon", cfg.adam.epsilon}};
    j["frame_stride"] = cfg.frame_stride;
    return j;
}

OptimizationConfig config_from_json(const json& j, OptimizationConfig cfg) {
    if (!j.is_object()) throw ValidationError("config", "expected an object");
    read_field(j, "seed", "", cfg.seed);
    read_field(j, "learning_rate", "", cfg.learning_rate);
    const json& w = object_at(j, "loss_weights");
    read_field(w, "a", "loss_weights", cfg.weights.a);
    read_field(w, "b", "loss_weights", cfg.weights.b);
    read_field(w, "c", "loss_weights", cfg.weights.c);
    read_field(j, "max_iterations", "", cfg.max_iterations);
    const json& es = object_at(j, "early_stop");
    read_field(es, "enabled", "early_stop", cfg.early_stop.enabled);
    read_field(es, "x_percent", "early_stop", cfg.early_stop.x_percent);
    read_field(es, "n_window", "early_stop", cfg.early_stop.n_window);
    read_optional(j, "truncation_depth", cfg.truncation_depth);
    read_optional(j, "denoise_steps", cfg.denoise_steps);
    const json& res = object_at(j, "resolution");
    read_field(res, "height", "resolution", cfg.resolution.height);
    read_field(res, "width", "resolution", cfg.resolution.width);
    read_field(j, "adapter_rank", "", cfg.adapter_rank);
    if (const auto it = j.find("target_layers"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw ValidationError("target_layers", "expected a list of layer ids");
        cfg.target_layers.clear();
        for (const auto& id : *it) {
            if (!id.is_string()) throw ValidationError("target_layers", "expected a list of layer ids");
            cfg.target_layers.push_back(id.get<std::string>());
        }
    }
    read_field(j, "adapter_scale", "", cfg.adapter_scale);
    if (const auto it = j.find("optimizer"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw ValidationError("optimizer", "expected a string");
        cfg.optimizer = optimizer_from_string(it->get<std::string>());
    }
    const json& adam = object_at(j, "adam");
    read_field(adam, "beta1", "adam", cfg.adam.beta1);
    read_field(adam, "beta2", "adam", cfg.adam.beta2);
    read_field(adam, "epsilon", "adam", cfg.adam.epsilon);
    read_field(j, "frame_stride", "", cfg.frame_stride);
    return cfg;
}

json to_json(const InversionConfig& cfg) {
    return {{"strength", cfg.strength}, {"renoise_iterations", cfg.renoise_iterations}};
}

InversionConfig inversion_from_json(const json& j, InversionConfig cfg) {
    if (!j.is_object()) throw ValidationError("inversion", "expected an object");
    read_field(j, "strength", "inversion", cfg.strength);
    read_field(j, "renoise_iterations", "inversion", cfg.renoise_iterations);
    return cfg;
}

std::string digest_hex(const std::string& text) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

std::string config_hash(const OptimizationConfig& cfg) { return digest_hex(to_json(cfg).dump()); }

} // namespace subjectopt
