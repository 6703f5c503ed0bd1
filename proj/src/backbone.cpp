#include "subjectopt/backbone.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/toy_backbone.hpp"

#include <algorithm>
#include <mutex>

namespace subjectopt {

InversionResult Backbone::invert(const Image&, const std::string&, const InversionConfig&, int) const {
    throw CapabilityError("backbone '" + handle().backbone_id + "' does not support inversion");
}

Image render(const Backbone& backbone, const std::string& prompt, const AdapterParams* adapters, int steps,
             std::uint64_t seed) {
    if (steps < 1) throw ConfigError("render steps must be >= 1");
    return backbone.generate(prompt, backbone.sample_latent(seed), adapters, steps);
}

AdapterParams init_adapters(const Backbone& backbone, int rank, const std::vector<std::string>& target_layers,
                            std::uint64_t seed, double scale) {
    return init_adapters(backbone.layers(), rank, target_layers, seed, scale);
}

Schedule resolve_schedule(const GeneratorHandle& handle, const OptimizationConfig& config) {
    Schedule s;
    s.steps = config.denoise_steps.value_or(handle.default_steps);
    s.truncation = config.truncation_depth.value_or(std::min(handle.default_truncation, s.steps));
    if (s.steps < 1) throw ConfigError("denoise steps must be >= 1");
    if (s.truncation < 1) throw ConfigError("truncation depth must be >= 1");
    if (s.truncation > s.steps)
        throw ConfigError("truncation depth K=" + std::to_string(s.truncation) +
                          " exceeds denoise steps t=" + std::to_string(s.steps));
    return s;
}

namespace {

GeneratorHandle make_handle(std::string id, bool distilled, int steps, int truncation, int render_steps,
                            std::vector<int> latent_shape, bool inversion, std::string repo) {
    GeneratorHandle h;
    h.backbone_id = std::move(id);
    h.distilled = distilled;
    h.default_steps = steps;
    h.default_truncation = truncation;
    h.default_render_steps = render_steps;
    h.latent_shape = std::move(latent_shape);
    h.supports_inversion = inversion;
    h.weights_repo = std::move(repo);
    return h;
}

// Weight-backed generator whose inference runtime is not part of this build.
// Every generation entry point reports what is missing and where weights go.
class ExternalBackbone final : public Backbone {
public:
    ExternalBackbone(GeneratorHandle handle, ModelCache cache) : handle_(std::move(handle)), cache_(std::move(cache)) {}

    const GeneratorHandle& handle() const override { return handle_; }
    std::vector<LayerSpec> layers() const override { unavailable(); }
    Latent sample_latent(std::uint64_t) const override { unavailable(); }
    DifferentiableImage generate_differentiable(const std::string&, const Latent&, const AdapterParams&, int,
                                                int) const override {
        unavailable();
    }
    Image generate(const std::string&, const Latent&, const AdapterParams*, int) const override { unavailable(); }
    InversionResult invert(const Image& image, const std::string& prompt, const InversionConfig& config,
                           int steps) const override {
        if (!handle_.supports_inversion) return Backbone::invert(image, prompt, config, steps);
        unavailable();
    }

private:
    [[noreturn]] void unavailable() const {
        std::lock_guard lock(mutex_);
        const auto path = cache_.artifact_path(handle_.backbone_id);
        if (!cache_.has_artifact(handle_.backbone_id))
            throw AvailabilityError("weights for backbone '" + handle_.backbone_id + "' not found at " +
                                    path.string() + "; download them with `huggingface-cli download " +
                                    handle_.weights_repo + " --local-dir " + path.string() +
                                    "` or point SUBJECTOPT_MODEL_CACHE at an existing cache");
        throw AvailabilityError("backbone '" + handle_.backbone_id + "' found at " + path.string() +
                                " but this build has no diffusion inference runtime; use --backbone toy");
    }

    GeneratorHandle handle_;
    ModelCache cache_;
    mutable std::mutex mutex_;
};

} // namespace

std::vector<std::string> backbone_ids() { return {"sdxl-turbo", "sd-turbo", "flux-schnell", "sana", "toy"}; }

GeneratorHandle catalog_handle(const std::string& id) {
    if (id == "sdxl-turbo")
        return make_handle(id, true, 1, 1, 4, {4, 64, 64}, true, "stabilityai/sdxl-turbo");
    if (id == "sd-turbo")
        return make_handle(id, true, 1, 1, 4, {4, 64, 64}, true, "stabilityai/sd-turbo");
    if (id == "flux-schnell")
        return make_handle(id, true, 1, 1, 4, {16, 64, 64}, false, "black-forest-labs/FLUX.1-schnell");
    if (id == "sana")
        return make_handle(id, false, 20, 3, 20, {32, 16, 16}, false, "Efficient-Large-Model/Sana_1600M_512px_diffusers");
    if (id == "toy") return ToyBackbone().handle();
    throw ConfigError("unknown backbone id '" + id + "'");
}

std::unique_ptr<Backbone> make_backbone(const std::string& id, const BackboneOptions& options) {
    if (id == "toy") {
        ToyOptions toy;
        const auto in_range = [](int v) { return v >= 8 && v <= 32; };
        if (in_range(options.resolution.height) && in_range(options.resolution.width)) {
            toy.height = options.resolution.height;
            toy.width = options.resolution.width;
        }
        return std::make_unique<ToyBackbone>(toy);
    }
    GeneratorHandle handle = catalog_handle(id);
    handle.resolution = options.resolution;
    return std::make_unique<ExternalBackbone>(std::move(handle), options.cache);
}

} // namespace subjectopt
