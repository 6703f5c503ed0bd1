#pragma once

#include "subjectopt/adapters.hpp"
#include "subjectopt/config.hpp"
#include "subjectopt/image.hpp"
#include "subjectopt/model_cache.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace subjectopt {

struct GeneratorHandle {
    std::string backbone_id;
    bool distilled = true;
    int default_steps = 1;
    int default_truncation = 1;
    // Stage-two render steps used after optimization.
    int default_render_steps = 4;
    std::vector<int> latent_shape;
    Resolution resolution;
    bool supports_inversion = false;
    // Hugging Face repository the weights come from; empty for the toy model.
    std::string weights_repo;
};

/// Initial latent z_T for a fixed seed, or an inverted latent that resumes
/// the schedule at `start_step`.
struct Latent {
    std::uint64_t seed = 0;
    int start_step = 0;
    // Non-zero when the latent is bound to a particular schedule length.
    int schedule_steps = 0;
    Eigen::MatrixXd values;
};

struct DifferentiableImage {
    Image image;
    // Maps dL/d(image) to dL/d(adapters) through the last K denoising steps.
    std::function<AdapterGradients(const Image&)> backward;
};

struct InversionResult {
    Latent latent;
    Image reconstruction;
};

struct Schedule {
    int steps = 1;
    int truncation = 1;
};

class Backbone {
public:
    virtual ~Backbone() = default;

    virtual const GeneratorHandle& handle() const = 0;
    virtual std::vector<LayerSpec> layers() const = 0;
    virtual Latent sample_latent(std::uint64_t seed) const = 0;

    virtual DifferentiableImage generate_differentiable(const std::string& prompt, const Latent& latent,
                                                        const AdapterParams& adapters, int steps,
                                                        int truncation) const = 0;

    // `adapters` may be null for the vanilla generator.
    virtual Image generate(const std::string& prompt, const Latent& latent, const AdapterParams* adapters,
                           int steps) const = 0;

    // Default: CapabilityError.
    virtual InversionResult invert(const Image& image, const std::string& prompt, const InversionConfig& config,
                                   int steps) const;
};

// Inference with frozen adapters from a fresh seeded latent.
Image render(const Backbone& backbone, const std::string& prompt, const AdapterParams* adapters, int steps,
             std::uint64_t seed);

AdapterParams init_adapters(const Backbone& backbone, int rank, const std::vector<std::string>& target_layers,
                            std::uint64_t seed, double scale = 1.0);

// Resolves t and K from the config, falling back to the handle's defaults.
// Throws ConfigError when K > t.
Schedule resolve_schedule(const GeneratorHandle& handle, const OptimizationConfig& config);

// Known backbone ids: sdxl-turbo, sd-turbo, flux-schnell, sana, toy.
std::vector<std::string> backbone_ids();
GeneratorHandle catalog_handle(const std::string& backbone_id);

struct BackboneOptions {
    Resolution resolution;
    ModelCache cache;
};

std::unique_ptr<Backbone> make_backbone(const std::string& backbone_id, const BackboneOptions& options);

} // namespace subjectopt
