#pragma once

#include "subjectopt/backbone.hpp"

#include <cstddef>
#include <cstdint>

namespace subjectopt {

struct ToyOptions {
    int height = 16;
    int width = 16;
    int hidden = 16;
    int default_steps = 2;
    std::uint64_t weight_seed = 0x5eed;
    // Upper bound on the activation tape kept for backpropagation.
    std::size_t memory_budget_bytes = std::size_t{1} << 30;
};

/// Small pixel-space denoiser with exact analytic gradients.
///
/// Each of the t steps applies
///   m   = Mix x                 (token mixing, layer "attn.to_mix")
///   a   = tanh(m Win^T + p + tau_s e)   ("attn.to_in")
///   x  <- x - (1/t) a Wout^T     ("attn.to_out")
/// and the decoder is clamp(x [I + C^T]) with an adapter-only colour
/// transform C ("decoder.color", zero when unadapted). The latent lives in
/// pixel space, so inversion is exact at strength 0.
class ToyBackbone final : public Backbone {
public:
    explicit ToyBackbone(ToyOptions options = {});

    const GeneratorHandle& handle() const override { return handle_; }
    std::vector<LayerSpec> layers() const override;
    Latent sample_latent(std::uint64_t seed) const override;

    DifferentiableImage generate_differentiable(const std::string& prompt, const Latent& latent,
                                                const AdapterParams& adapters, int steps,
                                                int truncation) const override;
    Image generate(const std::string& prompt, const Latent& latent, const AdapterParams* adapters,
                   int steps) const override;
    InversionResult invert(const Image& image, const std::string& prompt, const InversionConfig& config,
                           int steps) const override;

    const ToyOptions& options() const { return options_; }
    Eigen::VectorXd prompt_embedding(const std::string& prompt) const;

private:
    struct Forward;
    Forward run(const std::string& prompt, const Latent& latent, const AdapterParams* adapters, int steps,
                int record_from) const;
    Eigen::MatrixXd denoise_delta(const Eigen::MatrixXd& x, const Eigen::VectorXd& cond, int step, int steps) const;
    void check_latent(const Latent& latent, int steps) const;

    ToyOptions options_;
    GeneratorHandle handle_;
    int tokens_;
    Eigen::MatrixXd mix_;   // tokens x tokens
    Eigen::MatrixXd w_in_;  // hidden x 3
    Eigen::MatrixXd w_out_; // 3 x hidden
    Eigen::VectorXd time_embed_;
};

} // namespace subjectopt
