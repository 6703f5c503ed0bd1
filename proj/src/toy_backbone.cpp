#include "subjectopt/toy_backbone.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace subjectopt {

namespace {

constexpr const char* kMix = "attn.to_mix";
constexpr const char* kIn = "attn.to_in";
constexpr const char* kOut = "attn.to_out";
constexpr const char* kDecoder = "decoder.color";

const LoraFactors* factors(const AdapterParams* adapters, const char* id) {
    return adapters ? adapters->find(id) : nullptr;
}

Eigen::MatrixXd effective(const Eigen::MatrixXd& frozen, const LoraFactors* f, double scale) {
    if (!f) return frozen;
    return frozen + scale * (f->up * f->down);
}

// Accumulates the gradient of an effective weight into its LoRA factors.
void accumulate(AdapterGradients& grads, const char* id, const LoraFactors& f, double scale,
                const Eigen::MatrixXd& grad_weight) {
    auto& g = grads.at(id);
    g.up.noalias() += scale * grad_weight * f.down.transpose();
    g.down.noalias() += scale * f.up.transpose() * grad_weight;
}

Eigen::MatrixXd to_tokens(const Image& img) { return img.tokens(); }

Image from_tokens(const Eigen::MatrixXd& tokens, int h, int w) {
    Image img(h, w);
    img.tokens() = tokens;
    return img;
}

} // namespace

struct ToyBackbone::Forward {
    struct Step {
        int index = 0;
        Eigen::MatrixXd x;  // input to the step
        Eigen::MatrixXd ax; // down_mix * x (empty without a mix adapter)
        Eigen::MatrixXd m;
        Eigen::MatrixXd a;
    };
    std::vector<Step> tape;
    Eigen::MatrixXd x_final;
    Eigen::MatrixXd u_decoder;
    Eigen::MatrixXd y;
    Eigen::MatrixXd w_in_eff;
    Eigen::MatrixXd w_out_eff;
    Image image;
};

ToyBackbone::ToyBackbone(ToyOptions options) : options_(options) {
    if (options_.height < 1 || options_.width < 1 || options_.hidden < 1 || options_.default_steps < 1)
        throw ConfigError("toy backbone dimensions must be positive");
    tokens_ = options_.height * options_.width;

    handle_.backbone_id = "toy";
    handle_.distilled = true;
    handle_.default_steps = options_.default_steps;
    handle_.default_truncation = options_.default_steps;
    handle_.default_render_steps = 4;
    handle_.latent_shape = {options_.height, options_.width, 3};
    handle_.resolution = {options_.height, options_.width};
    handle_.supports_inversion = true;

    Rng rng(options_.weight_seed);
    const double mix_std = 1.0 / std::sqrt(static_cast<double>(tokens_));
    mix_.resize(tokens_, tokens_);
    for (int i = 0; i < tokens_; ++i)
        for (int j = 0; j < tokens_; ++j) mix_(i, j) = rng.normal() * mix_std;
    w_in_.resize(options_.hidden, 3);
    for (int i = 0; i < options_.hidden; ++i)
        for (int j = 0; j < 3; ++j) w_in_(i, j) = rng.normal();
    const double out_std = 0.5 / std::sqrt(static_cast<double>(options_.hidden));
    w_out_.resize(3, options_.hidden);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < options_.hidden; ++j) w_out_(i, j) = rng.normal() * out_std;
    time_embed_.resize(options_.hidden);
    for (int i = 0; i < options_.hidden; ++i) time_embed_(i) = 0.5 * rng.normal();
}

std::vector<LayerSpec> ToyBackbone::layers() const {
    return {{kMix, tokens_, tokens_}, {kIn, 3, options_.hidden}, {kOut, options_.hidden, 3}, {kDecoder, 3, 3}};
}

Latent ToyBackbone::sample_latent(std::uint64_t seed) const {
    Latent latent;
    latent.seed = seed;
    latent.values.resize(tokens_, 3);
    Rng rng(seed);
    for (int i = 0; i < tokens_; ++i)
        for (int c = 0; c < 3; ++c) latent.values(i, c) = 0.5 + 0.2 * rng.normal();
    return latent;
}

Eigen::VectorXd ToyBackbone::prompt_embedding(const std::string& prompt) const {
    Rng rng(fnv1a64(prompt) ^ options_.weight_seed);
    Eigen::VectorXd p(options_.hidden);
    for (int i = 0; i < options_.hidden; ++i) p(i) = 0.5 * rng.normal();
    return p;
}

void ToyBackbone::check_latent(const Latent& latent, int steps) const {
    if (steps < 1) throw ConfigError("denoise steps must be >= 1");
    if (latent.values.rows() != tokens_ || latent.values.cols() != 3)
        throw ConfigError("latent shape does not match the toy backbone resolution");
    if (latent.schedule_steps != 0 && latent.schedule_steps != steps)
        throw ConfigError("inverted latent was produced for t=" + std::to_string(latent.schedule_steps) +
                          " but generation requested t=" + std::to_string(steps));
    if (latent.start_step < 0 || latent.start_step > steps) throw ConfigError("latent start step out of range");
}

Eigen::MatrixXd ToyBackbone::denoise_delta(const Eigen::MatrixXd& x, const Eigen::VectorXd& cond, int step,
                                           int steps) const {
    const double tau = static_cast<double>(steps - step) / steps;
    Eigen::MatrixXd h = (mix_ * x) * w_in_.transpose();
    h.rowwise() += (cond + tau * time_embed_).transpose();
    return (1.0 / steps) * (h.array().tanh().matrix() * w_out_.transpose());
}

ToyBackbone::Forward ToyBackbone::run(const std::string& prompt, const Latent& latent, const AdapterParams* adapters,
                                      int steps, int record_from) const {
    check_latent(latent, steps);
    const double scale = adapters ? adapters->scale : 1.0;
    const LoraFactors* mix_f = factors(adapters, kMix);
    const LoraFactors* dec_f = factors(adapters, kDecoder);

    Forward f;
    f.w_in_eff = effective(w_in_, factors(adapters, kIn), scale);
    f.w_out_eff = effective(w_out_, factors(adapters, kOut), scale);
    const Eigen::VectorXd cond = prompt_embedding(prompt);
    const double gamma = 1.0 / steps;

    Eigen::MatrixXd x = latent.values;
    for (int s = latent.start_step; s < steps; ++s) {
        const double tau = static_cast<double>(steps - s) / steps;
        Forward::Step step;
        step.index = s;
        step.m = mix_ * x;
        if (mix_f) {
            step.ax = mix_f->down * x;
            step.m.noalias() += scale * (mix_f->up * step.ax);
        }
        Eigen::MatrixXd h = step.m * f.w_in_eff.transpose();
        h.rowwise() += (cond + tau * time_embed_).transpose();
        step.a = h.array().tanh().matrix();
        Eigen::MatrixXd next = x - gamma * (step.a * f.w_out_eff.transpose());
        if (s >= record_from) {
            step.x = std::move(x);
            f.tape.push_back(std::move(step));
        }
        x = std::move(next);
    }

    f.x_final = x;
    f.y = x;
    if (dec_f) {
        f.u_decoder = x * dec_f->down.transpose();
        f.y.noalias() += scale * (f.u_decoder * dec_f->up.transpose());
    }
    f.image = clamp01(from_tokens(f.y, options_.height, options_.width));
    return f;
}

Image ToyBackbone::generate(const std::string& prompt, const Latent& latent, const AdapterParams* adapters,
                            int steps) const {
    return run(prompt, latent, adapters, steps, steps).image;
}

DifferentiableImage ToyBackbone::generate_differentiable(const std::string& prompt, const Latent& latent,
                                                         const AdapterParams& adapters, int steps,
                                                         int truncation) const {
    if (truncation < 1 || truncation > steps)
        throw ConfigError("truncation depth K=" + std::to_string(truncation) + " must be in [1, t=" +
                          std::to_string(steps) + "]");
    for (const auto& id : adapters.layer_ids()) {
        const auto specs = layers();
        const bool known = std::any_of(specs.begin(), specs.end(), [&](const LayerSpec& s) { return s.id == id; });
        if (!known) throw ConfigError("adapter layer '" + id + "' does not exist in the toy backbone");
    }
    const int first = std::max(latent.start_step, steps - truncation);
    const std::size_t per_step = static_cast<std::size_t>(tokens_) * (3 * 3 + options_.hidden) * sizeof(double);
    const std::size_t tape_bytes = per_step * static_cast<std::size_t>(std::max(0, steps - first));
    if (tape_bytes > options_.memory_budget_bytes) {
        const auto fit = static_cast<long long>(options_.memory_budget_bytes / per_step);
        throw SizingError("backpropagation tape needs " + std::to_string(tape_bytes) + " bytes, budget is " +
                          std::to_string(options_.memory_budget_bytes) + "; reduce truncation depth K to " +
                          std::to_string(std::max(1LL, fit)) + " or less");
    }

    auto fwd = std::make_shared<Forward>(run(prompt, latent, &adapters, steps, first));
    DifferentiableImage out;
    out.image = fwd->image;
    out.backward = [this, fwd, adapters, steps](const Image& grad_image) {
        const double scale = adapters.scale;
        const double gamma = 1.0 / steps;
        AdapterGradients grads = zero_gradients(adapters);
        const LoraFactors* mix_f = adapters.find(kMix);
        const LoraFactors* in_f = adapters.find(kIn);
        const LoraFactors* out_f = adapters.find(kOut);
        const LoraFactors* dec_f = adapters.find(kDecoder);

        Eigen::MatrixXd gy = to_tokens(grad_image);
        for (Eigen::Index i = 0; i < gy.size(); ++i) {
            const double y = fwd->y.data()[i];
            if (!(y > 0.0 && y < 1.0)) gy.data()[i] = 0.0;
        }

        Eigen::MatrixXd gx = gy;
        if (dec_f) {
            auto& g = grads.at(kDecoder);
            const Eigen::MatrixXd du = scale * (gy * dec_f->up);
            g.up.noalias() += scale * (gy.transpose() * fwd->u_decoder);
            g.down.noalias() += du.transpose() * fwd->x_final;
            gx.noalias() += du * dec_f->down;
        }

        for (auto it = fwd->tape.rbegin(); it != fwd->tape.rend(); ++it) {
            const Forward::Step& st = *it;
            const Eigen::MatrixXd d_eps = -gamma * gx;
            if (out_f) accumulate(grads, kOut, *out_f, scale, d_eps.transpose() * st.a);
            const Eigen::MatrixXd da = d_eps * fwd->w_out_eff;
            const Eigen::MatrixXd dh = (da.array() * (1.0 - st.a.array().square())).matrix();
            if (in_f) accumulate(grads, kIn, *in_f, scale, dh.transpose() * st.m);
            const Eigen::MatrixXd dm = dh * fwd->w_in_eff;
            Eigen::MatrixXd dx = gx;
            dx.noalias() += mix_.transpose() * dm;
            if (mix_f) {
                auto& g = grads.at(kMix);
                const Eigen::MatrixXd bdm = mix_f->up.transpose() * dm;
                g.up.noalias() += scale * (dm * st.ax.transpose());
                g.down.noalias() += scale * (bdm * st.x.transpose());
                dx.noalias() += scale * (mix_f->down.transpose() * bdm);
            }
            gx = std::move(dx);
        }
        return grads;
    };
    return out;
}

InversionResult ToyBackbone::invert(const Image& image, const std::string& prompt, const InversionConfig& config,
                                    int steps) const {
    config.validate();
    if (steps < 1) throw ConfigError("denoise steps must be >= 1");
    if (image.height != options_.height || image.width != options_.width)
        throw ConfigError("toy backbone inverts " + std::to_string(options_.height) + "x" +
                          std::to_string(options_.width) + " images, got " + std::to_string(image.height) + "x" +
                          std::to_string(image.width));
    const int inverted_steps = static_cast<int>(std::lround(config.strength * steps));
    const int start = steps - inverted_steps;
    const Eigen::VectorXd cond = prompt_embedding(prompt);

    // Walk the deterministic sampler backwards; each step solves
    // x_s - delta(x_s) = x_{s+1} by fixed-point refinement.
    Eigen::MatrixXd x = to_tokens(clamp01(image));
    for (int s = steps - 1; s >= start; --s) {
        Eigen::MatrixXd z = x + denoise_delta(x, cond, s, steps);
        for (int j = 0; j < config.renoise_iterations; ++j) z = x + denoise_delta(z, cond, s, steps);
        x = std::move(z);
    }

    InversionResult result;
    result.latent.seed = 0;
    result.latent.start_step = start;
    result.latent.schedule_steps = steps;
    result.latent.values = std::move(x);
    result.reconstruction = generate(prompt, result.latent, nullptr, steps);
    return result;
}

} // namespace subjectopt
