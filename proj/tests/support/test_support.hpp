#pragma once

#include "subjectopt/backbone.hpp"
#include "subjectopt/feature_extractors.hpp"
#include "subjectopt/image.hpp"
#include "subjectopt/losses.hpp"
#include "subjectopt/model_cache.hpp"
#include "subjectopt/rng.hpp"
#include "subjectopt/toy_backbone.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace testing {

using namespace subjectopt;

inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    auto dir = std::filesystem::temp_directory_path() /
               ("subjectopt-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir;
}

inline Image random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    Image img(h, w);
    for (auto& p : img.pixels) p = rng.uniform();
    return img;
}

inline Mask random_mask(int h, int w, std::uint64_t seed, double density = 0.5) {
    Rng rng(seed);
    Mask m(h, w);
    for (auto& b : m.bits) b = rng.uniform() < density ? 1 : 0;
    return m;
}

// Solid background with a filled disc of another colour.
inline Image disc_image(int h, int w, double cy, double cx, double r, std::array<double, 3> fg,
                        std::array<double, 3> bg) {
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool in = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = in ? fg[c] : bg[c];
        }
    return img;
}

inline Mask disc_mask(int h, int w, double cy, double cx, double r) {
    Mask m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.set(y, x, (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r);
    return m;
}

inline Image rect_image(int h, int w, const Box& box, std::array<double, 3> fg, std::array<double, 3> bg) {
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = box.contains(x, y) ? fg[c] : bg[c];
    return img;
}

inline ModelCache offline_cache() {
    ModelCache c;
    c.root = std::filesystem::temp_directory_path() / "subjectopt-no-models";
    c.offline = true;
    return c;
}

inline ModelCache online_empty_cache() {
    ModelCache c;
    c.root = std::filesystem::temp_directory_path() / "subjectopt-no-models";
    c.offline = false;
    return c;
}

// Randomizes every factor (including up-projections) so gradients are non-trivial.
inline AdapterParams random_adapters(const Backbone& backbone, int rank, std::uint64_t seed, double up_scale = 0.1) {
    AdapterParams p = init_adapters(backbone, rank, {"attn.to_mix", "attn.to_in", "attn.to_out", "decoder.color"}, seed);
    Rng rng(seed + 17);
    for (auto& [id, f] : p.layers) {
        for (Eigen::Index i = 0; i < f.up.size(); ++i) f.up.data()[i] = up_scale * rng.normal();
    }
    return p;
}

inline double total_loss(const Backbone& backbone, const std::string& prompt, const Latent& latent,
                         const AdapterParams& params, int steps, const ImageObjective& objective) {
    return objective.value(backbone.generate(prompt, latent, &params, steps)).total;
}

struct GradientCheck {
    double relative_error = 0.0; // ||g_analytic - g_fd|| / ||g_fd|| over the sampled coordinates
    double fd_norm = 0.0;
    int coordinates = 0;
    // Stencils whose two ends saturate different output pixels, i.e. that
    // straddle the [0, 1] clamp where central differences are meaningless.
    int kinks = 0;
};

inline bool same_saturation(const Image& a, const Image& b) {
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const auto sat = [](double v) { return v <= 0.0 ? -1 : (v >= 1.0 ? 1 : 0); };
        if (sat(a.pixels[i]) != sat(b.pixels[i])) return false;
    }
    return true;
}

/// Central differences (step h) on `samples` random coordinates per layer
/// and factor, compared to the analytic backward pass with K = t.
inline GradientCheck check_adapter_gradient(const Backbone& backbone, const std::string& prompt, const Latent& latent,
                                            const AdapterParams& params, int steps, const ImageObjective& objective,
                                            std::uint64_t seed, int samples = 4, double h = 1e-4) {
    const DifferentiableImage gen = backbone.generate_differentiable(prompt, latent, params, steps, steps);
    const AdapterGradients grads = gen.backward(objective.evaluate(gen.image).gradient);
    Rng rng(seed);
    double diff2 = 0.0, fd2 = 0.0;
    GradientCheck out;
    for (const auto& [id, f] : params.layers) {
        for (int which = 0; which < 2; ++which) {
            const Eigen::MatrixXd& m = which == 0 ? f.down : f.up;
            const Eigen::MatrixXd& g = which == 0 ? grads.at(id).down : grads.at(id).up;
            for (int k = 0; k < samples; ++k) {
                const auto idx = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(m.size())));
                AdapterParams plus = params, minus = params;
                (which == 0 ? plus.layers[id].down : plus.layers[id].up).data()[idx] += h;
                (which == 0 ? minus.layers[id].down : minus.layers[id].up).data()[idx] -= h;
                const Image img_plus = backbone.generate(prompt, latent, &plus, steps);
                const Image img_minus = backbone.generate(prompt, latent, &minus, steps);
                if (!same_saturation(img_plus, gen.image) || !same_saturation(img_minus, gen.image)) ++out.kinks;
                const double fd = (objective.value(img_plus).total - objective.value(img_minus).total) / (2.0 * h);
                const double an = g.data()[idx];
                diff2 += (an - fd) * (an - fd);
                fd2 += fd * fd;
                ++out.coordinates;
            }
        }
    }
    out.fd_norm = std::sqrt(fd2);
    out.relative_error = std::sqrt(diff2) / std::max(out.fd_norm, 1e-300);
    return out;
}

/// Returns a fixed embedding chosen by whether the mean intensity exceeds 0.5.
class TwoStateFeatures final : public FeatureBackend {
public:
    TwoStateFeatures(Eigen::VectorXd bright, Eigen::VectorXd dark) : bright_(std::move(bright)), dark_(std::move(dark)) {}
    int embedding_dim() const override { return static_cast<int>(bright_.size()); }
    Eigen::VectorXd features(const Image& input) const override {
        double mean = 0.0;
        for (double p : input.pixels) mean += p;
        mean /= static_cast<double>(input.pixels.size());
        return mean > 0.5 ? bright_ : dark_;
    }
    Image features_vjp(const Image& input, const Eigen::VectorXd&) const override {
        return Image(input.height, input.width, 0.0);
    }

private:
    Eigen::VectorXd bright_;
    Eigen::VectorXd dark_;
};

// Unit vectors in the plane at angle theta (radians) from e1.
inline Eigen::VectorXd planar(double theta, int dim = 4) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    v(0) = std::cos(theta);
    v(1) = std::sin(theta);
    return v;
}

} // namespace testing
