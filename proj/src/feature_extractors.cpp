#include "subjectopt/feature_extractors.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/rng.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace subjectopt {

Image FeatureBackend::features_vjp(const Image&, const Eigen::VectorXd&) const {
    throw CapabilityError("feature backend is not differentiable");
}

ExtractorHandle::ExtractorHandle(std::string name, std::shared_ptr<const FeatureBackend> backend,
                                 PreprocessSpec preprocess)
    : name_(std::move(name)), backend_(std::move(backend)), preprocess_(preprocess) {
    if (!backend_) throw ConfigError("extractor '" + name_ + "' has no backend");
    if (backend_->embedding_dim() <= 0) throw ConfigError("extractor '" + name_ + "' declares a non-positive dim");
}

int ExtractorHandle::embedding_dim() const { return backend_ ? backend_->embedding_dim() : 0; }

bool ExtractorHandle::differentiable() const { return backend_ && backend_->differentiable(); }

Image ExtractorHandle::preprocess(const Image& image) const {
    if (!backend_) throw ConfigError("empty extractor handle");
    const int h = preprocess_.height > 0 ? preprocess_.height : image.height;
    const int w = preprocess_.width > 0 ? preprocess_.width : image.width;
    Image out = resize_bilinear(image, h, w);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        const auto c = i % 3;
        out.pixels[i] = (out.pixels[i] - preprocess_.mean[c]) / preprocess_.std[c];
    }
    return out;
}

Eigen::VectorXd ExtractorHandle::raw_features(const Image& image) const {
    Eigen::VectorXd v = backend_->features(preprocess(image));
    if (v.size() != backend_->embedding_dim())
        throw Error("extractor '" + name_ + "' returned " + std::to_string(v.size()) + " features, declared " +
                    std::to_string(backend_->embedding_dim()));
    return v;
}

Eigen::VectorXd ExtractorHandle::embed(const Image& image) const {
    const Eigen::VectorXd v = raw_features(image);
    const double norm = v.norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
        throw NumericError("extractor '" + name_ + "' produced a zero or non-finite feature vector");
    return v / norm;
}

DifferentiableEmbedding ExtractorHandle::embed_differentiable(const Image& image) const {
    if (!differentiable()) throw CapabilityError("extractor '" + name_ + "' is not differentiable");
    Image input = preprocess(image);
    Eigen::VectorXd v = backend_->features(input);
    const double norm = v.norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
        throw NumericError("extractor '" + name_ + "' produced a zero or non-finite feature vector");
    DifferentiableEmbedding out;
    out.value = v / norm;
    out.vjp = [backend = backend_, pre = preprocess_, input = std::move(input), unit = out.value, norm,
               in_h = image.height, in_w = image.width](const Eigen::VectorXd& grad) {
        const Eigen::VectorXd grad_raw = (grad - unit * unit.dot(grad)) / norm;
        Image g = backend->features_vjp(input, grad_raw);
        for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] /= pre.std[i % 3];
        return resize_bilinear_vjp(g, in_h, in_w);
    };
    return out;
}

ExtractorHandle ExtractorRegistry::register_extractor(const std::string& name,
                                                      std::shared_ptr<const FeatureBackend> backend,
                                                      PreprocessSpec preprocess) {
    std::lock_guard lock(mutex_);
    if (handles_.count(name)) throw ConfigError("extractor '" + name + "' is already registered");
    ExtractorHandle handle(name, std::move(backend), preprocess);
    handles_.emplace(name, handle);
    return handle;
}

ExtractorHandle ExtractorRegistry::get(const std::string& name) const {
    std::lock_guard lock(mutex_);
    const auto it = handles_.find(name);
    if (it == handles_.end()) throw NotFoundError("no extractor registered as '" + name + "'");
    return it->second;
}

bool ExtractorRegistry::contains(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return handles_.count(name) != 0;
}

std::vector<std::string> ExtractorRegistry::names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, _] : handles_) out.push_back(name);
    return out;
}

void ExtractorRegistry::register_text_encoder(const std::string& name, std::shared_ptr<const TextEncoder> encoder) {
    std::lock_guard lock(mutex_);
    if (text_encoders_.count(name)) throw ConfigError("text encoder '" + name + "' is already registered");
    text_encoders_.emplace(name, std::move(encoder));
}

std::shared_ptr<const TextEncoder> ExtractorRegistry::text_encoder(const std::string& name) const {
    std::lock_guard lock(mutex_);
    const auto it = text_encoders_.find(name);
    if (it == text_encoders_.end()) throw NotFoundError("no text encoder registered as '" + name + "'");
    return it->second;
}

namespace {

void check_input(const Image& input, int h, int w, const char* who) {
    if (input.height != h || input.width != w)
        throw ConfigError(std::string(who) + " expects " + std::to_string(h) + "x" + std::to_string(w) +
                          " inputs, got " + std::to_string(input.height) + "x" + std::to_string(input.width));
}

} // namespace

Eigen::VectorXd PixelFeatures::features(const Image& input) const {
    check_input(input, height_, width_, "pixel features");
    Eigen::VectorXd v(embedding_dim());
    for (std::size_t i = 0; i < input.pixels.size(); ++i) v(static_cast<Eigen::Index>(i)) = input.pixels[i];
    v(embedding_dim() - 1) = 1.0;
    return v;
}

Image PixelFeatures::features_vjp(const Image& input, const Eigen::VectorXd& grad) const {
    Image g(input.height, input.width);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = grad(static_cast<Eigen::Index>(i));
    return g;
}

Eigen::VectorXd ChannelMeanFeatures::features(const Image& input) const {
    if (input.empty()) throw ConfigError("channel mean of an empty image");
    return input.tokens().colwise().mean().transpose();
}

Image ChannelMeanFeatures::features_vjp(const Image& input, const Eigen::VectorXd& grad) const {
    Image g(input.height, input.width);
    const double inv = 1.0 / static_cast<double>(input.pixel_count());
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = grad(static_cast<Eigen::Index>(i % 3)) * inv;
    return g;
}

RandomProjectionFeatures::RandomProjectionFeatures(int height, int width, int dim, std::uint64_t seed)
    : height_(height), width_(width), projection_(dim, height * width * 3) {
    if (dim <= 0) throw ConfigError("projection dim must be positive");
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(projection_.cols()));
    for (Eigen::Index i = 0; i < projection_.rows(); ++i)
        for (Eigen::Index j = 0; j < projection_.cols(); ++j) projection_(i, j) = rng.normal() * s;
}

Eigen::VectorXd RandomProjectionFeatures::features(const Image& input) const {
    check_input(input, height_, width_, "projection features");
    const Eigen::Map<const Eigen::VectorXd> x(input.pixels.data(), static_cast<Eigen::Index>(input.pixels.size()));
    return (projection_ * x).array().tanh().matrix();
}

Image RandomProjectionFeatures::features_vjp(const Image& input, const Eigen::VectorXd& grad) const {
    const Eigen::VectorXd f = features(input);
    const Eigen::VectorXd pre_grad = (grad.array() * (1.0 - f.array().square())).matrix();
    const Eigen::VectorXd gx = projection_.transpose() * pre_grad;
    Image g(input.height, input.width);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = gx(static_cast<Eigen::Index>(i));
    return g;
}

Eigen::VectorXd HashedTextEncoder::embed_text(const std::string& text) const {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim_);
    std::istringstream words(text);
    std::string word;
    while (words >> word) {
        std::string clean;
        for (char c : word)
            if (std::isalnum(static_cast<unsigned char>(c)))
                clean.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        if (clean.empty()) continue;
        Rng rng(fnv1a64(clean) ^ seed_);
        for (int i = 0; i < dim_; ++i) v(i) += rng.normal();
    }
    const double norm = v.norm();
    if (norm == 0.0) {
        v(0) = 1.0;
        return v;
    }
    return v / norm;
}

namespace {

// Pretrained network resolved from the model cache. This build carries no
// neural-network runtime, so use reports exactly what is missing.
class WeightBackedFeatures final : public FeatureBackend {
public:
    WeightBackedFeatures(std::string artifact, std::string repo, int dim, ModelCache cache)
        : artifact_(std::move(artifact)), repo_(std::move(repo)), dim_(dim), cache_(std::move(cache)) {}

    int embedding_dim() const override { return dim_; }
    Eigen::VectorXd features(const Image&) const override { unavailable(); }
    Image features_vjp(const Image&, const Eigen::VectorXd&) const override { unavailable(); }

private:
    [[noreturn]] void unavailable() const {
        const auto path = cache_.artifact_path(artifact_);
        if (!cache_.has_artifact(artifact_))
            throw AvailabilityError("weights for '" + artifact_ + "' not found at " + path.string() +
                                    "; place " + repo_ + " there, or set SUBJECTOPT_OFFLINE=1 to use stub extractors");
        throw AvailabilityError("weights for '" + artifact_ + "' found at " + path.string() +
                                " but this build has no inference runtime for them; set SUBJECTOPT_OFFLINE=1 "
                                "to use stub extractors");
    }

    std::string artifact_;
    std::string repo_;
    int dim_;
    ModelCache cache_;
};

class WeightBackedTextEncoder final : public TextEncoder {
public:
    WeightBackedTextEncoder(std::string artifact, int dim, ModelCache cache)
        : artifact_(std::move(artifact)), dim_(dim), cache_(std::move(cache)) {}
    int embedding_dim() const override { return dim_; }
    Eigen::VectorXd embed_text(const std::string&) const override {
        throw AvailabilityError("text encoder '" + artifact_ + "' requires weights under " +
                                cache_.artifact_path(artifact_).string() +
                                " and an inference runtime; set SUBJECTOPT_OFFLINE=1 to use the stub encoder");
    }

private:
    std::string artifact_;
    int dim_;
    ModelCache cache_;
};

constexpr std::array<double, 3> kImagenetMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImagenetStd{0.229, 0.224, 0.225};
constexpr std::array<double, 3> kClipMean{0.48145466, 0.4578275, 0.40821073};
constexpr std::array<double, 3> kClipStd{0.26862954, 0.26130258, 0.27577711};

} // namespace

void register_default_extractors(ExtractorRegistry& registry, const ModelCache& cache, int h, int w) {
    const PreprocessSpec centered{h, w, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};
    const int half_h = std::max(1, h / 2);
    const int half_w = std::max(1, w / 2);
    const PreprocessSpec centered_half{half_h, half_w, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}};

    auto pixel = std::make_shared<PixelFeatures>(h, w);
    auto pixel_half = std::make_shared<PixelFeatures>(half_h, half_w);
    auto projection = std::make_shared<RandomProjectionFeatures>(h, w, 64, 101);
    auto inception = std::make_shared<RandomProjectionFeatures>(h, w, 16, 202);
    auto clip = std::make_shared<RandomProjectionFeatures>(h, w, 32, 303);
    auto mean_color = std::make_shared<ChannelMeanFeatures>();
    auto text = std::make_shared<HashedTextEncoder>(32);

    registry.register_extractor("stub-pixel", pixel, centered);
    registry.register_extractor("stub-pixel-half", pixel_half, centered_half);
    registry.register_extractor("stub-projection", projection, centered);
    registry.register_extractor("stub-inception", inception, centered);
    registry.register_extractor("stub-clip", clip, centered);
    registry.register_extractor("stub-mean-color", mean_color, {});
    registry.register_text_encoder("stub-text", text);

    struct Real {
        const char* name;
        const char* repo;
        int dim;
        PreprocessSpec preprocess;
        std::shared_ptr<const FeatureBackend> offline;
        PreprocessSpec offline_preprocess;
    };
    const Real reals[] = {
        {"dino-v2", "the facebook/dinov2-base checkpoint", 768, {224, 224, kImagenetMean, kImagenetStd}, pixel, centered},
        {"ir-features", "the universal-image-embedding instance-retrieval checkpoint", 1024, {224, 224, kImagenetMean, kImagenetStd},
         pixel_half, centered_half},
        {"clip-image", "the openai/clip-vit-large-patch14 checkpoint", 768, {224, 224, kClipMean, kClipStd}, clip, centered},
        {"lpips-backbone", "the LPIPS (AlexNet) weights", 1472, {64, 64, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}, pixel,
         centered},
        {"inception-pool3", "the pt_inception-2015-12-05 FID Inception weights", 2048, {299, 299, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}},
         inception, centered},
    };
    for (const Real& r : reals) {
        if (cache.offline)
            registry.register_extractor(r.name, r.offline, r.offline_preprocess);
        else
            registry.register_extractor(r.name, std::make_shared<WeightBackedFeatures>(r.name, r.repo, r.dim, cache),
                                        r.preprocess);
    }
    if (cache.offline)
        registry.register_text_encoder("clip-text", text);
    else
        registry.register_text_encoder("clip-text", std::make_shared<WeightBackedTextEncoder>("clip-text", 768, cache));
}

std::shared_ptr<ExtractorRegistry> make_default_registry(const ModelCache& cache, int h, int w) {
    auto registry = std::make_shared<ExtractorRegistry>();
    register_default_extractors(*registry, cache, h, w);
    return registry;
}

} // namespace subjectopt
