#pragma once

#include "subjectopt/image.hpp"
#include "subjectopt/model_cache.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace subjectopt {

/// Resize target (0 keeps the input size) and per-channel normalization.
struct PreprocessSpec {
    int height = 0;
    int width = 0;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
};

/// Raw feature network. Inputs arrive already resized and normalized.
class FeatureBackend {
public:
    virtual ~FeatureBackend() = default;
    virtual int embedding_dim() const = 0;
    virtual bool differentiable() const { return true; }
    virtual Eigen::VectorXd features(const Image& input) const = 0;
    // dL/d(input) given dL/d(features). Default: CapabilityError.
    virtual Image features_vjp(const Image& input, const Eigen::VectorXd& grad_features) const;
};

struct DifferentiableEmbedding {
    Eigen::VectorXd value;
    std::function<Image(const Eigen::VectorXd&)> vjp;
};

class ExtractorHandle {
public:
    ExtractorHandle() = default;
    ExtractorHandle(std::string name, std::shared_ptr<const FeatureBackend> backend, PreprocessSpec preprocess);

    const std::string& name() const { return name_; }
    int embedding_dim() const;
    bool differentiable() const;
    const PreprocessSpec& preprocess_spec() const { return preprocess_; }
    explicit operator bool() const { return static_cast<bool>(backend_); }

    Image preprocess(const Image& image) const;
    // Backbone features before normalization (FID/KID inputs).
    Eigen::VectorXd raw_features(const Image& image) const;
    // Unit-normalized global embedding.
    Eigen::VectorXd embed(const Image& image) const;
    DifferentiableEmbedding embed_differentiable(const Image& image) const;

private:
    std::string name_;
    std::shared_ptr<const FeatureBackend> backend_;
    PreprocessSpec preprocess_;
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual int embedding_dim() const = 0;
    // Unit-normalized.
    virtual Eigen::VectorXd embed_text(const std::string& text) const = 0;
};

class ExtractorRegistry {
public:
    // Throws ConfigError on a duplicate name.
    ExtractorHandle register_extractor(const std::string& name, std::shared_ptr<const FeatureBackend> backend,
                                       PreprocessSpec preprocess = {});
    // Throws NotFoundError.
    ExtractorHandle get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<std::string> names() const;

    void register_text_encoder(const std::string& name, std::shared_ptr<const TextEncoder> encoder);
    std::shared_ptr<const TextEncoder> text_encoder(const std::string& name) const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, ExtractorHandle> handles_;
    std::map<std::string, std::shared_ptr<const TextEncoder>> text_encoders_;
};

// Flattened pixels plus a constant bias feature (never the zero vector).
class PixelFeatures final : public FeatureBackend {
public:
    explicit PixelFeatures(int height, int width) : height_(height), width_(width) {}
    int embedding_dim() const override { return height_ * width_ * 3 + 1; }
    Eigen::VectorXd features(const Image& input) const override;
    Image features_vjp(const Image& input, const Eigen::VectorXd& grad) const override;

private:
    int height_;
    int width_;
};

// Per-channel mean colour.
class ChannelMeanFeatures final : public FeatureBackend {
public:
    int embedding_dim() const override { return 3; }
    Eigen::VectorXd features(const Image& input) const override;
    Image features_vjp(const Image& input, const Eigen::VectorXd& grad) const override;
};

// tanh(P * pixels) with a fixed seeded Gaussian projection.
class RandomProjectionFeatures final : public FeatureBackend {
public:
    RandomProjectionFeatures(int height, int width, int dim, std::uint64_t seed);
    int embedding_dim() const override { return static_cast<int>(projection_.rows()); }
    Eigen::VectorXd features(const Image& input) const override;
    Image features_vjp(const Image& input, const Eigen::VectorXd& grad) const override;

private:
    int height_;
    int width_;
    Eigen::MatrixXd projection_;
};

// Bag of hashed lowercase words, each word contributing a seeded Gaussian direction.
class HashedTextEncoder final : public TextEncoder {
public:
    explicit HashedTextEncoder(int dim, std::uint64_t seed = 7) : dim_(dim), seed_(seed) {}
    int embedding_dim() const override { return dim_; }
    Eigen::VectorXd embed_text(const std::string& text) const override;

private:
    int dim_;
    std::uint64_t seed_;
};

/// Registers the stub backends ("stub-pixel", "stub-pixel-half",
/// "stub-mean-color", "stub-projection", "stub-inception", text
/// "stub-text") and the weight-backed names ("dino-v2", "ir-features",
/// "clip-image", "lpips-backbone", "inception-pool3", text "clip-text").
/// Weight-backed names raise AvailabilityError on use unless the cache is
/// offline, in which case they are served by stubs.
void register_default_extractors(ExtractorRegistry& registry, const ModelCache& cache, int stub_height = 16,
                                 int stub_width = 16);

std::shared_ptr<ExtractorRegistry> make_default_registry(const ModelCache& cache, int stub_height = 16,
                                                         int stub_width = 16);

} // namespace subjectopt
