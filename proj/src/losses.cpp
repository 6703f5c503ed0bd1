#include "subjectopt/losses.hpp"

#include "subjectopt/errors.hpp"

#include <algorithm>
#include <utility>

namespace subjectopt {

namespace {

// Runs `fn`, prefixing failures with the extractor's role and name while
// keeping availability errors distinguishable.
template <typename Fn>
auto with_backend(const char* role, const ExtractorHandle& handle, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const AvailabilityError& e) {
        throw AvailabilityError(std::string(role) + " extractor '" + handle.name() + "': " + e.what());
    } catch (const std::exception& e) {
        throw Error(std::string(role) + " extractor '" + handle.name() + "' failed: " + e.what());
    }
}

void require_extractor(const char* role, const ExtractorHandle& handle, double weight) {
    if (weight != 0.0 && !handle)
        throw ConfigError(std::string(role) + " extractor is required when its loss weight is non-zero");
}

void check_shapes(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) throw ConfigError(std::string(what) + ": image resolutions differ");
}

void check_mask(const Image& img, const Mask& m) {
    if (img.height != m.height || img.width != m.width)
        throw ConfigError("background loss: mask resolution differs from the image");
}

} // namespace

double cosine_distance(const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    if (u.size() != v.size()) throw ConfigError("cosine_distance: dimension mismatch");
    // Rounding can push u.u past 1; distances stay non-negative.
    return std::max(0.0, 1.0 - u.dot(v));
}

LossReport similarity_loss(const Image& gen, const Image& ref, const SimilarityExtractors& extractors,
                           const LossWeights& weights) {
    return SimilarityObjective(ref, extractors, weights).value(gen);
}

double background_loss(const Image& gen, const Image& reconstruction, const Mask& subject_mask) {
    check_shapes(gen, reconstruction, "background loss");
    check_mask(gen, subject_mask);
    double sum = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < gen.height; ++y)
        for (int x = 0; x < gen.width; ++x) {
            if (subject_mask.at(y, x)) continue;
            ++count;
            for (int c = 0; c < 3; ++c) {
                const double d = gen.at(y, x, c) - reconstruction.at(y, x, c);
                sum += d * d;
            }
        }
    return count == 0 ? 0.0 : sum / static_cast<double>(3 * count);
}

Image background_loss_gradient(const Image& gen, const Image& reconstruction, const Mask& subject_mask) {
    check_shapes(gen, reconstruction, "background loss");
    check_mask(gen, subject_mask);
    Image grad(gen.height, gen.width);
    const std::size_t count = subject_mask.size() - subject_mask.count();
    if (count == 0) return grad;
    const double k = 2.0 / static_cast<double>(3 * count);
    for (int y = 0; y < gen.height; ++y)
        for (int x = 0; x < gen.width; ++x) {
            if (subject_mask.at(y, x)) continue;
            for (int c = 0; c < 3; ++c) grad.at(y, x, c) = k * (gen.at(y, x, c) - reconstruction.at(y, x, c));
        }
    return grad;
}

LossReport editing_loss(const Image& gen, const Image& ref, const Image& reconstruction, const Mask& subject_mask,
                        const SimilarityExtractors& extractors, const LossWeights& weights) {
    return EditingObjective(ref, reconstruction, subject_mask, extractors, weights).value(gen);
}

SimilarityObjective::SimilarityObjective(Image reference, SimilarityExtractors extractors, LossWeights weights)
    : reference_(std::move(reference)), extractors_(std::move(extractors)), weights_(weights) {
    require_extractor("dino", extractors_.dino, weights_.a);
    require_extractor("ir", extractors_.ir, weights_.b);
    if (extractors_.dino && weights_.a != 0.0)
        ref_dino_ = with_backend("dino", extractors_.dino, [&] { return extractors_.dino.embed(reference_); });
    if (extractors_.ir && weights_.b != 0.0)
        ref_ir_ = with_backend("ir", extractors_.ir, [&] { return extractors_.ir.embed(reference_); });
}

void SimilarityObjective::add_similarity(const Image& image, LossReport& report, Image* gradient) const {
    struct Term {
        const char* role;
        const ExtractorHandle* handle;
        const Eigen::VectorXd* ref;
        double weight;
        double* slot;
    };
    const Term terms[] = {{"dino", &extractors_.dino, &ref_dino_, weights_.a, &report.sim_dino},
                          {"ir", &extractors_.ir, &ref_ir_, weights_.b, &report.sim_ir}};
    for (const Term& t : terms) {
        if (t.weight == 0.0 || !*t.handle) continue;
        if (!gradient) {
            const Eigen::VectorXd e = with_backend(t.role, *t.handle, [&] { return t.handle->embed(image); });
            *t.slot = cosine_distance(e, *t.ref);
            continue;
        }
        const DifferentiableEmbedding e =
            with_backend(t.role, *t.handle, [&] { return t.handle->embed_differentiable(image); });
        *t.slot = cosine_distance(e.value, *t.ref);
        const Image g = with_backend(t.role, *t.handle, [&] { return e.vjp(-t.weight * *t.ref); });
        for (std::size_t i = 0; i < g.pixels.size(); ++i) gradient->pixels[i] += g.pixels[i];
    }
}

LossEvaluation SimilarityObjective::evaluate(const Image& image) const {
    check_shapes(image, reference_, "similarity loss");
    LossEvaluation out;
    out.report.weights = weights_;
    out.gradient = Image(image.height, image.width);
    add_similarity(image, out.report, &out.gradient);
    out.report.total = out.report.weighted_sum();
    return out;
}

LossReport SimilarityObjective::value(const Image& image) const {
    check_shapes(image, reference_, "similarity loss");
    LossReport report;
    report.weights = weights_;
    add_similarity(image, report, nullptr);
    report.total = report.weighted_sum();
    return report;
}

EditingObjective::EditingObjective(Image reference, Image reconstruction, Mask subject_mask,
                                   SimilarityExtractors extractors, LossWeights weights)
    : SimilarityObjective(std::move(reference), std::move(extractors), weights),
      reconstruction_(std::move(reconstruction)), subject_mask_(std::move(subject_mask)) {
    check_mask(reconstruction_, subject_mask_);
}

LossEvaluation EditingObjective::evaluate(const Image& image) const {
    LossEvaluation out = SimilarityObjective::evaluate(image);
    out.report.bg = background_loss(image, reconstruction_, subject_mask_);
    if (weights_.c != 0.0) {
        const Image g = background_loss_gradient(image, reconstruction_, subject_mask_);
        for (std::size_t i = 0; i < g.pixels.size(); ++i) out.gradient.pixels[i] += weights_.c * g.pixels[i];
    }
    out.report.total = out.report.weighted_sum();
    return out;
}

LossReport EditingObjective::value(const Image& image) const {
    LossReport report = SimilarityObjective::value(image);
    report.bg = background_loss(image, reconstruction_, subject_mask_);
    report.total = report.weighted_sum();
    return report;
}

} // namespace subjectopt
