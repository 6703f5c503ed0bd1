#pragma once

#include "subjectopt/config.hpp"
#include "subjectopt/feature_extractors.hpp"
#include "subjectopt/image.hpp"

#include <map>
#include <string>

namespace subjectopt {

struct LossReport {
    double total = 0.0;
    double sim_dino = 0.0;
    double sim_ir = 0.0;
    double bg = 0.0; // 0 when the background term is unused
    LossWeights weights;

    double weighted_sum() const { return weights.a * sim_dino + weights.b * sim_ir + weights.c * bg; }
    std::map<std::string, double> components() const {
        return {{"dino", sim_dino}, {"ir", sim_ir}, {"bg", bg}};
    }
};

/// The identity-similarity ensemble. A handle may be left empty when its
/// weight is zero (single-extractor ablations).
struct SimilarityExtractors {
    ExtractorHandle dino;
    ExtractorHandle ir;
};

// 1 - cos(u, v) for unit vectors.
double cosine_distance(const Eigen::VectorXd& u, const Eigen::VectorXd& v);

LossReport similarity_loss(const Image& gen, const Image& ref, const SimilarityExtractors& extractors,
                           const LossWeights& weights);

// Mean squared error over the background pixels (complement of
// `subject_mask`) and all channels; 0 when there is no background.
double background_loss(const Image& gen, const Image& reconstruction, const Mask& subject_mask);
Image background_loss_gradient(const Image& gen, const Image& reconstruction, const Mask& subject_mask);

LossReport editing_loss(const Image& gen, const Image& ref, const Image& reconstruction, const Mask& subject_mask,
                        const SimilarityExtractors& extractors, const LossWeights& weights);

struct LossEvaluation {
    LossReport report;
    Image gradient; // dL/d(image)
};

/// Differentiable scalar objective over a generated image.
class ImageObjective {
public:
    virtual ~ImageObjective() = default;
    virtual LossEvaluation evaluate(const Image& image) const = 0;
    virtual LossReport value(const Image& image) const { return evaluate(image).report; }
};

class SimilarityObjective : public ImageObjective {
public:
    SimilarityObjective(Image reference, SimilarityExtractors extractors, LossWeights weights);
    LossEvaluation evaluate(const Image& image) const override;
    LossReport value(const Image& image) const override;

protected:
    // Adds the weighted similarity terms into `report` and `gradient`.
    void add_similarity(const Image& image, LossReport& report, Image* gradient) const;

    Image reference_;
    SimilarityExtractors extractors_;
    LossWeights weights_;
    Eigen::VectorXd ref_dino_;
    Eigen::VectorXd ref_ir_;
};

class EditingObjective final : public SimilarityObjective {
public:
    EditingObjective(Image reference, Image reconstruction, Mask subject_mask, SimilarityExtractors extractors,
                     LossWeights weights);
    LossEvaluation evaluate(const Image& image) const override;
    LossReport value(const Image& image) const override;

private:
    Image reconstruction_;
    Mask subject_mask_;
};

} // namespace subjectopt
