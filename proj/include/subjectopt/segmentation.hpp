#pragma once

#include "subjectopt/image.hpp"
#include "subjectopt/model_cache.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace subjectopt {

struct Detection {
    Box box;
    double confidence = 0.0;
    std::string label;
};

class ZeroShotClassifier {
public:
    virtual ~ZeroShotClassifier() = default;
    virtual std::string classify(const Image& image) const = 0;
};

class ObjectDetector {
public:
    virtual ~ObjectDetector() = default;
    virtual std::vector<Detection> detect(const Image& image, const std::string& label) const = 0;
};

class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual Mask segment(const Image& image, const Box& box) const = 0;
};

struct SegmentationBackends {
    std::shared_ptr<const ZeroShotClassifier> classifier;
    std::shared_ptr<const ObjectDetector> detector;
    std::shared_ptr<const Segmenter> segmenter;
    double detection_threshold = 0.3;
    int dilation = 3;
};

struct SubjectMask {
    Mask mask;
    std::string class_label;
    Box detector_box;
    double confidence = 0.0;
    // Set when the segmenter failed and the box itself became the mask.
    bool degraded = false;
    std::vector<std::string> warnings;
};

// Returns the hint when given, else the classifier's label. Throws
// ConfigError when neither is available.
std::string identify_class(const Image& subject_image, const std::optional<std::string>& hint,
                           const ZeroShotClassifier* classifier);

// Highest-confidence detection at or above `threshold`; NotFoundError otherwise.
Detection detect_subject(const Image& image, const std::string& class_label, const ObjectDetector& detector,
                         double threshold = 0.3);

// Segments inside `box`; the result is clipped to the box dilated by
// `dilation` pixels. A null or failing segmenter degrades to the box mask.
SubjectMask segment_box(const Image& image, const Box& box, const Segmenter* segmenter, int dilation = 3);

Mask invert_mask(const SubjectMask& m);

enum class MaskSource { automatic, user, box, none };

std::string to_string(MaskSource source);
MaskSource mask_source_from_string(const std::string& name);

struct MaskRequest {
    MaskSource source = MaskSource::automatic;
    std::optional<Mask> user_mask;
    std::optional<Box> user_box;
    std::string class_label;
};

struct MaskOutcome {
    SubjectMask subject;
    // Mask actually fed to the background loss (dilated unless user-supplied).
    Mask loss_mask;
    MaskSource used = MaskSource::none;
    // False when the ladder fell through to the full-foreground mask.
    bool background_loss_enabled = true;
    std::vector<std::string> warnings;
};

/// Fallback ladder: user mask > detector + segmenter > box > full foreground.
MaskOutcome resolve_subject_mask(const Image& scene, const MaskRequest& request, const SegmentationBackends& backends);

// Stubs for synthetic scenes: salient = colour distance from the mean
// border colour above `threshold`.
class FixedLabelClassifier final : public ZeroShotClassifier {
public:
    explicit FixedLabelClassifier(std::string label) : label_(std::move(label)) {}
    std::string classify(const Image&) const override { return label_; }

private:
    std::string label_;
};

class SaliencyDetector final : public ObjectDetector {
public:
    explicit SaliencyDetector(double threshold = 0.15) : threshold_(threshold) {}
    std::vector<Detection> detect(const Image& image, const std::string& label) const override;

private:
    double threshold_;
};

class SaliencySegmenter final : public Segmenter {
public:
    explicit SaliencySegmenter(double threshold = 0.15) : threshold_(threshold) {}
    Mask segment(const Image& image, const Box& box) const override;

private:
    double threshold_;
};

Mask saliency_mask(const Image& image, double threshold);

// Saliency stubs when offline or on the toy backbone; otherwise
// weight-backed open-vocabulary detector and segmenter entries that report
// missing weights on use.
SegmentationBackends default_segmentation(const ModelCache& cache, bool use_stubs);

} // namespace subjectopt
