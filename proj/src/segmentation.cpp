#include "subjectopt/segmentation.hpp"

#include "subjectopt/errors.hpp"

#include <algorithm>
#include <cmath>

namespace subjectopt {

std::string identify_class(const Image& subject_image, const std::optional<std::string>& hint,
                           const ZeroShotClassifier* classifier) {
    if (hint && !hint->empty()) return *hint;
    if (!classifier) throw ConfigError("no class hint given and no zero-shot classifier available; pass a class label");
    if (subject_image.empty()) throw ConfigError("cannot classify an empty image");
    return classifier->classify(subject_image);
}

Detection detect_subject(const Image& image, const std::string& class_label, const ObjectDetector& detector,
                         double threshold) {
    if (class_label.empty()) throw ConfigError("detection needs a non-empty class label");
    const auto candidates = detector.detect(image, class_label);
    const Detection* best = nullptr;
    for (const auto& d : candidates)
        if (d.confidence >= threshold && (!best || d.confidence > best->confidence)) best = &d;
    if (!best) throw NotFoundError("no '" + class_label + "' detection above confidence " + std::to_string(threshold));
    return *best;
}

SubjectMask segment_box(const Image& image, const Box& box, const Segmenter* segmenter, int dilation) {
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > image.width || box.y1 > image.height || box.width() <= 0 ||
        box.height() <= 0)
        throw ConfigError("segmentation box lies outside the image");
    SubjectMask out;
    out.detector_box = box;
    const Mask box_mask = Mask::from_box(image.height, image.width, box);
    if (!segmenter) {
        out.mask = box_mask;
        out.degraded = true;
        out.warnings.push_back("segmenter unavailable; using the detection box as the mask");
        return out;
    }
    try {
        Mask m = segmenter->segment(image, box);
        if (m.height != image.height || m.width != image.width) throw Error("segmenter returned a mis-sized mask");
        const Mask limit = Mask::from_box(image.height, image.width, box.dilated(dilation, image.width, image.height));
        out.mask = mask_intersection(m, limit);
    } catch (const std::exception& e) {
        out.mask = box_mask;
        out.degraded = true;
        out.warnings.push_back(std::string("segmenter failed (") + e.what() + "); using the detection box as the mask");
    }
    return out;
}

Mask invert_mask(const SubjectMask& m) { return invert_mask(m.mask); }

std::string to_string(MaskSource source) {
    switch (source) {
    case MaskSource::automatic: return "auto";
    case MaskSource::user: return "user";
    case MaskSource::box: return "box";
    case MaskSource::none: return "none";
    }
    return "auto";
}

MaskSource mask_source_from_string(const std::string& name) {
    if (name == "auto") return MaskSource::automatic;
    if (name == "user") return MaskSource::user;
    if (name == "box") return MaskSource::box;
    if (name == "none") return MaskSource::none;
    throw ValidationError("mask_source", "expected auto, user, box or none, got '" + name + "'");
}

namespace {

MaskOutcome full_foreground(const Image& scene, const std::string& label, std::vector<std::string> warnings,
                            const std::string& why) {
    MaskOutcome out;
    out.subject.mask = Mask(scene.height, scene.width, true);
    out.subject.class_label = label;
    out.subject.detector_box = {0, 0, scene.width, scene.height};
    out.loss_mask = out.subject.mask;
    out.used = MaskSource::none;
    out.background_loss_enabled = false;
    out.warnings = std::move(warnings);
    out.warnings.push_back(why + "; background preservation disabled");
    return out;
}

MaskOutcome from_box(const Image& scene, const Box& box, double confidence, const std::string& label,
                     const SegmentationBackends& backends, std::vector<std::string> warnings) {
    MaskOutcome out;
    out.subject.mask = Mask::from_box(scene.height, scene.width, box);
    out.subject.class_label = label;
    out.subject.detector_box = box;
    out.subject.confidence = confidence;
    out.loss_mask = dilate_mask(out.subject.mask, backends.dilation);
    out.used = MaskSource::box;
    out.warnings = std::move(warnings);
    return out;
}

} // namespace

MaskOutcome resolve_subject_mask(const Image& scene, const MaskRequest& request, const SegmentationBackends& backends) {
    std::vector<std::string> warnings;
    switch (request.source) {
    case MaskSource::user: {
        if (!request.user_mask) throw ConfigError("mask source 'user' requires a mask file");
        const Mask& m = *request.user_mask;
        if (m.height != scene.height || m.width != scene.width)
            throw ConfigError("user mask resolution differs from the input image");
        MaskOutcome out;
        out.subject.mask = m;
        out.subject.class_label = request.class_label;
        out.subject.detector_box = bounding_box(m);
        out.subject.confidence = 1.0;
        out.loss_mask = m;
        out.used = MaskSource::user;
        out.background_loss_enabled = m.count() < m.size();
        if (!out.background_loss_enabled) out.warnings.push_back("user mask covers the whole image");
        return out;
    }
    case MaskSource::none:
        return full_foreground(scene, request.class_label, {}, "mask source 'none'");
    case MaskSource::box:
        if (request.user_box) return from_box(scene, *request.user_box, 1.0, request.class_label, backends, {});
        [[fallthrough]];
    case MaskSource::automatic:
        break;
    }

    if (!backends.detector)
        return full_foreground(scene, request.class_label, warnings, "no object detector available");
    Detection det;
    try {
        det = detect_subject(scene, request.class_label, *backends.detector, backends.detection_threshold);
    } catch (const NotFoundError& e) {
        return full_foreground(scene, request.class_label, warnings, e.what());
    } catch (const std::exception& e) {
        return full_foreground(scene, request.class_label, warnings, std::string("detector failed: ") + e.what());
    }
    if (request.source == MaskSource::box)
        return from_box(scene, det.box, det.confidence, request.class_label, backends, warnings);

    SubjectMask sm = segment_box(scene, det.box, backends.segmenter.get(), backends.dilation);
    sm.class_label = request.class_label;
    sm.confidence = det.confidence;
    MaskOutcome out;
    out.used = sm.degraded ? MaskSource::box : MaskSource::automatic;
    warnings.insert(warnings.end(), sm.warnings.begin(), sm.warnings.end());
    if (sm.mask.count() == 0) {
        sm.mask = Mask::from_box(scene.height, scene.width, det.box);
        out.used = MaskSource::box;
        warnings.push_back("segmenter returned an empty mask; using the detection box");
    }
    out.loss_mask = dilate_mask(sm.mask, backends.dilation);
    out.subject = std::move(sm);
    out.warnings = std::move(warnings);
    return out;
}

namespace {

std::array<double, 3> border_color(const Image& image) {
    std::array<double, 3> sum{0, 0, 0};
    std::size_t n = 0;
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            if (y != 0 && x != 0 && y != image.height - 1 && x != image.width - 1) continue;
            for (int c = 0; c < 3; ++c) sum[c] += image.at(y, x, c);
            ++n;
        }
    for (auto& s : sum) s /= static_cast<double>(std::max<std::size_t>(n, 1));
    return sum;
}

} // namespace

Mask saliency_mask(const Image& image, double threshold) {
    const auto bg = border_color(image);
    Mask m(image.height, image.width);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) d2 += (image.at(y, x, c) - bg[c]) * (image.at(y, x, c) - bg[c]);
            m.set(y, x, std::sqrt(d2) > threshold);
        }
    return m;
}

std::vector<Detection> SaliencyDetector::detect(const Image& image, const std::string& label) const {
    const Mask m = saliency_mask(image, threshold_);
    const Box box = bounding_box(m);
    if (box.width() <= 0) return {};
    std::size_t inside = 0;
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x) inside += m.at(y, x) ? 1 : 0;
    const double density = static_cast<double>(inside) / static_cast<double>(box.width() * box.height());
    return {{box, density, label}};
}

Mask SaliencySegmenter::segment(const Image& image, const Box& box) const {
    return mask_intersection(saliency_mask(image, threshold_), Mask::from_box(image.height, image.width, box));
}

namespace {

class WeightBackedDetector final : public ObjectDetector {
public:
    explicit WeightBackedDetector(ModelCache cache) : cache_(std::move(cache)) {}
    std::vector<Detection> detect(const Image&, const std::string&) const override {
        throw AvailabilityError("open-vocabulary detector weights expected at " +
                                cache_.artifact_path("grounding-dino").string() +
                                " with an inference runtime; supply --mask or --box, or run offline");
    }

private:
    ModelCache cache_;
};

class WeightBackedSegmenter final : public Segmenter {
public:
    explicit WeightBackedSegmenter(ModelCache cache) : cache_(std::move(cache)) {}
    Mask segment(const Image&, const Box&) const override {
        throw AvailabilityError("box-prompted segmenter weights expected at " + cache_.artifact_path("sam").string() +
                                " with an inference runtime");
    }

private:
    ModelCache cache_;
};

} // namespace

SegmentationBackends default_segmentation(const ModelCache& cache, bool use_stubs) {
    SegmentationBackends b;
    if (use_stubs || cache.offline) {
        b.detector = std::make_shared<SaliencyDetector>();
        b.segmenter = std::make_shared<SaliencySegmenter>();
    } else {
        b.detector = std::make_shared<WeightBackedDetector>(cache);
        b.segmenter = std::make_shared<WeightBackedSegmenter>(cache);
    }
    return b;
}

} // namespace subjectopt
