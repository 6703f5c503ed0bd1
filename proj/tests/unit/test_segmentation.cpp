#include "test_support.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/segmentation.hpp"

#include <doctest.h>

using namespace subjectopt;
using namespace testing;

namespace {

class ListDetector final : public ObjectDetector {
public:
    explicit ListDetector(std::vector<Detection> d) : d_(std::move(d)) {}
    std::vector<Detection> detect(const Image&, const std::string&) const override { return d_; }

private:
    std::vector<Detection> d_;
};

class FailingSegmenter final : public Segmenter {
public:
    Mask segment(const Image&, const Box&) const override { throw AvailabilityError("no weights"); }
};

class BoxSegmenter final : public Segmenter {
public:
    Mask segment(const Image& image, const Box& box) const override {
        return Mask::from_box(image.height, image.width, box);
    }
};

// Returns the whole image; clipping must bring it back to the dilated box.
class GreedySegmenter final : public Segmenter {
public:
    Mask segment(const Image& image, const Box&) const override { return Mask(image.height, image.width, true); }
};

} // namespace

TEST_SUITE("segmentation") {

TEST_CASE("identify_class") {
    const Image img = random_image(8, 8, 1);
    const FixedLabelClassifier dog("dog");
    CHECK(identify_class(img, std::string("cat"), &dog) == "cat");
    CHECK(identify_class(img, std::nullopt, &dog) == "dog");
    CHECK_THROWS_AS(identify_class(img, std::nullopt, nullptr), ConfigError);
}

TEST_CASE("stub detector recovers a coloured rectangle exactly") {
    const Box truth{5, 3, 12, 10};
    const Image img = rect_image(16, 16, truth, {0.9, 0.2, 0.1}, {0.1, 0.3, 0.8});
    const SaliencyDetector detector;
    const Detection d = detect_subject(img, "box", detector);
    CHECK(d.box == truth);
    CHECK(d.confidence == doctest::Approx(1.0));
}

TEST_CASE("detections below the threshold are not found") {
    const ListDetector weak({{{0, 0, 2, 2}, 0.29, "dog"}});
    CHECK_THROWS_AS(detect_subject(Image(4, 4), "dog", weak, 0.3), NotFoundError);
    CHECK_THROWS_AS(detect_subject(Image(4, 4), "dog", ListDetector({})), NotFoundError);
}

TEST_CASE("the highest-confidence candidate wins") {
    const ListDetector two({{{0, 0, 2, 2}, 0.5, "dog"}, {{1, 1, 4, 4}, 0.8, "dog"}});
    CHECK(detect_subject(Image(4, 4), "dog", two).box == Box{1, 1, 4, 4});
}

TEST_CASE("stub segmenter on a disc reproduces the disc") {
    const Image img = disc_image(20, 20, 9.5, 10.0, 5.0, {0.9, 0.9, 0.1}, {0.1, 0.2, 0.3});
    const Mask truth = disc_mask(20, 20, 9.5, 10.0, 5.0);
    const SaliencySegmenter seg;
    const SubjectMask m = segment_box(img, bounding_box(truth), &seg);
    const auto inter = mask_intersection(m.mask, truth).count();
    const auto uni = mask_union(m.mask, truth).count();
    CHECK(inter == uni); // IoU = 1
    CHECK_FALSE(m.degraded);
}

TEST_CASE("a one-pixel box gives a one-pixel mask") {
    const Image img = random_image(8, 8, 2);
    const BoxSegmenter seg;
    CHECK(segment_box(img, {3, 4, 4, 5}, &seg).mask.count() == 1u);
    CHECK(segment_box(img, {3, 4, 4, 5}, nullptr).mask.count() == 1u);
}

TEST_CASE("an unavailable segmenter degrades to the box with a warning") {
    const Image img = random_image(8, 8, 3);
    const Box box{1, 2, 5, 6};
    for (const Segmenter* seg : std::initializer_list<const Segmenter*>{nullptr, new FailingSegmenter()}) {
        const SubjectMask m = segment_box(img, box, seg);
        CHECK(m.degraded);
        CHECK(m.mask == Mask::from_box(8, 8, box));
        CHECK_FALSE(m.warnings.empty());
        delete seg;
    }
}

TEST_CASE("segmenter output is clipped to the dilated box") {
    const Image img = random_image(16, 16, 4);
    const Box box{6, 6, 8, 8};
    const GreedySegmenter seg;
    const SubjectMask m = segment_box(img, box, &seg, 3);
    const Box limit = box.dilated(3, 16, 16);
    CHECK(m.mask == Mask::from_box(16, 16, limit));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            if (m.mask.at(y, x)) CHECK(limit.contains(x, y));
}

TEST_CASE("boxes outside the image are rejected") {
    CHECK_THROWS_AS(segment_box(Image(4, 4), {2, 2, 6, 3}, nullptr), ConfigError);
}

TEST_CASE("invert_mask on a subject mask") {
    SubjectMask sm;
    sm.mask = random_mask(5, 5, 7);
    const Mask inv = invert_mask(sm);
    CHECK(mask_intersection(sm.mask, inv).count() == 0);
    CHECK(mask_union(sm.mask, inv).count() == 25u);
}

TEST_CASE("fallback ladder") {
    const Box truth{4, 4, 10, 12};
    const Image scene = rect_image(16, 16, truth, {0.9, 0.1, 0.1}, {0.1, 0.6, 0.2});
    SegmentationBackends backends;
    backends.detector = std::make_shared<SaliencyDetector>();
    backends.segmenter = std::make_shared<SaliencySegmenter>();

    SUBCASE("user mask is used verbatim") {
        MaskRequest req;
        req.source = MaskSource::user;
        req.user_mask = random_mask(16, 16, 1);
        const MaskOutcome out = resolve_subject_mask(scene, req, backends);
        CHECK(out.used == MaskSource::user);
        CHECK(out.subject.mask == *req.user_mask);
        CHECK(out.loss_mask == *req.user_mask);
    }
    SUBCASE("detector and segmenter; loss mask dilated by 3") {
        MaskRequest req;
        req.class_label = "thing";
        const MaskOutcome out = resolve_subject_mask(scene, req, backends);
        CHECK(out.used == MaskSource::automatic);
        CHECK(out.subject.mask == Mask::from_box(16, 16, truth));
        CHECK(out.loss_mask == dilate_mask(out.subject.mask, 3));
        CHECK(out.background_loss_enabled);
    }
    SUBCASE("segmenter missing falls back to the box") {
        SegmentationBackends no_seg = backends;
        no_seg.segmenter = nullptr;
        MaskRequest req;
        req.class_label = "thing";
        const MaskOutcome out = resolve_subject_mask(scene, req, no_seg);
        CHECK(out.used == MaskSource::box);
        CHECK(out.subject.degraded);
        CHECK_FALSE(out.warnings.empty());
    }
    SUBCASE("user box") {
        MaskRequest req;
        req.source = MaskSource::box;
        req.user_box = Box{1, 1, 3, 3};
        const MaskOutcome out = resolve_subject_mask(scene, req, backends);
        CHECK(out.subject.mask == Mask::from_box(16, 16, {1, 1, 3, 3}));
    }
    SUBCASE("nothing detected disables the background term") {
        MaskRequest req;
        req.class_label = "thing";
        const MaskOutcome out = resolve_subject_mask(Image(16, 16, 0.4), req, backends);
        CHECK_FALSE(out.background_loss_enabled);
        CHECK(out.subject.mask.count() == 256u);
        CHECK_FALSE(out.warnings.empty());
    }
    SUBCASE("no detector disables the background term") {
        MaskRequest req;
        req.class_label = "thing";
        const MaskOutcome out = resolve_subject_mask(scene, req, SegmentationBackends{});
        CHECK_FALSE(out.background_loss_enabled);
    }
    SUBCASE("user source without a mask is an error") {
        MaskRequest req;
        req.source = MaskSource::user;
        CHECK_THROWS_AS(resolve_subject_mask(scene, req, backends), ConfigError);
    }
}

TEST_CASE("pipeline is deterministic with fixed backends") {
    const Image scene = disc_image(16, 16, 8, 8, 4, {0.9, 0.8, 0.1}, {0.2, 0.2, 0.2});
    SegmentationBackends b;
    b.detector = std::make_shared<SaliencyDetector>();
    b.segmenter = std::make_shared<SaliencySegmenter>();
    MaskRequest req;
    req.class_label = "disc";
    const auto a = resolve_subject_mask(scene, req, b);
    const auto c = resolve_subject_mask(scene, req, b);
    CHECK(a.subject.mask == c.subject.mask);
    CHECK(a.loss_mask == c.loss_mask);
}

TEST_CASE("mask source names") {
    for (auto s : {MaskSource::automatic, MaskSource::user, MaskSource::box, MaskSource::none})
        CHECK(mask_source_from_string(to_string(s)) == s);
    CHECK_THROWS_AS(mask_source_from_string("magic"), ValidationError);
}

TEST_CASE("weight-backed segmentation reports availability") {
    const auto b = default_segmentation(online_empty_cache(), false);
    CHECK_THROWS_AS(b.detector->detect(Image(4, 4), "dog"), AvailabilityError);
}

}
