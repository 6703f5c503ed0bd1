#include "test_support.hpp"

#include "subjectopt/errors.hpp"

#include <doctest.h>

#include <set>

using namespace subjectopt;
using namespace testing;

namespace {

double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
    return m;
}

ToyBackbone small_toy(int steps = 2) {
    ToyOptions o;
    o.height = 8;
    o.width = 8;
    o.hidden = 8;
    o.default_steps = steps;
    return ToyBackbone(o);
}

} // namespace

TEST_SUITE("backbone") {

TEST_CASE("toy handle") {
    const ToyBackbone toy;
    const GeneratorHandle& h = toy.handle();
    CHECK(h.backbone_id == "toy");
    CHECK(h.supports_inversion);
    CHECK(h.default_truncation <= h.default_steps);
    CHECK(h.resolution == Resolution{16, 16});
}

TEST_CASE("zero-initialized adapters leave the output unchanged") {
    const ToyBackbone toy;
    const Latent z = toy.sample_latent(3);
    const Image vanilla = toy.generate("a dog", z, nullptr, 2);
    const AdapterParams p4 = init_adapters(toy, 4, {}, 1);
    CHECK(max_abs_diff(toy.generate("a dog", z, &p4, 2), vanilla) <= 1e-5);
    const AdapterParams all = init_adapters(toy, 16, {"attn.to_mix", "attn.to_in", "attn.to_out", "decoder.color"}, 2);
    CHECK(toy.generate("a dog", z, &all, 2) == vanilla);
    CHECK(toy.generate_differentiable("a dog", z, all, 2, 2).image == vanilla);
}

TEST_CASE("generation is deterministic per seed and distinct across seeds") {
    const ToyBackbone toy;
    std::set<std::vector<double>> outputs;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const Image a = toy.generate("p", toy.sample_latent(seed), nullptr, 2);
        const Image b = toy.generate("p", toy.sample_latent(seed), nullptr, 2);
        CHECK(a == b);
        outputs.insert(a.pixels);
    }
    CHECK(outputs.size() == 8u);
}

TEST_CASE("prompts condition the output") {
    const ToyBackbone toy;
    const Latent z = toy.sample_latent(0);
    CHECK_FALSE(toy.generate("a cat", z, nullptr, 2) == toy.generate("a dog", z, nullptr, 2));
}

TEST_CASE("outputs are clamped to [0, 1]") {
    const ToyBackbone toy;
    const AdapterParams p = random_adapters(toy, 4, 1, 3.0);
    const Image img = toy.generate("p", toy.sample_latent(1), &p, 3);
    for (double v : img.pixels) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("analytic gradient matches finite differences with K = t") {
    const ToyBackbone toy = small_toy(3);
    const Image ref = random_image(8, 8, 77);
    for (std::uint64_t inst = 0; inst < 3; ++inst) {
        const AdapterParams p = random_adapters(toy, 3, 100 + inst, 0.05);
        const Latent z = toy.sample_latent(inst);
        // Quadratic pull toward a fixed image exercises every pixel.
        struct Pull final : ImageObjective {
            Image target;
            LossEvaluation evaluate(const Image& img) const override {
                LossEvaluation e;
                e.gradient = Image(img.height, img.width);
                for (std::size_t i = 0; i < img.pixels.size(); ++i) {
                    const double d = img.pixels[i] - target.pixels[i];
                    e.report.total += d * d;
                    e.gradient.pixels[i] = 2.0 * d;
                }
                return e;
            }
        } pull;
        pull.target = ref;
        const GradientCheck gc = check_adapter_gradient(toy, "p", z, p, 3, pull, inst, 6);
        CHECK(gc.fd_norm > 0.0);
        CHECK(gc.relative_error <= 1e-4);
    }
}

TEST_CASE("truncation keeps the decoder gradient and drops early steps") {
    const ToyBackbone toy = small_toy(3);
    const AdapterParams p = random_adapters(toy, 2, 8, 0.05);
    const Latent z = toy.sample_latent(2);
    const Image g = random_image(8, 8, 3);
    const AdapterGradients full = toy.generate_differentiable("p", z, p, 3, 3).backward(g);
    const AdapterGradients k1 = toy.generate_differentiable("p", z, p, 3, 1).backward(g);
    CHECK(full.at("decoder.color").down == k1.at("decoder.color").down);
    CHECK(full.at("decoder.color").up == k1.at("decoder.color").up);
    CHECK_FALSE(full.at("attn.to_in").down == k1.at("attn.to_in").down);
    CHECK(toy.generate_differentiable("p", z, p, 3, 1).image == toy.generate_differentiable("p", z, p, 3, 3).image);
}

TEST_CASE("invalid truncation and unknown layers") {
    const ToyBackbone toy = small_toy(2);
    const AdapterParams p = init_adapters(toy, 2, {}, 1);
    const Latent z = toy.sample_latent(0);
    CHECK_THROWS_AS(toy.generate_differentiable("p", z, p, 2, 3), ConfigError);
    CHECK_THROWS_AS(toy.generate_differentiable("p", z, p, 2, 0), ConfigError);
    AdapterParams bad = p;
    bad.layers["unet.conv"] = p.layers.begin()->second;
    CHECK_THROWS_AS(toy.generate_differentiable("p", z, bad, 2, 2), ConfigError);
}

TEST_CASE("tape larger than the budget is a sizing error") {
    ToyOptions o;
    o.height = 8;
    o.width = 8;
    o.memory_budget_bytes = 1024;
    const ToyBackbone toy(o);
    const AdapterParams p = init_adapters(toy, 2, {}, 1);
    CHECK_THROWS_AS(toy.generate_differentiable("p", toy.sample_latent(0), p, 4, 4), SizingError);
}

TEST_CASE("adapter scale interpolates continuously to the vanilla output") {
    const ToyBackbone toy;
    const Latent z = toy.sample_latent(4);
    const Image vanilla = toy.generate("p", z, nullptr, 2);
    AdapterParams p = random_adapters(toy, 4, 6, 0.2);
    double previous = std::numeric_limits<double>::infinity();
    for (double s : {1e-1, 1e-3, 1e-6}) {
        p.scale = s;
        const double d = max_abs_diff(toy.generate("p", z, &p, 2), vanilla);
        CHECK(d <= previous);
        previous = d;
    }
    CHECK(previous <= 1e-5);
}

TEST_CASE("inversion") {
    const ToyBackbone toy;
    const Image x = random_image(16, 16, 21);
    SUBCASE("strength 0 reconstructs the input exactly") {
        const InversionResult r = toy.invert(x, "p", {0.0, 4}, 2);
        CHECK(r.reconstruction == x);
    }
    SUBCASE("decoding the inverted latent reproduces the reconstruction bit-exactly") {
        const InversionResult r = toy.invert(x, "p", {0.75, 4}, 4);
        CHECK(toy.generate("p", r.latent, nullptr, 4) == r.reconstruction);
        CHECK(r.latent.start_step == 1);
        CHECK(r.latent.schedule_steps == 4);
    }
    SUBCASE("inverted latents are bound to their schedule") {
        const InversionResult r = toy.invert(x, "p", {0.5, 2}, 4);
        CHECK_THROWS_AS(toy.generate("p", r.latent, nullptr, 2), ConfigError);
    }
    SUBCASE("wrong resolution") {
        CHECK_THROWS_AS(toy.invert(random_image(8, 8, 1), "p", {}, 2), ConfigError);
    }
}

TEST_CASE("render uses a fresh seeded latent") {
    const ToyBackbone toy;
    const AdapterParams p = random_adapters(toy, 2, 3);
    CHECK(render(toy, "p", &p, 4, 9) == toy.generate("p", toy.sample_latent(9), &p, 4));
    CHECK_THROWS_AS(render(toy, "p", &p, 0, 9), ConfigError);
}

TEST_CASE("weight-backed backbones report what is missing") {
    BackboneOptions opts;
    opts.cache = online_empty_cache();
    const auto sdxl = make_backbone("sdxl-turbo", opts);
    CHECK(sdxl->handle().backbone_id == "sdxl-turbo");
    try {
        sdxl->sample_latent(0);
        FAIL("expected AvailabilityError");
    } catch (const AvailabilityError& e) {
        CHECK(std::string(e.what()).find("stabilityai/sdxl-turbo") != std::string::npos);
    }
    const auto flux = make_backbone("flux-schnell", opts);
    CHECK_THROWS_AS(flux->invert(Image(4, 4), "p", {}, 1), CapabilityError);
    CHECK_THROWS_AS(make_backbone("sd-turbo", opts)->invert(Image(4, 4), "p", {}, 1), AvailabilityError);
    CHECK_THROWS_AS(make_backbone("imagen", opts), ConfigError);
}

TEST_CASE("toy factory honours small resolutions") {
    BackboneOptions opts;
    opts.resolution = {8, 12};
    CHECK(make_backbone("toy", opts)->handle().resolution == Resolution{8, 12});
    opts.resolution = {512, 512};
    CHECK(make_backbone("toy", opts)->handle().resolution == Resolution{16, 16});
}

}
