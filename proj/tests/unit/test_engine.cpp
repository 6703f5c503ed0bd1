#include "test_support.hpp"

#include "subjectopt/engine.hpp"
#include "subjectopt/errors.hpp"

#include <doctest.h>

#include <stop_token>

using namespace subjectopt;
using namespace testing;

namespace {

// One parameter theta (the 1x1 up factor of layer "theta"); the single
// output pixel equals theta in every channel.
class ScalarBackbone final : public Backbone {
public:
    ScalarBackbone() {
        handle_.backbone_id = "scalar";
        handle_.resolution = {1, 1};
    }
    const GeneratorHandle& handle() const override { return handle_; }
    std::vector<LayerSpec> layers() const override { return {{"theta", 1, 1}}; }
    Latent sample_latent(std::uint64_t seed) const override {
        Latent z;
        z.seed = seed;
        z.values = Eigen::MatrixXd::Zero(1, 3);
        return z;
    }
    DifferentiableImage generate_differentiable(const std::string& p, const Latent& z, const AdapterParams& a, int steps,
                                                int) const override {
        DifferentiableImage out;
        out.image = generate(p, z, &a, steps);
        out.backward = [a](const Image& g) {
            AdapterGradients grads = zero_gradients(a);
            grads.at("theta").up(0, 0) = g.pixels[0] + g.pixels[1] + g.pixels[2];
            return grads;
        };
        return out;
    }
    Image generate(const std::string&, const Latent&, const AdapterParams* a, int) const override {
        return Image(1, 1, a ? a->find("theta")->up(0, 0) : 0.0);
    }

private:
    GeneratorHandle handle_;
};

AdapterParams scalar_params(double theta) {
    AdapterParams p;
    p.rank = 1;
    p.layers["theta"] = {Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Constant(1, 1, theta)};
    return p;
}

// L = theta^2 read from the first channel.
struct Square final : ImageObjective {
    LossEvaluation evaluate(const Image& img) const override {
        LossEvaluation e;
        e.gradient = Image(img.height, img.width);
        e.report.total = img.pixels[0] * img.pixels[0];
        e.gradient.pixels[0] = 2.0 * img.pixels[0];
        return e;
    }
};

// Returns scripted totals in call order with a zero gradient.
struct Scripted final : ImageObjective {
    std::function<double(int)> value_at;
    mutable int calls = 0;
    LossEvaluation evaluate(const Image& img) const override {
        LossEvaluation e;
        e.gradient = Image(img.height, img.width);
        e.report.total = value_at(calls++);
        return e;
    }
};

GenerationContext toy_context(const Backbone& b, std::uint64_t seed = 0) {
    return {&b, "a toy", b.sample_latent(seed), {2, 2}};
}

// Independent statement of the rule: does any entry inside the window beat
// the running best before it by more than x percent?
bool oracle_should_stop(const std::vector<double>& h, double x, int n) {
    if (static_cast<int>(h.size()) <= n) return false;
    const std::size_t split = h.size() - static_cast<std::size_t>(n);
    double prior = h[0];
    for (std::size_t i = 1; i < split; ++i)
        if (h[i] < prior) prior = h[i];
    const double threshold = prior * (1.0 - x / 100.0);
    for (std::size_t i = split; i < h.size(); ++i)
        if (h[i] < threshold) return false;
    return true;
}

} // namespace

TEST_SUITE("engine") {

TEST_CASE("should_stop examples") {
    const std::vector<double> h{10, 9.8, 9.7, 9.75, 9.72, 9.71, 9.70, 9.70};
    CHECK(should_stop(h, 3, 7));
    CHECK_FALSE(should_stop(std::vector<double>(7, 1.0), 3, 7));
    CHECK(should_stop(std::vector<double>(8, 1.0), 3, 7));
    std::vector<double> improving{1.0};
    for (int i = 1; i < 40; ++i) improving.push_back(improving.back() * 0.95);
    for (std::size_t len = 1; len <= improving.size(); ++len)
        CHECK_FALSE(should_stop(std::span(improving.data(), len), 3, 7));
}

TEST_CASE("should_stop agrees with a brute-force oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const int len = 1 + static_cast<int>(rng.index(25));
        const int n = 1 + static_cast<int>(rng.index(9));
        const double x = std::array<double, 5>{0.0, 1.0, 3.0, 5.0, 20.0}[rng.index(5)];
        std::vector<double> h;
        double level = 1.0 + rng.uniform();
        for (int i = 0; i < len; ++i) {
            // Quantized values produce exact ties, which count as stagnation.
            level *= 1.0 - 0.08 * (rng.uniform() - 0.3);
            h.push_back(std::round(level * 64.0) / 64.0);
        }
        CAPTURE(trial);
        CHECK(should_stop(h, x, n) == oracle_should_stop(h, x, n));
    }
}

TEST_CASE("scalar plain gradient step: theta 1 -> 0.8") {
    const ScalarBackbone b;
    const GenerationContext ctx{&b, "", b.sample_latent(0), {1, 1}};
    AdapterOptimizer sgd(OptimizerKind::sgd, 0.1);
    const StepResult r = optimization_step(ctx, scalar_params(1.0), sgd, Square{}, 0);
    CHECK(r.updated.find("theta")->up(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(r.frame.loss_total() == 1.0);
    CHECK(r.frame.step_index == 0);
}

TEST_CASE("Adam first step moves by the learning rate against the gradient sign") {
    const ScalarBackbone b;
    const GenerationContext ctx{&b, "", b.sample_latent(0), {1, 1}};
    AdapterOptimizer adam(OptimizerKind::adam, 0.1);
    const StepResult r = optimization_step(ctx, scalar_params(1.0), adam, Square{}, 0);
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps).
    CHECK(r.updated.find("theta")->up(0, 0) == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
    CHECK(adam.iterations() == 1);
}

TEST_CASE("zero gradient leaves adapters unchanged") {
    const ToyBackbone toy;
    const AdapterParams p = random_adapters(toy, 4, 1);
    Scripted constant;
    constant.value_at = [](int) { return 1.0; };
    for (auto kind : {OptimizerKind::adam, OptimizerKind::sgd}) {
        AdapterOptimizer opt(kind, 0.1);
        CHECK(optimization_step(toy_context(toy), p, opt, constant, 0).updated == p);
    }
}

TEST_CASE("constant loss stops early at index 7") {
    const ToyBackbone toy;
    Scripted constant;
    constant.value_at = [](int) { return 1.0; };
    OptimizationConfig cfg;
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), constant, cfg);
    CHECK(r.decision.reason == StopReason::early_stop);
    CHECK(r.decision.stop_index == 7);
    CHECK(r.frames.size() == 8u);
    CHECK(r.best_index == 0);
}

TEST_CASE("loss improving 5% per step runs to max_iterations") {
    const ToyBackbone toy;
    Scripted improving;
    improving.value_at = [](int i) { return std::pow(0.95, i); };
    OptimizationConfig cfg;
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), improving, cfg);
    CHECK(r.decision.reason == StopReason::max_iterations);
    CHECK(r.decision.stop_index == 59);
    CHECK(r.frames.size() == 60u);
    CHECK(r.best_index == 59);
}

TEST_CASE("user stop after step 12 yields 13 frames") {
    const ToyBackbone toy;
    Scripted improving;
    improving.value_at = [](int i) { return std::pow(0.9, i); };
    std::stop_source source;
    OptimizationConfig cfg;
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), improving, cfg, source.get_token(),
                                    [&](const GeneratedFrame& f, const AdapterParams&) {
                                        if (f.step_index == 12) source.request_stop();
                                    });
    CHECK(r.decision.reason == StopReason::user_stop);
    CHECK(r.decision.stop_index == 12);
    REQUIRE(r.frames.size() == 13u);
    for (int i = 0; i < 13; ++i) CHECK(r.frames[static_cast<std::size_t>(i)].step_index == i);
}

TEST_CASE("stop requested before the first step") {
    const ToyBackbone toy;
    std::stop_source source;
    source.request_stop();
    Scripted s;
    s.value_at = [](int) { return 1.0; };
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), s, {}, source.get_token());
    CHECK(r.decision.reason == StopReason::user_stop);
    CHECK(r.decision.stop_index == -1);
    CHECK(r.frames.empty());
}

TEST_CASE("non-finite loss ends the run with an error decision") {
    const ToyBackbone toy;
    Scripted bad;
    bad.value_at = [](int i) { return i == 3 ? std::numeric_limits<double>::quiet_NaN() : 1.0 - 0.1 * i; };
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), bad, {});
    CHECK(r.decision.reason == StopReason::error);
    CHECK(r.decision.stop_index == 3);
    CHECK(r.frames.size() == 3u);
    CHECK(r.decision.message.find("step 3") != std::string::npos);
}

TEST_CASE("backbone failures carry the step index") {
    const ToyBackbone toy;
    AdapterParams p = init_adapters(toy, 4, {}, 0);
    GenerationContext ctx = toy_context(toy);
    ctx.schedule = {2, 3};
    AdapterOptimizer opt(OptimizerKind::adam, 0.1);
    try {
        optimization_step(ctx, p, opt, Square{}, 5);
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).rfind("step 5: ", 0) == 0);
    }
}

TEST_CASE("toy run: frames, best frame and determinism") {
    const ToyBackbone toy;
    const auto reg = make_default_registry(offline_cache());
    const Image subject = disc_image(16, 16, 8, 8, 4, {0.9, 0.2, 0.2}, {0.1, 0.1, 0.4});
    const SimilarityObjective obj(subject, {reg->get("stub-pixel"), reg->get("stub-pixel-half")}, {1, 1, 10});
    OptimizationConfig cfg;
    cfg.learning_rate = 0.01;
    cfg.max_iterations = 20;
    const GenerationContext ctx = toy_context(toy, 3);
    const AdapterParams init = init_adapters(toy, 4, {}, 3);
    const auto a = run_optimization(ctx, init, obj, cfg);
    const auto b = run_optimization(ctx, init, obj, cfg);

    SUBCASE("frame 0 is the vanilla output") {
        CHECK(a.frames.front().image == toy.generate(ctx.prompt, ctx.latent, nullptr, 2));
    }
    SUBCASE("identical runs are bit-identical") {
        REQUIRE(a.frames.size() == b.frames.size());
        for (std::size_t i = 0; i < a.frames.size(); ++i) CHECK(a.frames[i].image == b.frames[i].image);
        CHECK(a.loss_history == b.loss_history);
        CHECK(a.best_adapters == b.best_adapters);
    }
    SUBCASE("best adapters reproduce the best frame loss") {
        const Image again = toy.generate(ctx.prompt, ctx.latent, &a.best_adapters, 2);
        const double best = *std::min_element(a.loss_history.begin(), a.loss_history.end());
        CHECK(a.loss_history[static_cast<std::size_t>(a.best_index)] == best);
        CHECK(std::abs(obj.value(again).total - best) <= 1e-5);
    }
    SUBCASE("best-so-far is non-increasing and totals equal weighted sums") {
        double running = std::numeric_limits<double>::infinity();
        for (const auto& f : a.frames) {
            const double next = std::min(running, f.loss_total());
            CHECK(next <= running);
            running = next;
            CHECK(std::abs(f.loss_total() - f.losses.weighted_sum()) <= 1e-6);
            CHECK(f.loss_components().size() == 3u);
            for (double p : f.image.pixels) {
                CHECK(p >= 0.0);
                CHECK(p <= 1.0);
            }
        }
        CHECK(a.loss_history.back() < a.loss_history.front());
    }
}

TEST_CASE("frame stride thins the returned frames only") {
    const ToyBackbone toy;
    Scripted s;
    s.value_at = [](int i) { return std::pow(0.9, i); };
    OptimizationConfig cfg;
    cfg.max_iterations = 10;
    cfg.frame_stride = 3;
    int callbacks = 0;
    const auto r = run_optimization(toy_context(toy), init_adapters(toy, 4, {}, 0), s, cfg, {},
                                    [&](const GeneratedFrame&, const AdapterParams&) { ++callbacks; });
    CHECK(callbacks == 10);
    CHECK(r.loss_history.size() == 10u);
    REQUIRE(r.frames.size() == 4u);
    CHECK(r.frames[3].step_index == 9);
}

TEST_CASE("stop reason names round trip") {
    for (auto r : {StopReason::early_stop, StopReason::max_iterations, StopReason::user_stop, StopReason::error})
        CHECK(stop_reason_from_string(to_string(r)) == r);
}

}
