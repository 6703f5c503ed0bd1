#include "test_support.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"
#include "subjectopt/workflows.hpp"

#include <doctest.h>

using namespace subjectopt;
using namespace testing;

namespace {

Image subject_disc() { return disc_image(16, 16, 8, 8, 4, {0.9, 0.2, 0.2}, {0.1, 0.1, 0.4}); }

Image edit_scene() { return disc_image(16, 16, 9, 6, 3.5, {0.2, 0.8, 0.3}, {0.6, 0.5, 0.2}); }

GenerationJob toy_generation(int iterations = 30) {
    GenerationJob job;
    job.subject = {subject_disc(), "disc"};
    job.target_prompts = {"a disc on a beach", "a disc in space"};
    job.backbone_id = "toy";
    job.config.learning_rate = 0.01;
    job.config.max_iterations = iterations;
    job.config.adapter_rank = 4;
    return job;
}

EditJob toy_edit(double c, int iterations = 60) {
    EditJob job;
    job.input_image = edit_scene();
    job.subject = {subject_disc(), "disc"};
    job.backbone_id = "toy";
    job.config.learning_rate = 0.01;
    job.config.max_iterations = iterations;
    job.config.early_stop.enabled = false;
    job.config.adapter_rank = 4;
    job.config.weights.c = c;
    return job;
}

Runtime toy_runtime() { return Runtime::create(offline_cache()); }

} // namespace

TEST_SUITE("workflows") {

TEST_CASE("simple prompt and ablation weights") {
    CHECK(simple_prompt_for("dog") == "image of a dog");
    CHECK(apply_ablations({1, 1, 10}, {false, true, false, false}) == LossWeights{1, 1, 0});
    CHECK(apply_ablations({1, 1, 10}, {false, false, true, false}) == LossWeights{0, 1, 10});
    CHECK(apply_ablations({1, 1, 10}, {false, false, false, true}) == LossWeights{1, 0, 10});
    GenerationJob job = toy_generation();
    job.ablations.no_dino = job.ablations.no_ir = true;
    CHECK_THROWS_AS(job.validate(), ValidationError);
}

TEST_CASE("generation converges on the toy backbone") {
    const Runtime rt = toy_runtime();
    GenerationJob job = toy_generation(60);
    job.config.early_stop.enabled = false;
    const GenerationOutput out = run_generation(job, rt);
    const auto& h = out.optimization.loss_history;
    REQUIRE(h.size() == 60u);
    CHECK(*std::min_element(h.begin(), h.end()) < 0.1 * h.front());
    CHECK(out.optimized_prompt == "image of a disc");
}

TEST_CASE("stage two renders with frozen adapters") {
    const Runtime rt = toy_runtime();
    const GenerationJob job = toy_generation(12);
    const GenerationOutput out = run_generation(job, rt);
    CHECK(out.checksum_before_render == out.checksum_after_render);
    CHECK(out.checksum_before_render == out.optimization.best_adapters.checksum());
    CHECK(out.render_steps == 4);
    CHECK(out.schedule.steps == 2);
    REQUIRE(out.renders.size() == 2u);
    const auto backbone = rt.backbone("toy", job.config.resolution);
    for (const auto& r : out.renders) {
        REQUIRE(r.image.has_value());
        CHECK(*r.image == render(*backbone, r.prompt, &out.optimization.best_adapters, 4, job.config.seed));
    }
    CHECK_FALSE(*out.renders[0].image == *out.renders[1].image);
}

TEST_CASE("ablations") {
    const Runtime rt = toy_runtime();
    SUBCASE("no prompt simplification optimizes with the first target prompt") {
        GenerationJob job = toy_generation(8);
        job.ablations.no_prompt_simplification = true;
        CHECK(run_generation(job, rt).optimized_prompt == "a disc on a beach");
    }
    SUBCASE("single-extractor runs zero the other component") {
        GenerationJob job = toy_generation(8);
        job.ablations.no_ir = true;
        const GenerationOutput out = run_generation(job, rt);
        // Frames carry the losses; the ir term must be absent.
        std::vector<GeneratedFrame> frames = out.optimization.frames;
        for (const auto& f : frames) CHECK(f.losses.sim_ir == 0.0);
    }
    SUBCASE("explicit simple prompt wins") {
        GenerationJob job = toy_generation(8);
        job.simple_prompt = "photo of a sks disc";
        CHECK(run_generation(job, rt).optimized_prompt == "photo of a sks disc");
    }
}

TEST_CASE("a failing render prompt does not abort the others") {
    Runtime rt = toy_runtime();
    const auto base = rt.backbone_factory;
    // Renders at 4 steps fail; optimization at 2 steps works.
    struct Picky final : Backbone {
        std::unique_ptr<Backbone> inner;
        const GeneratorHandle& handle() const override { return inner->handle(); }
        std::vector<LayerSpec> layers() const override { return inner->layers(); }
        Latent sample_latent(std::uint64_t s) const override { return inner->sample_latent(s); }
        DifferentiableImage generate_differentiable(const std::string& p, const Latent& z, const AdapterParams& a,
                                                    int t, int k) const override {
            return inner->generate_differentiable(p, z, a, t, k);
        }
        Image generate(const std::string& p, const Latent& z, const AdapterParams* a, int t) const override {
            if (p.find("space") != std::string::npos) throw AvailabilityError("render backend down");
            return inner->generate(p, z, a, t);
        }
    };
    rt.backbone_factory = [base](const std::string& id, const Resolution& r) -> std::unique_ptr<Backbone> {
        auto b = std::make_unique<Picky>();
        b->inner = base(id, r);
        return b;
    };
    const GenerationOutput out = run_generation(toy_generation(8), rt);
    REQUIRE(out.renders.size() == 2u);
    CHECK(out.renders[0].image.has_value());
    CHECK_FALSE(out.renders[1].image.has_value());
    CHECK(out.renders[1].error.find("render backend down") != std::string::npos);
    CHECK(out.warnings.size() == 1u);
}

TEST_CASE("generation writes its artifacts") {
    const Runtime rt = toy_runtime();
    const auto dir = temp_dir("gen");
    const GenerationJob job = toy_generation(10);
    SessionWriter writer(dir, {4, 1.0, "toy", config_hash(job.config), 0}, {});
    RunHooks hooks;
    hooks.writer = &writer;
    const GenerationOutput out = run_generation(job, rt, hooks);
    for (const char* f : {"subject.png", "renders/prompt_00.png", "renders/prompt_01.png", "adapter.safetensors",
                          "metadata.json", "losses.jsonl", "frame_0000.png", "frame_0009.png"})
        CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
    const Checkpoint best = load_checkpoint(dir / "adapter.safetensors");
    CHECK(best.adapters == out.optimization.best_adapters);
    CHECK(best.metadata.step_index == out.optimization.best_index);
    const auto meta = nlohmann::json::parse(read_file(dir / "metadata.json"));
    CHECK(meta["frame_count"] == 10);
    CHECK(meta["decision"]["reason"] == "max_iterations");
}

TEST_CASE("editing") {
    const Runtime rt = toy_runtime();
    SUBCASE("background error decreases as c grows") {
        double previous = std::numeric_limits<double>::infinity();
        for (double c : {0.0, 10.0, 100.0}) {
            const EditOutput out = run_edit(toy_edit(c), rt);
            const Image& last = out.optimization.frames.back().image;
            const double bg = background_loss(last, out.inversion.reconstruction, out.mask.loss_mask);
            CAPTURE(c);
            CHECK(bg <= previous);
            previous = bg;
        }
        CHECK(previous <= 1e-3);
    }
    SUBCASE("edited image is the best frame re-rendered") {
        const EditOutput out = run_edit(toy_edit(10, 15), rt);
        const auto& best = out.optimization.frames[static_cast<std::size_t>(out.optimization.best_index)];
        CHECK(out.edited == best.image);
        CHECK(out.mask.used == MaskSource::automatic);
        CHECK(out.mask.background_loss_enabled);
    }
    SUBCASE("user mask is used verbatim") {
        EditJob job = toy_edit(10, 8);
        job.mask_source = MaskSource::user;
        job.user_mask = Mask::from_box(16, 16, {2, 2, 9, 12});
        const EditOutput out = run_edit(job, rt);
        CHECK(out.mask.loss_mask == *job.user_mask);
        CHECK(out.mask.subject.mask == *job.user_mask);
    }
    SUBCASE("no detectable subject disables the background term") {
        EditJob job = toy_edit(10, 8);
        job.input_image = Image(16, 16, 0.4);
        const EditOutput out = run_edit(job, rt);
        CHECK(out.effective_weights.c == 0.0);
        CHECK_FALSE(out.warnings.empty());
    }
    SUBCASE("no_bg_loss ablation") {
        EditJob job = toy_edit(10, 8);
        job.ablations.no_bg_loss = true;
        CHECK(run_edit(job, rt).effective_weights.c == 0.0);
    }
    SUBCASE("edit writes its artifacts") {
        const auto dir = temp_dir("edit");
        SessionWriter writer(dir, {}, {});
        RunHooks hooks;
        hooks.writer = &writer;
        run_edit(toy_edit(10, 7), rt, hooks);
        for (const char* f : {"input.png", "subject.png", "reconstruction.png", "mask.png", "edited.png",
                              "adapter.safetensors", "metadata.json"})
            CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
    }
}

TEST_CASE("editing needs an inversion-capable backbone") {
    const Runtime rt = toy_runtime();
    EditJob job = toy_edit(10, 8);
    job.backbone_id = "flux-schnell";
    CHECK_THROWS_AS(run_edit(job, rt), CapabilityError);
}

TEST_CASE("real backbones without weights report availability") {
    const Runtime rt = Runtime::create(online_empty_cache());
    GenerationJob job = toy_generation(8);
    job.backbone_id = "sdxl-turbo";
    CHECK_THROWS_AS(run_generation(job, rt), AvailabilityError);
}

TEST_CASE("seed sweep") {
    const Runtime rt = toy_runtime();
    const GenerationJob job = toy_generation(7);
    SUBCASE("one seed matches a single run") {
        const SweepResult s = seed_sweep(job, {0}, rt, 4);
        const GenerationOutput single = run_generation(job, rt);
        REQUIRE(s.entries.size() == 1u);
        REQUIRE(s.entries[0].output.has_value());
        CHECK(s.entries[0].output->optimization.loss_history == single.optimization.loss_history);
        CHECK(s.entries[0].output->optimization.best_adapters == single.optimization.best_adapters);
    }
    SUBCASE("eight seeds are independent and deterministic") {
        std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7};
        const auto root = temp_dir("sweep");
        const SweepResult a = seed_sweep(job, seeds, rt, 4, root);
        const SweepResult b = seed_sweep(job, seeds, rt, 3);
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            REQUIRE(a.entries[i].output.has_value());
            CHECK(a.entries[i].seed == seeds[i]);
            CHECK(a.entries[i].output->optimization.loss_history == b.entries[i].output->optimization.loss_history);
            CHECK(std::filesystem::exists(root / ("seed_" + std::to_string(seeds[i])) / "metadata.json"));
        }
        CHECK_FALSE(a.entries[0].output->optimization.loss_history == a.entries[1].output->optimization.loss_history);
        CHECK(a.grid.height == 3 * 16);
        CHECK(a.grid.width == 3 * 16);
        CHECK(std::filesystem::exists(root / "grid.png"));
    }
    SUBCASE("empty seed list") { CHECK_THROWS_AS(seed_sweep(job, {}, rt, 2), ConfigError); }
    SUBCASE("per-seed failures are recorded") {
        Runtime broken = rt;
        broken.backbone_factory = [](const std::string&, const Resolution&) -> std::unique_ptr<Backbone> {
            throw AvailabilityError("offline");
        };
        const SweepResult r = seed_sweep(job, {1, 2}, broken, 2);
        for (const auto& e : r.entries) {
            CHECK_FALSE(e.output.has_value());
            CHECK(e.error == "offline");
        }
        CHECK(r.grid.empty());
    }
}

TEST_CASE("job spec parsing") {
    const auto dir = temp_dir("spec");
    write_png(dir / "subject.png", subject_disc());
    write_png(dir / "scene.png", edit_scene());

    SUBCASE("generation spec with relative paths") {
        const auto spec = job_spec_from_json(
            {{"task", "generate"},
             {"backbone", "toy"},
             {"subject", {{"path", "subject.png"}, {"class", "disc"}}},
             {"prompts", {"a", "b"}},
             {"config", {{"learning_rate", 0.02}}}},
            dir);
        REQUIRE(spec.generation.has_value());
        CHECK(spec.generation->target_prompts.size() == 2u);
        CHECK(spec.config().learning_rate == 0.02);
        CHECK(spec.backbone_id() == "toy");
        CHECK(spec.generation->subject.class_label == "disc");
    }
    SUBCASE("inline base64 subject") {
        const auto bytes = encode_png(subject_disc());
        const auto spec = job_spec_from_json(
            {{"task", "generate"}, {"backbone", "toy"},
             {"subject", {{"png_base64", base64_encode(std::string(bytes.begin(), bytes.end()))}}}});
        CHECK(spec.generation->subject.image == read_png(dir / "subject.png"));
    }
    SUBCASE("edit spec with box and mask source") {
        const auto spec = job_spec_from_json({{"task", "edit"},
                                              {"backbone", "toy"},
                                              {"subject", {{"path", "subject.png"}}},
                                              {"input", {{"path", "scene.png"}}},
                                              {"mask_source", "box"},
                                              {"box", {1, 2, 8, 9}},
                                              {"inversion", {{"strength", 0.5}}}},
                                             dir);
        REQUIRE(spec.edit.has_value());
        CHECK(spec.edit->mask_source == MaskSource::box);
        CHECK(*spec.edit->user_box == Box{1, 2, 8, 9});
        CHECK(spec.edit->inversion.strength == 0.5);
    }
    SUBCASE("errors name the field") {
        const auto field = [&](const nlohmann::json& j) {
            try {
                job_spec_from_json(j, dir);
            } catch (const ValidationError& e) {
                return e.field();
            }
            return std::string("<none>");
        };
        CHECK(field({{"task", "paint"}}) == "task");
        CHECK(field({{"task", "generate"}}) == "subject");
        CHECK(field({{"task", "generate"}, {"subject", {{"path", "nope.png"}}}}) == "subject.path");
        CHECK(field({{"task", "generate"}, {"subject", {{"path", "subject.png"}}}, {"prompts", "x"}}) == "prompts");
        CHECK(field({{"task", "generate"}, {"subject", {{"path", "subject.png"}}}, {"backbone", "dalle"}}) ==
              "backbone");
        CHECK(field({{"task", "generate"},
                     {"subject", {{"path", "subject.png"}}},
                     {"config", {{"max_iterations", 0}}}}) == "max_iterations");
        CHECK(field({{"task", "edit"}, {"subject", {{"path", "subject.png"}}}}) == "input");
        CHECK(field({{"task", "edit"},
                     {"subject", {{"path", "subject.png"}}},
                     {"input", {{"path", "scene.png"}}},
                     {"box", {1, 2}}}) == "box");
        CHECK(field(nlohmann::json::array()) == "job");
    }
}

TEST_CASE("base64 round trip") {
    for (const std::string& s : std::vector<std::string>{"", "a", "ab", "abc", "abcd", std::string("\0\xff\x10", 3)})
        CHECK(base64_decode(base64_encode(s)) == s);
    CHECK(base64_encode("Man") == "TWFu");
    CHECK_THROWS_AS(base64_decode("@@@@"), ValidationError);
}

TEST_CASE("grid tiles row-major") {
    const Image a(2, 2, 0.1), b(2, 2, 0.5), c(2, 2, 0.9);
    const Image g = make_grid({a, b, c}, 2);
    CHECK(g.height == 4);
    CHECK(g.width == 4);
    CHECK(g.at(0, 3, 0) == 0.5);
    CHECK(g.at(3, 0, 0) == 0.9);
    CHECK(g.at(3, 3, 0) == 0.0);
}

}
