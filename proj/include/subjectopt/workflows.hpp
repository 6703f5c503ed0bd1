#pragma once

#include "subjectopt/backbone.hpp"
#include "subjectopt/config.hpp"
#include "subjectopt/engine.hpp"
#include "subjectopt/feature_extractors.hpp"
#include "subjectopt/losses.hpp"
#include "subjectopt/model_cache.hpp"
#include "subjectopt/segmentation.hpp"
#include "subjectopt/session_store.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stop_token>
#include <string>
#include <vector>

namespace subjectopt {

struct ReferenceSubject {
    Image image;
    // Empty: identified by the zero-shot classifier.
    std::string class_label;
};

/// Table-row ablations. Each one zeroes a weight or bypasses a stage.
struct Ablations {
    bool no_prompt_simplification = false;
    bool no_bg_loss = false;
    bool no_dino = false;
    bool no_ir = false;

    friend bool operator==(const Ablations&, const Ablations&) = default;
};

LossWeights apply_ablations(LossWeights weights, const Ablations& ablations);

/// Registry names for the two identity extractors. "auto" picks pixel
/// stubs on the toy backbone and the weight-backed models otherwise.
struct ExtractorChoice {
    std::string dino = "auto";
    std::string ir = "auto";
};

std::string simple_prompt_for(const std::string& class_label);

struct GenerationJob {
    ReferenceSubject subject;
    std::vector<std::string> target_prompts;
    std::string simple_prompt; // empty: "image of a {class}"
    OptimizationConfig config;
    std::string backbone_id = "sdxl-turbo";
    std::optional<int> render_steps; // unset: the backbone's stage-two default
    Ablations ablations;
    ExtractorChoice extractors;

    void validate() const;
};

struct EditJob {
    Image input_image;
    ReferenceSubject subject;
    std::string prompt; // empty: "image of a {class}"
    OptimizationConfig config;
    std::string backbone_id = "sd-turbo";
    InversionConfig inversion;
    MaskSource mask_source = MaskSource::automatic;
    std::optional<Mask> user_mask;
    std::optional<Box> user_box;
    Ablations ablations;
    ExtractorChoice extractors;

    void validate() const;
};

/// Shared, read-only services a job runs against.
struct Runtime {
    ModelCache cache;
    std::shared_ptr<ExtractorRegistry> registry;
    // Unset: saliency stubs for the toy backbone or offline, weight-backed otherwise.
    std::optional<SegmentationBackends> segmentation;
    std::function<std::unique_ptr<Backbone>(const std::string&, const Resolution&)> backbone_factory;

    static Runtime create(const ModelCache& cache);
    std::unique_ptr<Backbone> backbone(const std::string& id, const Resolution& resolution) const;
    SegmentationBackends segmentation_for(const std::string& backbone_id) const;
};

SimilarityExtractors resolve_extractors(const ExtractorChoice& choice, const std::string& backbone_id,
                                        const LossWeights& weights, const ExtractorRegistry& registry);

struct RunHooks {
    std::stop_token stop;
    FrameCallback on_frame;
    // Artifacts are written here when set.
    SessionWriter* writer = nullptr;
    std::function<void(const std::string&)> on_warning;
};

struct RenderedPrompt {
    std::string prompt;
    std::optional<Image> image;
    std::string error;
};

struct GenerationOutput {
    OptimizationResult optimization;
    std::string optimized_prompt;
    Schedule schedule;
    int render_steps = 0;
    std::vector<RenderedPrompt> renders;
    std::uint64_t checksum_before_render = 0;
    std::uint64_t checksum_after_render = 0;
    std::vector<std::string> warnings;
};

/// Stage one optimizes adapters on the similarity loss with the simple
/// prompt at low t; stage two renders each target prompt at the render
/// step count with the frozen best adapters.
GenerationOutput run_generation(const GenerationJob& job, const Runtime& runtime, const RunHooks& hooks = {});

struct EditOutput {
    OptimizationResult optimization;
    std::string prompt;
    std::string class_label;
    InversionResult inversion;
    MaskOutcome mask;
    LossWeights effective_weights;
    Image edited;
    std::vector<std::string> warnings;
};

/// invert -> mask -> optimize on the editing loss, always starting from the
/// inverted latent -> best frame.
EditOutput run_edit(const EditJob& job, const Runtime& runtime, const RunHooks& hooks = {});

struct SweepEntry {
    std::uint64_t seed = 0;
    std::optional<GenerationOutput> output;
    std::string error;
    std::filesystem::path session_dir;
};

struct SweepResult {
    std::vector<SweepEntry> entries; // in input seed order
    Image grid;
};

/// One independent generation session per seed on at most `workers`
/// threads. Per-seed failures are recorded, not thrown. When `root` is
/// non-empty each seed writes to root/seed_<seed> and the grid to root/grid.png.
SweepResult seed_sweep(const GenerationJob& job, const std::vector<std::uint64_t>& seeds, const Runtime& runtime,
                       int workers, const std::filesystem::path& root = {});

// Row-major tile of equally sized images; smaller images are resized.
Image make_grid(const std::vector<Image>& images, int columns);

/// Job spec shared by the service and config files:
/// { "task": "generate"|"edit", "backbone": id,
///   "subject": {"path" | "png_base64", "class"},
///   "prompts": [..], "simple_prompt", "render_steps",
///   "input": {"path" | "png_base64"}, "edit_prompt",
///   "mask_source", "mask": {"path" | "png_base64"}, "box": [x0,y0,x1,y1],
///   "inversion": {...}, "config": {...}, "ablations": {...},
///   "extractors": {"dino", "ir"} }
/// Relative paths resolve against `base_dir`. Throws ValidationError.
struct JobSpec {
    std::string task = "generate";
    std::optional<GenerationJob> generation;
    std::optional<EditJob> edit;

    const OptimizationConfig& config() const;
    const std::string& backbone_id() const;
};

JobSpec job_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {},
                           const OptimizationConfig& base_config = {});
nlohmann::json describe(const GenerationJob& job);
nlohmann::json describe(const EditJob& job);

std::string base64_decode(const std::string& text);
std::string base64_encode(const std::string& bytes);

} // namespace subjectopt
