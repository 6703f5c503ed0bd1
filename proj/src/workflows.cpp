#include "subjectopt/workflows.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace fs = std::filesystem;

namespace subjectopt {

LossWeights apply_ablations(LossWeights weights, const Ablations& ablations) {
    if (ablations.no_bg_loss) weights.c = 0.0;
    if (ablations.no_dino) weights.a = 0.0;
    if (ablations.no_ir) weights.b = 0.0;
    return weights;
}

std::string simple_prompt_for(const std::string& class_label) { return "image of a " + class_label; }

namespace {

void validate_backbone_id(const std::string& id) {
    const auto ids = backbone_ids();
    if (std::find(ids.begin(), ids.end(), id) == ids.end())
        throw ValidationError("backbone", "unknown backbone '" + id + "'");
}

void validate_weights_after_ablation(const LossWeights& w) {
    if (w.a == 0.0 && w.b == 0.0)
        throw ValidationError("ablations", "both identity terms are disabled; nothing to optimize");
}

} // namespace

void GenerationJob::validate() const {
    if (subject.image.empty()) throw ValidationError("subject", "a subject image is required");
    config.validate();
    validate_backbone_id(backbone_id);
    if (render_steps && *render_steps < 1) throw ValidationError("render_steps", "must be >= 1");
    validate_weights_after_ablation(apply_ablations(config.weights, ablations));
}

void EditJob::validate() const {
    if (subject.image.empty()) throw ValidationError("subject", "a subject image is required");
    if (input_image.empty()) throw ValidationError("input", "an input image is required");
    config.validate();
    inversion.validate();
    validate_backbone_id(backbone_id);
    if (mask_source == MaskSource::user && !user_mask)
        throw ValidationError("mask", "mask_source 'user' requires a mask");
    if (user_mask && (user_mask->height != input_image.height || user_mask->width != input_image.width))
        throw ValidationError("mask", "mask resolution differs from the input image");
    validate_weights_after_ablation(apply_ablations(config.weights, ablations));
}

Runtime Runtime::create(const ModelCache& cache) {
    Runtime rt;
    rt.cache = cache;
    rt.registry = make_default_registry(cache);
    rt.backbone_factory = [cache](const std::string& id, const Resolution& res) {
        return make_backbone(id, BackboneOptions{res, cache});
    };
    return rt;
}

std::unique_ptr<Backbone> Runtime::backbone(const std::string& id, const Resolution& resolution) const {
    if (backbone_factory) return backbone_factory(id, resolution);
    return make_backbone(id, BackboneOptions{resolution, cache});
}

SegmentationBackends Runtime::segmentation_for(const std::string& backbone_id) const {
    if (segmentation) return *segmentation;
    return default_segmentation(cache, backbone_id == "toy");
}

SimilarityExtractors resolve_extractors(const ExtractorChoice& choice, const std::string& backbone_id,
                                        const LossWeights& weights, const ExtractorRegistry& registry) {
    const bool toy = backbone_id == "toy";
    auto pick = [&](const std::string& requested, const char* toy_default, const char* real_default) {
        if (requested.empty() || requested == "auto") return std::string(toy ? toy_default : real_default);
        return requested;
    };
    SimilarityExtractors ex;
    if (weights.a != 0.0) ex.dino = registry.get(pick(choice.dino, "stub-pixel", "dino-v2"));
    if (weights.b != 0.0) ex.ir = registry.get(pick(choice.ir, "stub-pixel-half", "ir-features"));
    return ex;
}

namespace {

Image fit_to(const Image& image, const Resolution& res) {
    if (image.height == res.height && image.width == res.width) return image;
    return resize_bilinear(image, res.height, res.width);
}

Mask fit_mask(const Mask& mask, const Resolution& res) {
    if (mask.height == res.height && mask.width == res.width) return mask;
    Mask out(res.height, res.width);
    for (int y = 0; y < res.height; ++y)
        for (int x = 0; x < res.width; ++x) {
            const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / res.height));
            const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / res.width));
            out.set(y, x, mask.at(sy, sx));
        }
    return out;
}

Box fit_box(const Box& box, int from_h, int from_w, const Resolution& res) {
    if (from_h == res.height && from_w == res.width) return box;
    auto sx = [&](int v) { return static_cast<int>(std::lround(static_cast<double>(v) * res.width / from_w)); };
    auto sy = [&](int v) { return static_cast<int>(std::lround(static_cast<double>(v) * res.height / from_h)); };
    Box b{sx(box.x0), sy(box.y0), sx(box.x1), sy(box.y1)};
    if (b.x1 <= b.x0) b.x1 = std::min(res.width, b.x0 + 1);
    if (b.y1 <= b.y0) b.y1 = std::min(res.height, b.y0 + 1);
    return b;
}

FrameCallback chain_frames(const RunHooks& hooks) {
    return [&hooks](const GeneratedFrame& frame, const AdapterParams& adapters) {
        if (hooks.writer) hooks.writer->write_frame(frame, adapters);
        if (hooks.on_frame) hooks.on_frame(frame, adapters);
    };
}

void warn(const RunHooks& hooks, std::vector<std::string>& sink, const std::string& message) {
    sink.push_back(message);
    if (hooks.on_warning) hooks.on_warning(message);
}

nlohmann::json weights_json(const LossWeights& w) { return {{"a", w.a}, {"b", w.b}, {"c", w.c}}; }

nlohmann::json ablations_json(const Ablations& a) {
    return {{"no_prompt_simplification", a.no_prompt_simplification},
            {"no_bg_loss", a.no_bg_loss},
            {"no_dino", a.no_dino},
            {"no_ir", a.no_ir}};
}

} // namespace

GenerationOutput run_generation(const GenerationJob& job, const Runtime& runtime, const RunHooks& hooks) {
    job.validate();
    GenerationOutput out;
    auto backbone = runtime.backbone(job.backbone_id, job.config.resolution);
    const GeneratorHandle& handle = backbone->handle();
    out.schedule = resolve_schedule(handle, job.config);
    out.render_steps = job.render_steps.value_or(handle.default_render_steps);

    if (!job.simple_prompt.empty()) {
        out.optimized_prompt = job.simple_prompt;
    } else {
        const auto seg = runtime.segmentation_for(job.backbone_id);
        const std::optional<std::string> hint =
            job.subject.class_label.empty() ? std::nullopt : std::optional(job.subject.class_label);
        out.optimized_prompt = simple_prompt_for(identify_class(job.subject.image, hint, seg.classifier.get()));
    }
    if (job.ablations.no_prompt_simplification && !job.target_prompts.empty())
        out.optimized_prompt = job.target_prompts.front();

    const LossWeights weights = apply_ablations(job.config.weights, job.ablations);
    const SimilarityExtractors extractors = resolve_extractors(job.extractors, job.backbone_id, weights, *runtime.registry);
    const Image reference = fit_to(job.subject.image, handle.resolution);
    const SimilarityObjective objective(reference, extractors, weights);

    GenerationContext ctx{backbone.get(), out.optimized_prompt, backbone->sample_latent(job.config.seed), out.schedule};
    const AdapterParams initial =
        init_adapters(*backbone, job.config.adapter_rank, job.config.target_layers, job.config.seed,
                      job.config.adapter_scale);
    if (hooks.writer) hooks.writer->write_image("subject.png", reference);

    OptimizationConfig config = job.config;
    config.weights = weights;
    out.optimization = run_optimization(ctx, initial, objective, config, hooks.stop, chain_frames(hooks));
    const AdapterParams& best = out.optimization.best_adapters;

    out.checksum_before_render = best.checksum();
    if (out.optimization.best_index >= 0) {
        for (const auto& prompt : job.target_prompts) {
            RenderedPrompt r{prompt, std::nullopt, {}};
            try {
                r.image = render(*backbone, prompt, &best, out.render_steps, job.config.seed);
            } catch (const std::exception& e) {
                r.error = e.what();
                warn(hooks, out.warnings, "render failed for '" + prompt + "': " + e.what());
            }
            out.renders.push_back(std::move(r));
        }
    }
    out.checksum_after_render = best.checksum();

    if (hooks.writer) {
        SessionWriter& w = *hooks.writer;
        nlohmann::json renders = nlohmann::json::array();
        for (std::size_t i = 0; i < out.renders.size(); ++i) {
            const auto& r = out.renders[i];
            nlohmann::json entry{{"prompt", r.prompt}};
            if (r.image) {
                char name[40];
                std::snprintf(name, sizeof name, "renders/prompt_%02zu.png", i);
                w.write_image(name, *r.image);
                entry["file"] = name;
            } else {
                entry["error"] = r.error;
            }
            renders.push_back(entry);
        }
        if (out.optimization.best_index >= 0) w.write_adapters("adapter.safetensors", best, out.optimization.best_index);
        nlohmann::json meta{{"task", "generate"},
                            {"backbone", job.backbone_id},
                            {"config", to_json(job.config)},
                            {"config_hash", config_hash(job.config)},
                            {"effective_weights", weights_json(weights)},
                            {"ablations", ablations_json(job.ablations)},
                            {"optimized_prompt", out.optimized_prompt},
                            {"steps", out.schedule.steps},
                            {"truncation", out.schedule.truncation},
                            {"render_steps", out.render_steps},
                            {"extractors", {{"dino", extractors.dino ? extractors.dino.name() : ""},
                                            {"ir", extractors.ir ? extractors.ir.name() : ""}}},
                            {"decision", to_json(out.optimization.decision)},
                            {"best_index", out.optimization.best_index},
                            {"frame_count", out.optimization.loss_history.size()},
                            {"renders", renders},
                            {"adapter_checksum", digest_hex(std::to_string(best.checksum()))},
                            {"warnings", out.warnings}};
        w.write_json("metadata.json", meta);
    }
    return out;
}

EditOutput run_edit(const EditJob& job, const Runtime& runtime, const RunHooks& hooks) {
    job.validate();
    EditOutput out;
    auto backbone = runtime.backbone(job.backbone_id, job.config.resolution);
    const GeneratorHandle& handle = backbone->handle();
    if (!handle.supports_inversion)
        throw CapabilityError("backbone '" + job.backbone_id + "' does not support inversion; editing needs one");
    const Schedule schedule = resolve_schedule(handle, job.config);
    const auto seg = runtime.segmentation_for(job.backbone_id);

    const Image scene = fit_to(job.input_image, handle.resolution);
    const Image reference = fit_to(job.subject.image, handle.resolution);
    const std::optional<std::string> hint =
        job.subject.class_label.empty() ? std::nullopt : std::optional(job.subject.class_label);
    out.class_label = identify_class(job.subject.image, hint, seg.classifier.get());
    out.prompt = job.prompt.empty() ? simple_prompt_for(out.class_label) : job.prompt;

    out.inversion = backbone->invert(scene, out.prompt, job.inversion, schedule.steps);

    MaskRequest request;
    request.source = job.mask_source;
    request.class_label = out.class_label;
    if (job.user_mask) request.user_mask = fit_mask(*job.user_mask, handle.resolution);
    if (job.user_box)
        request.user_box = fit_box(*job.user_box, job.input_image.height, job.input_image.width, handle.resolution);
    out.mask = resolve_subject_mask(scene, request, seg);
    for (const auto& w : out.mask.warnings) warn(hooks, out.warnings, w);

    LossWeights weights = apply_ablations(job.config.weights, job.ablations);
    if (!out.mask.background_loss_enabled) weights.c = 0.0;
    out.effective_weights = weights;
    const SimilarityExtractors extractors = resolve_extractors(job.extractors, job.backbone_id, weights, *runtime.registry);
    const EditingObjective objective(reference, out.inversion.reconstruction, out.mask.loss_mask, extractors, weights);

    GenerationContext ctx{backbone.get(), out.prompt, out.inversion.latent, schedule};
    const AdapterParams initial = init_adapters(*backbone, job.config.adapter_rank, job.config.target_layers,
                                                job.config.seed, job.config.adapter_scale);
    if (hooks.writer) {
        hooks.writer->write_image("input.png", scene);
        hooks.writer->write_image("subject.png", reference);
        hooks.writer->write_image("reconstruction.png", out.inversion.reconstruction);
        hooks.writer->write_mask("mask.png", out.mask.subject.mask);
    }
    OptimizationConfig config = job.config;
    config.weights = weights;
    out.optimization = run_optimization(ctx, initial, objective, config, hooks.stop, chain_frames(hooks));
    if (out.optimization.best_index >= 0)
        out.edited = backbone->generate(out.prompt, out.inversion.latent, &out.optimization.best_adapters,
                                        schedule.steps);

    if (hooks.writer) {
        SessionWriter& w = *hooks.writer;
        if (!out.edited.empty()) w.write_image("edited.png", out.edited);
        if (out.optimization.best_index >= 0)
            w.write_adapters("adapter.safetensors", out.optimization.best_adapters, out.optimization.best_index);
        const Box& b = out.mask.subject.detector_box;
        nlohmann::json meta{{"task", "edit"},
                            {"backbone", job.backbone_id},
                            {"config", to_json(job.config)},
                            {"config_hash", config_hash(job.config)},
                            {"inversion", to_json(job.inversion)},
                            {"effective_weights", weights_json(weights)},
                            {"ablations", ablations_json(job.ablations)},
                            {"class_label", out.class_label},
                            {"prompt", out.prompt},
                            {"steps", schedule.steps},
                            {"truncation", schedule.truncation},
                            {"start_step", out.inversion.latent.start_step},
                            {"mask_source", to_string(out.mask.used)},
                            {"mask_box", {b.x0, b.y0, b.x1, b.y1}},
                            {"background_loss_enabled", out.mask.background_loss_enabled},
                            {"decision", to_json(out.optimization.decision)},
                            {"best_index", out.optimization.best_index},
                            {"frame_count", out.optimization.loss_history.size()},
                            {"warnings", out.warnings}};
        w.write_json("metadata.json", meta);
    }
    return out;
}

Image make_grid(const std::vector<Image>& images, int columns) {
    if (images.empty()) return {};
    columns = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
    const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
    const int th = images.front().height;
    const int tw = images.front().width;
    Image grid(rows * th, columns * tw, 0.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const Image tile = images[i].height == th && images[i].width == tw ? images[i] : resize_bilinear(images[i], th, tw);
        const int oy = static_cast<int>(i) / columns * th;
        const int ox = static_cast<int>(i) % columns * tw;
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x)
                for (int c = 0; c < 3; ++c) grid.at(oy + y, ox + x, c) = tile.at(y, x, c);
    }
    return grid;
}

SweepResult seed_sweep(const GenerationJob& job, const std::vector<std::uint64_t>& seeds, const Runtime& runtime,
                       int workers, const fs::path& root) {
    if (seeds.empty()) throw ConfigError("seed sweep needs at least one seed");
    SweepResult result;
    result.entries.resize(seeds.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            SweepEntry& entry = result.entries[i];
            entry.seed = seeds[i];
            try {
                GenerationJob local = job;
                local.config.seed = seeds[i];
                std::optional<SessionWriter> writer;
                RunHooks hooks;
                if (!root.empty()) {
                    entry.session_dir = root / ("seed_" + std::to_string(seeds[i]));
                    writer.emplace(entry.session_dir,
                                   CheckpointMetadata{local.config.adapter_rank, local.config.adapter_scale,
                                                      local.backbone_id, config_hash(local.config), 0},
                                   SessionWriterOptions{local.config.frame_stride, false});
                    hooks.writer = &*writer;
                }
                entry.output = run_generation(local, runtime, hooks);
                if (entry.output->optimization.decision.reason == StopReason::error)
                    entry.error = entry.output->optimization.decision.message;
            } catch (const std::exception& e) {
                entry.error = e.what();
            }
        }
    };
    const int n = std::max(1, std::min<int>(workers, static_cast<int>(seeds.size())));
    {
        std::vector<std::jthread> pool;
        for (int w = 0; w < n; ++w) pool.emplace_back(work);
    }

    std::vector<Image> tiles;
    std::unique_ptr<Backbone> backbone;
    for (const auto& entry : result.entries) {
        if (!entry.output || entry.output->optimization.best_index < 0) continue;
        const auto& o = *entry.output;
        const RenderedPrompt* first = nullptr;
        for (const auto& r : o.renders)
            if (r.image) {
                first = &r;
                break;
            }
        if (first) {
            tiles.push_back(*first->image);
            continue;
        }
        if (!backbone) backbone = runtime.backbone(job.backbone_id, job.config.resolution);
        tiles.push_back(render(*backbone, o.optimized_prompt, &o.optimization.best_adapters, o.schedule.steps,
                               entry.seed));
    }
    result.grid = make_grid(tiles, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(tiles.size())))));
    if (!root.empty() && !result.grid.empty()) write_png(root / "grid.png", result.grid);
    return result;
}

const OptimizationConfig& JobSpec::config() const { return generation ? generation->config : edit->config; }
const std::string& JobSpec::backbone_id() const { return generation ? generation->backbone_id : edit->backbone_id; }

std::string base64_encode(const std::string& bytes) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                           (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i < bytes.size()) {
        unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
        if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? table[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::string base64_decode(const std::string& text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+' || c == '-') return 62;
        if (c == '/' || c == '_') return 63;
        return -1;
    };
    std::string out;
    unsigned buffer = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' ) break;
        if (c == '\n' || c == '\r' || c == ' ') continue;
        const int v = value(c);
        if (v < 0) throw ValidationError("png_base64", "invalid base64 character");
        buffer = (buffer << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += static_cast<char>((buffer >> bits) & 0xff);
        }
    }
    return out;
}

namespace {

const nlohmann::json* member(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    return it == j.end() || it->is_null() ? nullptr : &*it;
}

std::string string_field(const nlohmann::json& j, const char* key, const std::string& field, std::string fallback) {
    const auto* v = member(j, key);
    if (!v) return fallback;
    if (!v->is_string()) throw ValidationError(field, "expected a string");
    return v->get<std::string>();
}

std::vector<unsigned char> blob(const nlohmann::json& obj, const std::string& field, const fs::path& base_dir,
                                fs::path* path_out) {
    if (!obj.is_object()) throw ValidationError(field, "expected an object with 'path' or 'png_base64'");
    if (const auto* b64 = member(obj, "png_base64")) {
        if (!b64->is_string()) throw ValidationError(field + ".png_base64", "expected a string");
        const std::string raw = base64_decode(b64->get<std::string>());
        return {raw.begin(), raw.end()};
    }
    if (const auto* p = member(obj, "path")) {
        if (!p->is_string()) throw ValidationError(field + ".path", "expected a string");
        fs::path path = p->get<std::string>();
        if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
        if (!fs::exists(path)) throw ValidationError(field + ".path", "file not found: " + path.string());
        if (path_out) *path_out = path;
        const std::string raw = read_file(path);
        return {raw.begin(), raw.end()};
    }
    throw ValidationError(field, "expected 'path' or 'png_base64'");
}

Image image_field(const nlohmann::json& obj, const std::string& field, const fs::path& base_dir) {
    const auto bytes = blob(obj, field, base_dir, nullptr);
    try {
        return decode_png(bytes);
    } catch (const std::exception& e) {
        throw ValidationError(field, std::string("not a readable PNG: ") + e.what());
    }
}

Mask mask_field(const nlohmann::json& obj, const std::string& field, const fs::path& base_dir) {
    const Image img = image_field(obj, field, base_dir);
    Mask m(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            m.set(y, x, img.at(y, x, 0) > 0.0 || img.at(y, x, 1) > 0.0 || img.at(y, x, 2) > 0.0);
    return m;
}

Ablations ablations_field(const nlohmann::json& j) {
    Ablations a;
    if (!j.is_object()) throw ValidationError("ablations", "expected an object");
    auto flag = [&](const char* key, bool& out) {
        if (const auto* v = member(j, key)) {
            if (!v->is_boolean()) throw ValidationError(std::string("ablations.") + key, "expected a boolean");
            out = v->get<bool>();
        }
    };
    flag("no_prompt_simplification", a.no_prompt_simplification);
    flag("no_bg_loss", a.no_bg_loss);
    flag("no_dino", a.no_dino);
    flag("no_ir", a.no_ir);
    return a;
}

ExtractorChoice extractors_field(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("extractors", "expected an object");
    ExtractorChoice c;
    c.dino = string_field(j, "dino", "extractors.dino", c.dino);
    c.ir = string_field(j, "ir", "extractors.ir", c.ir);
    return c;
}

} // namespace

JobSpec job_spec_from_json(const nlohmann::json& j, const fs::path& base_dir, const OptimizationConfig& base_config) {
    if (!j.is_object()) throw ValidationError("job", "expected a JSON object");
    JobSpec spec;
    spec.task = string_field(j, "task", "task", "generate");
    if (spec.task != "generate" && spec.task != "edit")
        throw ValidationError("task", "expected 'generate' or 'edit', got '" + spec.task + "'");

    ReferenceSubject subject;
    const auto* subj = member(j, "subject");
    if (!subj) throw ValidationError("subject", "a subject image is required");
    subject.image = image_field(*subj, "subject", base_dir);
    if (subj->is_object()) subject.class_label = string_field(*subj, "class", "subject.class", "");

    OptimizationConfig config = base_config;
    if (const auto* c = member(j, "config")) config = config_from_json(*c, base_config);
    Ablations ablations;
    if (const auto* a = member(j, "ablations")) ablations = ablations_field(*a);
    ExtractorChoice extractors;
    if (const auto* e = member(j, "extractors")) extractors = extractors_field(*e);

    if (spec.task == "generate") {
        GenerationJob g;
        g.subject = std::move(subject);
        g.config = config;
        g.backbone_id = string_field(j, "backbone", "backbone", g.backbone_id);
        g.simple_prompt = string_field(j, "simple_prompt", "simple_prompt", "");
        if (const auto* p = member(j, "prompts")) {
            if (!p->is_array()) throw ValidationError("prompts", "expected a list of strings");
            for (const auto& s : *p) {
                if (!s.is_string()) throw ValidationError("prompts", "expected a list of strings");
                g.target_prompts.push_back(s.get<std::string>());
            }
        }
        if (const auto* r = member(j, "render_steps")) {
            if (!r->is_number_integer()) throw ValidationError("render_steps", "expected an integer");
            g.render_steps = r->get<int>();
        }
        g.ablations = ablations;
        g.extractors = extractors;
        g.validate();
        spec.generation = std::move(g);
    } else {
        EditJob e;
        e.subject = std::move(subject);
        e.config = config;
        e.backbone_id = string_field(j, "backbone", "backbone", e.backbone_id);
        const auto* input = member(j, "input");
        if (!input) throw ValidationError("input", "an input image is required");
        e.input_image = image_field(*input, "input", base_dir);
        e.prompt = string_field(j, "edit_prompt", "edit_prompt", "");
        e.mask_source = mask_source_from_string(string_field(j, "mask_source", "mask_source", "auto"));
        if (const auto* m = member(j, "mask")) e.user_mask = mask_field(*m, "mask", base_dir);
        if (const auto* b = member(j, "box")) {
            if (!b->is_array() || b->size() != 4) throw ValidationError("box", "expected [x0, y0, x1, y1]");
            for (const auto& v : *b)
                if (!v.is_number_integer()) throw ValidationError("box", "expected integer pixel coordinates");
            e.user_box = Box{(*b)[0].get<int>(), (*b)[1].get<int>(), (*b)[2].get<int>(), (*b)[3].get<int>()};
        }
        if (const auto* inv = member(j, "inversion")) e.inversion = inversion_from_json(*inv, e.inversion);
        e.ablations = ablations;
        e.extractors = extractors;
        e.validate();
        spec.edit = std::move(e);
    }
    return spec;
}

nlohmann::json describe(const GenerationJob& job) {
    return {{"task", "generate"},
            {"backbone", job.backbone_id},
            {"class", job.subject.class_label},
            {"prompts", job.target_prompts},
            {"simple_prompt", job.simple_prompt},
            {"render_steps", job.render_steps ? nlohmann::json(*job.render_steps) : nlohmann::json(nullptr)},
            {"ablations", ablations_json(job.ablations)},
            {"extractors", {{"dino", job.extractors.dino}, {"ir", job.extractors.ir}}},
            {"config", to_json(job.config)},
            {"config_hash", config_hash(job.config)}};
}

nlohmann::json describe(const EditJob& job) {
    nlohmann::json j{{"task", "edit"},
                     {"backbone", job.backbone_id},
                     {"class", job.subject.class_label},
                     {"edit_prompt", job.prompt},
                     {"mask_source", to_string(job.mask_source)},
                     {"inversion", to_json(job.inversion)},
                     {"ablations", ablations_json(job.ablations)},
                     {"extractors", {{"dino", job.extractors.dino}, {"ir", job.extractors.ir}}},
                     {"config", to_json(job.config)},
                     {"config_hash", config_hash(job.config)}};
    if (job.user_box) j["box"] = {job.user_box->x0, job.user_box->y0, job.user_box->x1, job.user_box->y1};
    return j;
}

} // namespace subjectopt
