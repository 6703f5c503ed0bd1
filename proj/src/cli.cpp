#include "subjectopt/cli.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/evaluation.hpp"
#include "subjectopt/png_io.hpp"
#include "subjectopt/session_service.hpp"
#include "subjectopt/session_store.hpp"
#include "subjectopt/workflows.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace subjectopt {

namespace {

struct CommonFlags {
    std::string workdir = ".";
    bool offline = false;
};

struct JobFlags {
    std::string config_file;
    std::string out;
    bool dry_run = false;
    std::string subject;
    std::string class_label;
    std::string backbone;
    std::string dino_extractor;
    std::string ir_extractor;
    bool no_prompt_simplification = false;
    bool no_bg_loss = false;
    bool no_dino = false;
    bool no_ir = false;
    bool per_frame_checkpoints = false;

    // OptimizationConfig
    std::uint64_t seed = 0;
    double learning_rate = 0.0;
    double a = 0.0, b = 0.0, c = 0.0;
    int max_iterations = 0;
    bool early_stop = true;
    double early_stop_x = 0.0;
    int early_stop_n = 0;
    int truncation_depth = 0;
    int denoise_steps = 0;
    std::string resolution;
    int rank = 0;
    std::vector<std::string> target_layers;
    double adapter_scale = 0.0;
    std::string optimizer;
    double beta1 = 0.0, beta2 = 0.0, epsilon = 0.0;
    int frame_stride = 0;

    // generate / sweep
    std::vector<std::string> prompts;
    std::string simple_prompt;
    int render_steps = 0;

    // edit
    std::string input;
    std::string edit_prompt;
    std::string mask;
    std::string box;
    std::string mask_source;
    double strength = 0.0;
    int renoise_iterations = 0;

    // sweep
    std::string seeds;
    int num_seeds = 0;
    int workers = 2;

    std::map<std::string, CLI::Option*> opts;
    bool given(const std::string& name) const {
        auto it = opts.find(name);
        return it != opts.end() && it->second->count() > 0;
    }
};

void add_config_flags(CLI::App* cmd, JobFlags& f) {
    auto& o = f.opts;
    o["config"] = cmd->add_option("--config", f.config_file, "JSON job file; flags override its values");
    o["out"] = cmd->add_option("--out", f.out, "Output directory (default under <workdir>)");
    cmd->add_flag("--dry-run", f.dry_run, "Print the effective job and config, then exit");
    o["subject"] = cmd->add_option("--subject", f.subject, "Reference subject image (PNG)");
    o["class"] = cmd->add_option("--class", f.class_label, "Subject class label, e.g. dog");
    o["backbone"] = cmd->add_option("--backbone", f.backbone, "sdxl-turbo | sd-turbo | flux-schnell | sana | toy");
    o["dino"] = cmd->add_option("--dino-extractor", f.dino_extractor, "Registry name for the DINO term (auto)");
    o["ir"] = cmd->add_option("--ir-extractor", f.ir_extractor, "Registry name for the IR term (auto)");
    o["no_ps"] = cmd->add_flag("--no-prompt-simplification", f.no_prompt_simplification,
                               "Optimize directly on the first target prompt");
    o["no_bg"] = cmd->add_flag("--no-bg-loss", f.no_bg_loss, "Drop the background term (c = 0)");
    o["no_dino"] = cmd->add_flag("--no-dino", f.no_dino, "Drop the DINO term (a = 0)");
    o["no_ir"] = cmd->add_flag("--no-ir", f.no_ir, "Drop the IR term (b = 0)");
    cmd->add_flag("--per-frame-checkpoints", f.per_frame_checkpoints, "Save adapters for every frame");

    o["seed"] = cmd->add_option("--seed", f.seed, "Latent and adapter-init seed");
    o["lr"] = cmd->add_option("--lr,--learning-rate", f.learning_rate, "Step size (default 3e-4)");
    o["a"] = cmd->add_option("--weight-a", f.a, "DINO distance weight (default 1)");
    o["b"] = cmd->add_option("--weight-b", f.b, "IR distance weight (default 1)");
    o["c"] = cmd->add_option("--weight-c", f.c, "Background weight (default 10)");
    o["max_iterations"] = cmd->add_option("--max-iterations", f.max_iterations, "Iteration budget (default 60)");
    o["early_stop"] = cmd->add_flag("--early-stop,!--no-early-stop", f.early_stop, "Enable early stopping");
    o["x"] = cmd->add_option("--early-stop-x", f.early_stop_x, "Required improvement in percent (default 3)");
    o["n"] = cmd->add_option("--early-stop-n", f.early_stop_n, "Window length (default 7)");
    o["k"] = cmd->add_option("--truncation-depth", f.truncation_depth, "Backpropagated denoise steps K");
    o["t"] = cmd->add_option("--denoise-steps", f.denoise_steps, "Denoise steps t during optimization");
    o["resolution"] = cmd->add_option("--resolution", f.resolution, "HxW, e.g. 512x512");
    o["rank"] = cmd->add_option("--rank", f.rank, "Adapter rank (default 16)");
    o["targets"] = cmd->add_option("--target-layers", f.target_layers, "Adapter layers (default: attention)");
    o["scale"] = cmd->add_option("--adapter-scale", f.adapter_scale, "Adapter scale (default 1)");
    o["optimizer"] = cmd->add_option("--optimizer", f.optimizer, "adam | sgd");
    o["beta1"] = cmd->add_option("--adam-beta1", f.beta1);
    o["beta2"] = cmd->add_option("--adam-beta2", f.beta2);
    o["epsilon"] = cmd->add_option("--adam-epsilon", f.epsilon);
    o["stride"] = cmd->add_option("--frame-stride", f.frame_stride, "Store every n-th frame image");
}

void add_generate_flags(CLI::App* cmd, JobFlags& f) {
    f.opts["prompt"] = cmd->add_option("--prompt", f.prompts, "Target prompt (repeatable)");
    f.opts["simple_prompt"] = cmd->add_option("--simple-prompt", f.simple_prompt, "Optimization prompt");
    f.opts["render_steps"] = cmd->add_option("--render-steps", f.render_steps, "Stage-two denoise steps");
}

void add_edit_flags(CLI::App* cmd, JobFlags& f) {
    f.opts["input"] = cmd->add_option("--input", f.input, "Image to edit (PNG)");
    f.opts["edit_prompt"] = cmd->add_option("--edit-prompt", f.edit_prompt, "Prompt (default: image of a {class})");
    f.opts["mask"] = cmd->add_option("--mask", f.mask, "Subject mask PNG (nonzero = subject)");
    f.opts["box"] = cmd->add_option("--box", f.box, "Subject box x0,y0,x1,y1");
    f.opts["mask_source"] = cmd->add_option("--mask-source", f.mask_source, "auto | user | box | none");
    f.opts["strength"] = cmd->add_option("--strength", f.strength, "Inversion strength (default 0.75)");
    f.opts["renoise"] = cmd->add_option("--renoise-iterations", f.renoise_iterations, "Inversion refinements");
}

class UsageError : public Error {
public:
    using Error::Error;
};

Resolution parse_resolution(const std::string& s) {
    const auto x = s.find_first_of("xX");
    try {
        if (x == std::string::npos) {
            const int v = std::stoi(s);
            return {v, v};
        }
        return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
    } catch (const std::exception&) {
        throw ValidationError("resolution", "expected HxW, got '" + s + "'");
    }
}

json parse_box(const std::string& s) {
    json box = json::array();
    std::stringstream ss(s);
    std::string part;
    try {
        while (std::getline(ss, part, ',')) box.push_back(std::stoi(part));
    } catch (const std::exception&) {
        throw ValidationError("box", "expected x0,y0,x1,y1");
    }
    if (box.size() != 4) throw ValidationError("box", "expected x0,y0,x1,y1");
    return box;
}

json load_json_file(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ValidationError("config", path.string() + ": " + e.what());
    } catch (const IoError& e) {
        throw ValidationError("config", e.what());
    }
}

fs::path under(const fs::path& workdir, const std::string& p) {
    const fs::path path = p;
    return path.is_relative() ? workdir / path : path;
}

/// defaults < file < flags, merged at the JSON level and parsed once.
json merged_spec(const std::string& task, const JobFlags& f, const fs::path& workdir) {
    json spec = json::object();
    if (!f.config_file.empty()) spec = load_json_file(under(workdir, f.config_file));
    if (!spec.is_object()) throw ValidationError("config", "job file must hold a JSON object");
    spec["task"] = task;
    if (!spec.contains("config") || spec["config"].is_null()) spec["config"] = json::object();
    json& cfg = spec["config"];
    auto set_sub = [&](const char* obj, const char* key, json value) {
        if (!cfg.contains(obj) || !cfg[obj].is_object()) cfg[obj] = json::object();
        cfg[obj][key] = std::move(value);
    };
    if (f.given("seed")) cfg["seed"] = f.seed;
    if (f.given("lr")) cfg["learning_rate"] = f.learning_rate;
    if (f.given("a")) set_sub("loss_weights", "a", f.a);
    if (f.given("b")) set_sub("loss_weights", "b", f.b);
    if (f.given("c")) set_sub("loss_weights", "c", f.c);
    if (f.given("max_iterations")) cfg["max_iterations"] = f.max_iterations;
    if (f.given("early_stop")) set_sub("early_stop", "enabled", f.early_stop);
    if (f.given("x")) set_sub("early_stop", "x_percent", f.early_stop_x);
    if (f.given("n")) set_sub("early_stop", "n_window", f.early_stop_n);
    if (f.given("k")) cfg["truncation_depth"] = f.truncation_depth;
    if (f.given("t")) cfg["denoise_steps"] = f.denoise_steps;
    if (f.given("resolution")) {
        const Resolution r = parse_resolution(f.resolution);
        cfg["resolution"] = {{"height", r.height}, {"width", r.width}};
    }
    if (f.given("rank")) cfg["adapter_rank"] = f.rank;
    if (f.given("targets")) cfg["target_layers"] = f.target_layers;
    if (f.given("scale")) cfg["adapter_scale"] = f.adapter_scale;
    if (f.given("optimizer")) cfg["optimizer"] = f.optimizer;
    if (f.given("beta1")) set_sub("adam", "beta1", f.beta1);
    if (f.given("beta2")) set_sub("adam", "beta2", f.beta2);
    if (f.given("epsilon")) set_sub("adam", "epsilon", f.epsilon);
    if (f.given("stride")) cfg["frame_stride"] = f.frame_stride;

    if (f.given("subject")) spec["subject"] = {{"path", f.subject}};
    if (f.given("class")) {
        if (!spec.contains("subject") || !spec["subject"].is_object()) spec["subject"] = json::object();
        spec["subject"]["class"] = f.class_label;
    }
    if (f.given("backbone")) spec["backbone"] = f.backbone;
    auto set_in = [&](const char* obj, const char* key, json value) {
        if (!spec.contains(obj) || !spec[obj].is_object()) spec[obj] = json::object();
        spec[obj][key] = std::move(value);
    };
    if (f.given("dino")) set_in("extractors", "dino", f.dino_extractor);
    if (f.given("ir")) set_in("extractors", "ir", f.ir_extractor);
    if (f.given("no_ps")) set_in("ablations", "no_prompt_simplification", f.no_prompt_simplification);
    if (f.given("no_bg")) set_in("ablations", "no_bg_loss", f.no_bg_loss);
    if (f.given("no_dino")) set_in("ablations", "no_dino", f.no_dino);
    if (f.given("no_ir")) set_in("ablations", "no_ir", f.no_ir);

    if (task == "generate") {
        if (f.given("prompt")) spec["prompts"] = f.prompts;
        if (f.given("simple_prompt")) spec["simple_prompt"] = f.simple_prompt;
        if (f.given("render_steps")) spec["render_steps"] = f.render_steps;
    } else {
        if (f.given("input")) spec["input"] = {{"path", f.input}};
        if (f.given("edit_prompt")) spec["edit_prompt"] = f.edit_prompt;
        if (f.given("mask")) {
            spec["mask"] = {{"path", f.mask}};
            if (!f.given("mask_source")) spec["mask_source"] = "user";
        }
        if (f.given("box")) {
            spec["box"] = parse_box(f.box);
            if (!f.given("mask_source") && !f.given("mask")) spec["mask_source"] = "box";
        }
        if (f.given("mask_source")) spec["mask_source"] = f.mask_source;
        if (f.given("strength")) set_in("inversion", "strength", f.strength);
        if (f.given("renoise")) set_in("inversion", "renoise_iterations", f.renoise_iterations);
    }
    return spec;
}

ModelCache cache_for(const CommonFlags& common) {
    ModelCache cache = ModelCache::from_environment();
    if (common.offline) cache.offline = true;
    return cache;
}

void print_decision(std::ostream& out, const OptimizationResult& r) {
    out << "stop: " << to_string(r.decision.reason) << " at step " << r.decision.stop_index << "\n";
    if (r.best_index >= 0)
        out << "best frame: " << r.best_index << " (loss " << r.loss_history[static_cast<std::size_t>(r.best_index)]
            << ", initial " << r.loss_history.front() << ")\n";
}

int cmd_generate(const JobFlags& f, const CommonFlags& common, std::ostream& out, std::ostream& err,
                 fs::path& session_dir) {
    const fs::path workdir = common.workdir;
    const JobSpec spec = job_spec_from_json(merged_spec("generate", f, workdir), workdir);
    const GenerationJob& job = *spec.generation;
    const json effective = describe(job);
    const std::string session_hash = digest_hex(effective.dump());
    session_dir = f.out.empty() ? workdir / "sessions" / ("generate-" + session_hash) : under(workdir, f.out);
    if (f.dry_run) {
        json j = effective;
        j["session_hash"] = session_hash;
        j["session_dir"] = session_dir.string();
        out << j.dump(2) << "\n";
        return 0;
    }
    const Runtime runtime = Runtime::create(cache_for(common));
    SessionWriter writer(session_dir,
                         CheckpointMetadata{job.config.adapter_rank, job.config.adapter_scale, job.backbone_id,
                                            config_hash(job.config), 0},
                         SessionWriterOptions{job.config.frame_stride, f.per_frame_checkpoints});
    writer.write_json("job.json", effective);
    RunHooks hooks;
    hooks.writer = &writer;
    hooks.on_warning = [&err](const std::string& w) { err << "warning: " << w << "\n"; };
    const GenerationOutput result = run_generation(job, runtime, hooks);
    out << "session: " << session_dir.string() << "\n";
    out << "optimized prompt: " << result.optimized_prompt << "\n";
    print_decision(out, result.optimization);
    for (const auto& r : result.renders)
        out << "render '" << r.prompt << "': " << (r.image ? "ok" : "failed: " + r.error) << "\n";
    if (result.optimization.decision.reason == StopReason::error) {
        err << "error: " << result.optimization.decision.message << "\n";
        return 2;
    }
    return 0;
}

int cmd_edit(const JobFlags& f, const CommonFlags& common, std::ostream& out, std::ostream& err,
             fs::path& session_dir) {
    const fs::path workdir = common.workdir;
    const JobSpec spec = job_spec_from_json(merged_spec("edit", f, workdir), workdir);
    const EditJob& job = *spec.edit;
    const json effective = describe(job);
    const std::string session_hash = digest_hex(effective.dump());
    session_dir = f.out.empty() ? workdir / "sessions" / ("edit-" + session_hash) : under(workdir, f.out);
    if (f.dry_run) {
        json j = effective;
        j["session_hash"] = session_hash;
        j["session_dir"] = session_dir.string();
        out << j.dump(2) << "\n";
        return 0;
    }
    const Runtime runtime = Runtime::create(cache_for(common));
    SessionWriter writer(session_dir,
                         CheckpointMetadata{job.config.adapter_rank, job.config.adapter_scale, job.backbone_id,
                                            config_hash(job.config), 0},
                         SessionWriterOptions{job.config.frame_stride, f.per_frame_checkpoints});
    writer.write_json("job.json", effective);
    RunHooks hooks;
    hooks.writer = &writer;
    hooks.on_warning = [&err](const std::string& w) { err << "warning: " << w << "\n"; };
    const EditOutput result = run_edit(job, runtime, hooks);
    out << "session: " << session_dir.string() << "\n";
    out << "class: " << result.class_label << ", prompt: " << result.prompt << "\n";
    out << "mask: " << to_string(result.mask.used) << (result.mask.background_loss_enabled ? "" : " (no background term)")
        << "\n";
    print_decision(out, result.optimization);
    if (result.optimization.decision.reason == StopReason::error) {
        err << "error: " << result.optimization.decision.message << "\n";
        return 2;
    }
    return 0;
}

std::vector<std::uint64_t> parse_seeds(const JobFlags& f) {
    std::vector<std::uint64_t> seeds;
    if (!f.seeds.empty()) {
        std::stringstream ss(f.seeds);
        std::string part;
        try {
            while (std::getline(ss, part, ',')) seeds.push_back(std::stoull(part));
        } catch (const std::exception&) {
            throw ValidationError("seeds", "expected a comma-separated list of integers");
        }
    } else {
        for (int i = 0; i < f.num_seeds; ++i) seeds.push_back(static_cast<std::uint64_t>(i));
    }
    if (seeds.empty()) throw ValidationError("seeds", "give --seeds or --num-seeds");
    return seeds;
}

int cmd_sweep(const JobFlags& f, const CommonFlags& common, std::ostream& out, std::ostream& err,
              fs::path& session_dir) {
    const fs::path workdir = common.workdir;
    const JobSpec spec = job_spec_from_json(merged_spec("generate", f, workdir), workdir);
    const GenerationJob& job = *spec.generation;
    const auto seeds = parse_seeds(f);
    json effective = describe(job);
    effective["seeds"] = seeds;
    const std::string session_hash = digest_hex(effective.dump());
    session_dir = f.out.empty() ? workdir / "sweeps" / ("sweep-" + session_hash) : under(workdir, f.out);
    if (f.dry_run) {
        effective["session_hash"] = session_hash;
        effective["session_dir"] = session_dir.string();
        out << effective.dump(2) << "\n";
        return 0;
    }
    const Runtime runtime = Runtime::create(cache_for(common));
    const SweepResult result = seed_sweep(job, seeds, runtime, f.workers, session_dir);
    int failed = 0;
    for (const auto& e : result.entries) {
        out << "seed " << e.seed << ": ";
        if (!e.error.empty()) {
            ++failed;
            out << "failed: " << e.error << "\n";
        } else {
            const auto& r = e.output->optimization;
            out << to_string(r.decision.reason) << ", best frame " << r.best_index << "\n";
        }
    }
    out << "sweep: " << session_dir.string() << "\n";
    if (failed == static_cast<int>(result.entries.size())) {
        err << "error: every seed failed\n";
        return 2;
    }
    return 0;
}

int cmd_eval(const std::string& manifest, const std::string& results_dir, const std::string& out_dir, bool stubs,
             const CommonFlags& common, std::ostream& out, std::ostream& err, fs::path& session_dir) {
    const fs::path workdir = common.workdir;
    const fs::path manifest_path = under(workdir, manifest);
    const fs::path results = results_dir.empty() ? manifest_path.parent_path() : under(workdir, results_dir);
    session_dir = out_dir.empty() ? results : under(workdir, out_dir);
    const ModelCache cache = cache_for(common);
    const auto registry = make_default_registry(cache);
    const BenchmarkReport report = run_benchmark(results, manifest_path, EvaluationBackends::defaults(*registry, cache, stubs));
    write_benchmark(report, session_dir);
    out << render_table(report);
    out << "report: " << (session_dir / "report.json").string() << "\n";
    for (const auto& w : report.warnings) err << "warning: " << w << "\n";
    return 0;
}

std::atomic<SessionServer*> g_server{nullptr};

extern "C" void handle_signal(int) {
    if (auto* s = g_server.load()) s->stop();
}

int cmd_serve(const std::string& host_flag, int port_flag, const std::string& root_flag, int workers_flag,
              const CommonFlags& common, std::ostream& out) {
    ServiceOptions options = ServiceOptions::from_environment();
    if (!root_flag.empty()) options.session_root = root_flag;
    if (workers_flag > 0) options.workers = workers_flag;
    options.session_root = under(common.workdir, options.session_root.string());
    options.job_base_dir = common.workdir;
    auto [host, port] = bind_address_from_environment();
    if (!host_flag.empty()) host = host_flag;
    if (port_flag >= 0) port = port_flag;

    SessionManager manager(options, Runtime::create(cache_for(common)));
    SessionServer server(manager);
    const int bound = server.bind(host, port);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    out << "listening on http://" << host << ":" << bound << " (sessions in " << options.session_root.string()
        << ")" << std::endl;
    g_server = &server;
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    server.listen_after_bind();
    g_server = nullptr;
    return 0;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Inference-time subject personalization with low-rank adapters", "subjectopt"};
    app.require_subcommand(1);
    CommonFlags common;
    app.add_option("--workdir", common.workdir, "Base directory for relative paths")->capture_default_str();
    app.add_flag("--offline", common.offline, "Use stub extractors instead of downloaded weights");

    JobFlags gen_flags, edit_flags, sweep_flags;
    auto* gen = app.add_subcommand("generate", "Optimize adapters on a subject, then render target prompts");
    add_config_flags(gen, gen_flags);
    add_generate_flags(gen, gen_flags);

    auto* edit = app.add_subcommand("edit", "Replace the subject of an image with the reference subject");
    add_config_flags(edit, edit_flags);
    add_edit_flags(edit, edit_flags);

    auto* sweep = app.add_subcommand("sweep", "Run generation over several seeds and collate a grid");
    add_config_flags(sweep, sweep_flags);
    add_generate_flags(sweep, sweep_flags);
    sweep->add_option("--seeds", sweep_flags.seeds, "Comma-separated seeds");
    sweep->add_option("--num-seeds", sweep_flags.num_seeds, "Seeds 0..N-1");
    sweep->add_option("--workers", sweep_flags.workers, "Concurrent sessions")->capture_default_str();

    std::string manifest, results_dir, eval_out;
    bool stub_backends = false;
    auto* eval = app.add_subcommand("eval", "Score generated or edited images listed in a JSONL manifest");
    eval->add_option("--manifest", manifest, "JSONL manifest")->required();
    eval->add_option("--results-dir", results_dir, "Base for relative manifest paths (default: manifest dir)");
    eval->add_option("--out", eval_out, "Report directory (default: results dir)");
    eval->add_flag("--stub-backends", stub_backends, "Score with stub extractors");

    std::string host, session_root;
    int port = -1, workers = 0;
    auto* serve = app.add_subcommand("serve", "Run the HTTP session service");
    serve->add_option("--host", host, "Bind host (default SUBJECTOPT_BIND or 127.0.0.1)");
    serve->add_option("--port", port, "Bind port (default 8080, 0 = any)");
    serve->add_option("--session-root", session_root, "Session directory root (default SUBJECTOPT_SESSION_ROOT)");
    serve->add_option("--workers", workers, "Worker pool size (default SUBJECTOPT_WORKERS or 1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    fs::path session_dir;
    CLI::App* active = app.get_subcommands().front();
    try {
        if (active == gen) return cmd_generate(gen_flags, common, out, err, session_dir);
        if (active == edit) return cmd_edit(edit_flags, common, out, err, session_dir);
        if (active == sweep) return cmd_sweep(sweep_flags, common, out, err, session_dir);
        if (active == eval)
            return cmd_eval(manifest, results_dir, eval_out, stub_backends, common, out, err, session_dir);
        return cmd_serve(host, port, session_root, workers, common, out);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n\n" << active->help();
        return 1;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n\n" << active->help();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        if (!session_dir.empty()) err << "session directory: " << session_dir.string() << "\n";
        return 2;
    }
}

} // namespace subjectopt
