#include "subjectopt/session_service.hpp"

#include "subjectopt/checkpoint.hpp"
#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"
#include "subjectopt/session_store.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <random>

namespace fs = std::filesystem;

namespace subjectopt {

std::string to_string(SessionStatus status) {
    switch (status) {
    case SessionStatus::pending: return "pending";
    case SessionStatus::running: return "running";
    case SessionStatus::stopped_by_user: return "stopped_by_user";
    case SessionStatus::converged: return "converged";
    case SessionStatus::failed: return "failed";
    case SessionStatus::accepted: return "accepted";
    }
    return "failed";
}

SessionStatus session_status_from_string(const std::string& name) {
    for (auto s : {SessionStatus::pending, SessionStatus::running, SessionStatus::stopped_by_user,
                   SessionStatus::converged, SessionStatus::failed, SessionStatus::accepted})
        if (to_string(s) == name) return s;
    throw ConfigError("unknown session status '" + name + "'");
}

bool is_terminal(SessionStatus status) {
    return status != SessionStatus::pending && status != SessionStatus::running;
}

nlohmann::json to_json(const FrameSummary& frame, const std::string& session_id) {
    const std::string base = "/sessions/" + session_id + "/frames/" + std::to_string(frame.index);
    nlohmann::json comps = nlohmann::json::object();
    for (const auto& [k, v] : frame.components) comps[k] = v;
    return {{"index", frame.index},
            {"loss_total", frame.loss_total},
            {"components", comps},
            {"image", base + ".png"},
            {"thumbnail", base + "/thumbnail.png"}};
}

nlohmann::json to_json(const SessionSnapshot& s) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : s.frames) frames.push_back(to_json(f, s.id));
    nlohmann::json j{{"id", s.id},
                     {"status", to_string(s.status)},
                     {"task", s.task},
                     {"backbone", s.backbone},
                     {"frames", frames},
                     {"frame_count", s.frames.size()},
                     {"best_index", s.best_index},
                     {"decision", s.decision ? to_json(*s.decision) : nlohmann::json(nullptr)},
                     {"accepted_index", s.accepted_index ? nlohmann::json(*s.accepted_index) : nlohmann::json(nullptr)},
                     {"subject", "/sessions/" + s.id + "/subject.png"}};
    if (!s.error.empty()) j["error"] = s.error;
    return j;
}

ServiceOptions ServiceOptions::from_environment() {
    ServiceOptions o;
    if (const char* root = std::getenv("SUBJECTOPT_SESSION_ROOT"); root && *root) o.session_root = root;
    if (const char* w = std::getenv("SUBJECTOPT_WORKERS"); w && *w) {
        try {
            o.workers = std::max(1, std::stoi(w));
        } catch (const std::exception&) {
            throw ConfigError("SUBJECTOPT_WORKERS must be a positive integer");
        }
    }
    return o;
}

std::pair<std::string, int> bind_address_from_environment() {
    std::string host = "127.0.0.1";
    int port = 8080;
    if (const char* b = std::getenv("SUBJECTOPT_BIND"); b && *b) {
        const std::string s = b;
        const auto colon = s.rfind(':');
        try {
            if (colon == std::string::npos) {
                host = s;
            } else {
                host = s.substr(0, colon);
                port = std::stoi(s.substr(colon + 1));
            }
        } catch (const std::exception&) {
            throw ConfigError("SUBJECTOPT_BIND must look like host:port");
        }
    }
    return {host, port};
}

struct SessionManager::Session {
    std::string id;
    int ordinal = 0;
    nlohmann::json spec;
    std::optional<JobSpec> job;
    SessionStatus status = SessionStatus::pending;
    std::vector<FrameSummary> frames;
    int best_index = -1;
    std::optional<StopDecision> decision;
    std::optional<int> accepted_index;
    std::string error;
    std::string task;
    std::string backbone;
    std::stop_source stop;
    fs::path dir;
};

SessionManager::SessionManager(ServiceOptions options, Runtime runtime)
    : options_(std::move(options)), runtime_(std::move(runtime)) {
    fs::create_directories(options_.session_root);
    load_existing();
    const int n = std::max(1, options_.workers);
    for (int i = 0; i < n; ++i) workers_.emplace_back([this](std::stop_token t) { worker_loop(t); });
}

SessionManager::~SessionManager() {
    {
        std::lock_guard lock(mutex_);
        shutting_down_ = true;
        for (auto& [id, s] : sessions_)
            if (s->status == SessionStatus::running) s->stop.request_stop();
    }
    changed_.notify_all();
    workers_.clear();
}

namespace {

FrameSummary summary_of(const nlohmann::json& rec) {
    FrameSummary f;
    f.index = rec.at("step").get<int>();
    f.loss_total = rec.at("total").get<double>();
    for (const auto& [k, v] : rec.at("components").items()) f.components[k] = v.get<double>();
    return f;
}

} // namespace

void SessionManager::load_existing() {
    std::vector<std::shared_ptr<Session>> pending;
    for (const auto& entry : fs::directory_iterator(options_.session_root)) {
        if (!entry.is_directory() || !fs::exists(entry.path() / "state.json")) continue;
        try {
            const auto state = nlohmann::json::parse(read_file(entry.path() / "state.json"));
            auto s = std::make_shared<Session>();
            s->id = state.at("id").get<std::string>();
            s->ordinal = state.at("ordinal").get<int>();
            s->status = session_status_from_string(state.at("status").get<std::string>());
            s->task = state.value("task", "");
            s->backbone = state.value("backbone", "");
            s->best_index = state.value("best_index", -1);
            s->error = state.value("error", "");
            if (state.contains("decision") && !state["decision"].is_null()) {
                const auto& d = state["decision"];
                s->decision = StopDecision{stop_reason_from_string(d.at("reason").get<std::string>()),
                                           d.at("stop_index").get<int>(), d.value("message", "")};
            }
            if (state.contains("accepted_index") && !state["accepted_index"].is_null())
                s->accepted_index = state["accepted_index"].get<int>();
            s->dir = entry.path();
            s->spec = nlohmann::json::parse(read_file(entry.path() / "job.json"));
            for (const auto& rec : read_loss_log(entry.path())) s->frames.push_back(summary_of(rec));
            if (s->status == SessionStatus::running) {
                s->status = SessionStatus::failed;
                s->error = "service restarted while the session was running";
                s->decision = StopDecision{StopReason::error, static_cast<int>(s->frames.size()) - 1, s->error};
                persist_state(*s);
            } else if (s->status == SessionStatus::pending) {
                s->job = job_spec_from_json(s->spec, options_.job_base_dir);
                pending.push_back(s);
            }
            next_ordinal_ = std::max(next_ordinal_, s->ordinal + 1);
            sessions_[s->id] = s;
        } catch (const std::exception&) {
            // Unreadable session directories are left alone and not listed.
        }
    }
    std::sort(pending.begin(), pending.end(), [](const auto& a, const auto& b) { return a->ordinal < b->ordinal; });
    for (const auto& s : pending) queue_.push_back(s->id);
}

void SessionManager::persist_state(const Session& s) const {
    nlohmann::json j{{"id", s.id},
                     {"ordinal", s.ordinal},
                     {"status", to_string(s.status)},
                     {"task", s.task},
                     {"backbone", s.backbone},
                     {"best_index", s.best_index},
                     {"decision", s.decision ? to_json(*s.decision) : nlohmann::json(nullptr)},
                     {"accepted_index", s.accepted_index ? nlohmann::json(*s.accepted_index) : nlohmann::json(nullptr)},
                     {"error", s.error}};
    write_file_atomic(s.dir / "state.json", j.dump(2) + "\n");
}

std::string SessionManager::create(const nlohmann::json& job_spec) {
    JobSpec job = job_spec_from_json(job_spec, options_.job_base_dir);
    auto s = std::make_shared<Session>();
    s->spec = job_spec;
    s->task = job.task;
    s->backbone = job.backbone_id();
    s->job = std::move(job);
    std::random_device rd;
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "%04x", static_cast<unsigned>(rd() & 0xffff));
    {
        std::lock_guard lock(mutex_);
        s->ordinal = next_ordinal_++;
        char id[48];
        std::snprintf(id, sizeof id, "sess-%06d-%s", s->ordinal, suffix);
        s->id = id;
        s->dir = options_.session_root / s->id;
        fs::create_directories(s->dir);
        write_file_atomic(s->dir / "job.json", job_spec.dump() + "\n");
        persist_state(*s);
        sessions_[s->id] = s;
        queue_.push_back(s->id);
    }
    changed_.notify_all();
    return s->id;
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + id + "'");
    return it->second;
}

SessionSnapshot SessionManager::snapshot(const Session& s) const {
    return {s.id, s.status, s.task, s.backbone, s.frames, s.best_index, s.decision, s.accepted_index, s.error};
}

SessionSnapshot SessionManager::get(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return snapshot(*find(id));
}

std::vector<SessionSnapshot> SessionManager::list() const {
    std::lock_guard lock(mutex_);
    std::vector<std::shared_ptr<Session>> all;
    for (const auto& [id, s] : sessions_) all.push_back(s);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a->ordinal < b->ordinal; });
    std::vector<SessionSnapshot> out;
    for (const auto& s : all) out.push_back(snapshot(*s));
    return out;
}

StopDecision SessionManager::stop(const std::string& id, std::chrono::milliseconds wait) {
    std::unique_lock lock(mutex_);
    auto s = find(id);
    if (is_terminal(s->status)) return s->decision.value_or(StopDecision{StopReason::user_stop, -1, ""});
    if (s->status == SessionStatus::pending) {
        queue_.erase(std::remove(queue_.begin(), queue_.end(), id), queue_.end());
        s->status = SessionStatus::stopped_by_user;
        s->decision = StopDecision{StopReason::user_stop, -1, "stopped before the first step"};
        persist_state(*s);
        changed_.notify_all();
        return *s->decision;
    }
    s->stop.request_stop();
    changed_.wait_for(lock, wait, [&] { return is_terminal(s->status); });
    if (s->decision) return *s->decision;
    return {StopReason::user_stop, static_cast<int>(s->frames.size()) - 1, "stop requested"};
}

SessionSnapshot SessionManager::accept(const std::string& id, std::optional<int> frame_index) {
    std::lock_guard lock(mutex_);
    auto s = find(id);
    if (!is_terminal(s->status)) throw CapabilityError("session '" + id + "' is still " + to_string(s->status));
    if (s->frames.empty()) throw ConfigError("session '" + id + "' has no frames to accept");
    const int index = frame_index.value_or(s->best_index);
    if (index < 0 || index >= static_cast<int>(s->frames.size()))
        throw ValidationError("frame", "index " + std::to_string(index) + " out of range [0, " +
                          std::to_string(s->frames.size()) + ")");
    s->accepted_index = index;
    s->status = SessionStatus::accepted;
    persist_state(*s);
    changed_.notify_all();
    return snapshot(*s);
}

std::string SessionManager::export_adapter(const std::string& id, std::optional<int> frame_index) const {
    fs::path path;
    {
        std::lock_guard lock(mutex_);
        auto s = find(id);
        if (s->frames.empty()) throw ConfigError("session '" + id + "' has no frames yet");
        const int index = frame_index.value_or(s->best_index);
        if (index < 0 || index >= static_cast<int>(s->frames.size()))
            throw ValidationError("frame", "index " + std::to_string(index) + " out of range [0, " +
                              std::to_string(s->frames.size()) + ")");
        path = s->dir / frame_checkpoint_name(index);
    }
    if (!fs::exists(path)) throw NotFoundError("no adapter checkpoint at " + path.string());
    return read_file(path);
}

fs::path SessionManager::session_dir(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return find(id)->dir;
}

fs::path SessionManager::frame_image_path(const std::string& id, int index) const {
    std::lock_guard lock(mutex_);
    auto s = find(id);
    if (index < 0 || index >= static_cast<int>(s->frames.size()))
        throw NotFoundError("frame " + std::to_string(index) + " not available");
    return s->dir / frame_file_name(index);
}

SessionSnapshot SessionManager::wait_for_update(const std::string& id, std::size_t known_frames,
                                                std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mutex_);
    auto s = find(id);
    changed_.wait_for(lock, timeout,
                      [&] { return s->frames.size() > known_frames || is_terminal(s->status) || shutting_down_; });
    return snapshot(*s);
}

void SessionManager::wait_idle() const {
    std::unique_lock lock(mutex_);
    changed_.wait(lock, [&] {
        for (const auto& [id, s] : sessions_)
            if (!is_terminal(s->status)) return false;
        return true;
    });
}

void SessionManager::worker_loop(std::stop_token) {
    for (;;) {
        std::shared_ptr<Session> s;
        {
            std::unique_lock lock(mutex_);
            changed_.wait(lock, [&] { return shutting_down_ || !queue_.empty(); });
            if (shutting_down_) return;
            s = sessions_.at(queue_.front());
            queue_.pop_front();
            s->status = SessionStatus::running;
            persist_state(*s);
        }
        changed_.notify_all();
        run_session(s);
    }
}

void SessionManager::run_session(const std::shared_ptr<Session>& s) {
    StopDecision decision;
    std::string error;
    try {
        const OptimizationConfig& cfg = s->job->config();
        SessionWriter writer(s->dir,
                             CheckpointMetadata{cfg.adapter_rank, cfg.adapter_scale, s->backbone, config_hash(cfg), 0},
                             SessionWriterOptions{cfg.frame_stride, true});
        RunHooks hooks;
        hooks.stop = s->stop.get_token();
        hooks.writer = &writer;
        hooks.on_frame = [this, s](const GeneratedFrame& frame, const AdapterParams&) {
            {
                std::lock_guard lock(mutex_);
                s->frames.push_back({frame.step_index, frame.losses.total, frame.loss_components()});
                if (s->best_index < 0 || frame.losses.total < s->frames[static_cast<std::size_t>(s->best_index)].loss_total)
                    s->best_index = frame.step_index;
            }
            changed_.notify_all();
        };
        if (s->job->generation)
            decision = run_generation(*s->job->generation, runtime_, hooks).optimization.decision;
        else
            decision = run_edit(*s->job->edit, runtime_, hooks).optimization.decision;
        if (decision.reason == StopReason::error) error = decision.message;
    } catch (const std::exception& e) {
        error = e.what();
        std::lock_guard lock(mutex_);
        decision = {StopReason::error, static_cast<int>(s->frames.size()) - 1, error};
    }
    {
        std::lock_guard lock(mutex_);
        s->decision = decision;
        s->error = error;
        switch (decision.reason) {
        case StopReason::user_stop: s->status = SessionStatus::stopped_by_user; break;
        case StopReason::error: s->status = SessionStatus::failed; break;
        default: s->status = SessionStatus::converged; break;
        }
        persist_state(*s);
    }
    changed_.notify_all();
}

Image thumbnail(const Image& image, int max_side) {
    if (image.empty()) return image;
    const double scale = static_cast<double>(max_side) / std::max(image.height, image.width);
    const int h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
    const int w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
    return resize_bilinear(image, h, w);
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {}) {
    nlohmann::json body{{"error", message}};
    if (!field.empty()) body["field"] = field;
    send_json(res, status, body);
}

std::optional<int> frame_param(const httplib::Request& req) {
    if (!req.has_param("frame")) return std::nullopt;
    const std::string v = req.get_param_value("frame");
    try {
        std::size_t used = 0;
        const int i = std::stoi(v, &used);
        if (used != v.size()) throw ValidationError("frame", "expected an integer");
        return i;
    } catch (const ValidationError&) {
        throw;
    } catch (const std::exception&) {
        throw ValidationError("frame", "expected an integer");
    }
}

std::string sse_event(const std::string& event, const nlohmann::json& data) {
    return "event: " + event + "\ndata: " + data.dump() + "\n\n";
}

} // namespace

SessionServer::SessionServer(SessionManager& manager) : manager_(manager), server_(std::make_unique<httplib::Server>()) {
    server_->new_task_queue = [] { return new httplib::ThreadPool(32); };
    routes();
}

SessionServer::~SessionServer() { stop(); }

int SessionServer::bind(const std::string& host, int port) {
    if (port == 0) return server_->bind_to_any_port(host);
    return server_->bind_to_port(host, port) ? port : -1;
}

bool SessionServer::listen_after_bind() { return server_->listen_after_bind(); }

void SessionServer::stop() {
    if (server_) server_->stop();
}

void SessionServer::routes() {
    httplib::Server& svr = *server_;
    svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        try {
            std::rethrow_exception(ep);
        } catch (const ValidationError& e) {
            send_error(res, 400, e.what(), e.field());
        } catch (const NotFoundError& e) {
            send_error(res, 404, e.what());
        } catch (const ConfigError& e) {
            send_error(res, 400, e.what());
        } catch (const CapabilityError& e) {
            send_error(res, 409, e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, std::string("malformed JSON: ") + e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    });
    svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    svr.Get("/health", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"ok", true}}); });

    svr.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        const std::string id = manager_.create(body);
        send_json(res, 201, to_json(manager_.get(id)));
    });

    svr.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : manager_.list()) {
            nlohmann::json j = to_json(s);
            j.erase("frames");
            out.push_back(j);
        }
        send_json(res, 200, out);
    });

    svr.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, 200, to_json(manager_.get(req.matches[1])));
    });

    svr.Get(R"(/sessions/([^/]+)/frames)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        manager_.get(id);
        auto sent = std::make_shared<std::size_t>(0);
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider("text/event-stream", [this, id, sent](std::size_t, httplib::DataSink& sink) {
            const SessionSnapshot snap = manager_.wait_for_update(id, *sent, std::chrono::milliseconds(250));
            while (*sent < snap.frames.size()) {
                const std::string ev = sse_event("frame", to_json(snap.frames[*sent], id));
                if (!sink.write(ev.data(), ev.size())) return false;
                ++*sent;
            }
            if (is_terminal(snap.status)) {
                nlohmann::json end{{"status", to_string(snap.status)},
                                   {"best_index", snap.best_index},
                                   {"decision", snap.decision ? to_json(*snap.decision) : nlohmann::json(nullptr)}};
                const std::string ev = sse_event("end", end);
                sink.write(ev.data(), ev.size());
                sink.done();
            }
            return true;
        });
    });

    auto serve_png = [](httplib::Response& res, const fs::path& path) {
        if (!fs::exists(path)) throw NotFoundError("image not stored: " + path.filename().string());
        res.set_content(read_file(path), "image/png");
    };

    svr.Get(R"(/sessions/([^/]+)/frames/(\d+)\.png)", [this, serve_png](const httplib::Request& req,
                                                                         httplib::Response& res) {
        serve_png(res, manager_.frame_image_path(req.matches[1], std::stoi(req.matches[2])));
    });

    svr.Get(R"(/sessions/([^/]+)/frames/(\d+)/thumbnail\.png)", [this](const httplib::Request& req,
                                                                        httplib::Response& res) {
        const fs::path path = manager_.frame_image_path(req.matches[1], std::stoi(req.matches[2]));
        if (!fs::exists(path)) throw NotFoundError("image not stored: " + path.filename().string());
        const auto png = encode_png(thumbnail(read_png(path)));
        res.set_content(std::string(png.begin(), png.end()), "image/png");
    });

    svr.Get(R"(/sessions/([^/]+)/subject\.png)", [this, serve_png](const httplib::Request& req,
                                                                    httplib::Response& res) {
        serve_png(res, manager_.session_dir(req.matches[1]) / "subject.png");
    });

    svr.Post(R"(/sessions/([^/]+)/stop)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const StopDecision d = manager_.stop(id);
        send_json(res, 200, {{"decision", to_json(d)}, {"status", to_string(manager_.get(id).status)}});
    });

    svr.Post(R"(/sessions/([^/]+)/accept)", [this](const httplib::Request& req, httplib::Response& res) {
        std::optional<int> frame = frame_param(req);
        if (!req.body.empty()) {
            const auto body = nlohmann::json::parse(req.body);
            if (body.contains("frame") && !body["frame"].is_null()) {
                if (!body["frame"].is_number_integer()) throw ValidationError("frame", "expected an integer");
                frame = body["frame"].get<int>();
            }
        }
        const SessionSnapshot s = manager_.accept(req.matches[1], frame);
        nlohmann::json j = to_json(s);
        j["adapter"] = "/sessions/" + s.id + "/adapter?frame=" + std::to_string(*s.accepted_index);
        send_json(res, 200, j);
    });

    svr.Get(R"(/sessions/([^/]+)/adapter)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        const auto frame = frame_param(req);
        const std::string bytes = manager_.export_adapter(id, frame);
        const int index = frame.value_or(manager_.get(id).best_index);
        res.set_header("Content-Disposition",
                       "attachment; filename=\"" + id + "_frame_" + std::to_string(index) + ".safetensors\"");
        res.set_content(bytes, "application/octet-stream");
    });
}

} // namespace subjectopt
