#pragma once

#include "subjectopt/engine.hpp"
#include "subjectopt/workflows.hpp"

#include <json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace subjectopt {

enum class SessionStatus { pending, running, stopped_by_user, converged, failed, accepted };

std::string to_string(SessionStatus status);
SessionStatus session_status_from_string(const std::string& name);
bool is_terminal(SessionStatus status);

struct FrameSummary {
    int index = 0;
    double loss_total = 0.0;
    std::map<std::string, double> components;
};

struct SessionSnapshot {
    std::string id;
    SessionStatus status = SessionStatus::pending;
    std::string task;
    std::string backbone;
    std::vector<FrameSummary> frames;
    int best_index = -1;
    std::optional<StopDecision> decision;
    std::optional<int> accepted_index;
    std::string error;
};

nlohmann::json to_json(const FrameSummary& frame, const std::string& session_id);
nlohmann::json to_json(const SessionSnapshot& snapshot);

struct ServiceOptions {
    std::filesystem::path session_root = "sessions";
    int workers = 1;
    // Base directory for relative paths inside job specs.
    std::filesystem::path job_base_dir;

    // SUBJECTOPT_SESSION_ROOT, SUBJECTOPT_WORKERS.
    static ServiceOptions from_environment();
};

/// Registry of optimization sessions backed by a FIFO worker pool. Every
/// session persists to session_root/<id>; a new manager over the same root
/// lists earlier sessions and re-queues ones that never started.
class SessionManager {
public:
    SessionManager(ServiceOptions options, Runtime runtime);
    ~SessionManager();

    SessionManager(const SessionManager&) = delete;
    SessionManager& operator=(const SessionManager&) = delete;

    // Throws ValidationError for a malformed spec.
    std::string create(const nlohmann::json& job_spec);

    // Throw NotFoundError for unknown ids.
    SessionSnapshot get(const std::string& id) const;
    std::vector<SessionSnapshot> list() const;

    /// Delivers the stop signal and waits (up to `wait`) for the loop to
    /// halt. Terminal sessions return their existing decision unchanged.
    StopDecision stop(const std::string& id, std::chrono::milliseconds wait = std::chrono::seconds(60));

    // Marks a terminal session accepted; CapabilityError while running.
    SessionSnapshot accept(const std::string& id, std::optional<int> frame_index);

    // Checkpoint bytes for a frame (default: best frame). ValidationError if out of range.
    std::string export_adapter(const std::string& id, std::optional<int> frame_index) const;

    std::filesystem::path session_dir(const std::string& id) const;
    std::filesystem::path frame_image_path(const std::string& id, int index) const;

    /// Blocks until the session has more than `known_frames` frames, becomes
    /// terminal, or the timeout passes.
    SessionSnapshot wait_for_update(const std::string& id, std::size_t known_frames,
                                    std::chrono::milliseconds timeout) const;

    // Blocks until no session is pending or running.
    void wait_idle() const;

private:
    struct Session;

    void worker_loop(std::stop_token token);
    void run_session(const std::shared_ptr<Session>& session);
    void persist_state(const Session& s) const;
    void load_existing();
    SessionSnapshot snapshot(const Session& s) const;
    std::shared_ptr<Session> find(const std::string& id) const;

    ServiceOptions options_;
    Runtime runtime_;
    mutable std::mutex mutex_;
    mutable std::condition_variable changed_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::deque<std::string> queue_;
    int next_ordinal_ = 1;
    bool shutting_down_ = false;
    std::vector<std::jthread> workers_;
};

// Longest side scaled to `max_side` pixels.
Image thumbnail(const Image& image, int max_side = 256);

/// HTTP front end:
///   POST /sessions, GET /sessions, GET /sessions/{id},
///   GET /sessions/{id}/frames (text/event-stream),
///   GET /sessions/{id}/frames/{i}.png, GET /sessions/{id}/frames/{i}/thumbnail.png,
///   GET /sessions/{id}/subject.png, POST /sessions/{id}/stop,
///   POST /sessions/{id}/accept, GET /sessions/{id}/adapter?frame=i, GET /health
class SessionServer {
public:
    explicit SessionServer(SessionManager& manager);
    ~SessionServer();

    // Returns the bound port (port 0 picks a free one); -1 on failure.
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind().
    bool listen_after_bind();
    void stop();

private:
    void routes();

    SessionManager& manager_;
    std::unique_ptr<httplib::Server> server_;
};

// "host:port" from SUBJECTOPT_BIND, defaulting to 127.0.0.1:8080.
std::pair<std::string, int> bind_address_from_environment();

} // namespace subjectopt
