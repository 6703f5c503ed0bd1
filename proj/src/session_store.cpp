#include "subjectopt/session_store.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/png_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace subjectopt {

std::string frame_file_name(int step_index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04d.png", step_index);
    return buf;
}

std::string frame_checkpoint_name(int step_index) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "adapters/frame_%04d.safetensors", step_index);
    return buf;
}

nlohmann::json frame_record(const GeneratedFrame& frame) {
    nlohmann::json j;
    j["step"] = frame.step_index;
    j["total"] = frame.losses.total;
    nlohmann::json comps = nlohmann::json::object();
    for (const auto& [k, v] : frame.loss_components()) comps[k] = v;
    j["components"] = comps;
    return j;
}

std::vector<nlohmann::json> read_loss_log(const fs::path& session_dir) {
    std::vector<nlohmann::json> out;
    std::ifstream in(session_dir / "losses.jsonl");
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

SessionWriter::SessionWriter(fs::path dir, CheckpointMetadata base_metadata, SessionWriterOptions options)
    : dir_(std::move(dir)), base_(std::move(base_metadata)), options_(options) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create session directory " + dir_.string() + ": " + ec.message());
}

fs::path SessionWriter::prepare(const std::string& relative) {
    const fs::path p = dir_ / relative;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
}

void SessionWriter::write_frame(const GeneratedFrame& frame, const AdapterParams& adapters_used) {
    std::lock_guard lock(mutex_);
    const int stride = std::max(1, options_.frame_stride);
    if (frame.step_index % stride == 0) {
        const auto png = encode_png(frame.image);
        write_file_atomic(prepare(frame_file_name(frame.step_index)), std::string(png.begin(), png.end()));
    }
    if (options_.per_frame_checkpoints) {
        CheckpointMetadata meta = base_;
        meta.step_index = frame.step_index;
        save_checkpoint(prepare(frame_checkpoint_name(frame.step_index)), adapters_used, meta);
    }
    std::ofstream log(dir_ / "losses.jsonl", std::ios::app);
    if (!log) throw IoError("cannot append to " + (dir_ / "losses.jsonl").string());
    log << frame_record(frame).dump() << '\n';
}

void SessionWriter::write_image(const std::string& relative, const Image& image) {
    std::lock_guard lock(mutex_);
    write_png(prepare(relative), image);
}

void SessionWriter::write_mask(const std::string& relative, const Mask& mask) {
    std::lock_guard lock(mutex_);
    write_mask_png(prepare(relative), mask);
}

void SessionWriter::write_adapters(const std::string& relative, const AdapterParams& adapters, int step_index) {
    std::lock_guard lock(mutex_);
    CheckpointMetadata meta = base_;
    meta.step_index = step_index;
    save_checkpoint(prepare(relative), adapters, meta);
}

void SessionWriter::write_json(const std::string& relative, const nlohmann::json& value) {
    std::lock_guard lock(mutex_);
    write_file_atomic(prepare(relative), value.dump(2) + "\n");
}

void SessionWriter::write_text(const std::string& relative, const std::string& text) {
    std::lock_guard lock(mutex_);
    write_file_atomic(prepare(relative), text);
}

nlohmann::json to_json(const StopDecision& decision) {
    return {{"reason", to_string(decision.reason)}, {"stop_index", decision.stop_index}, {"message", decision.message}};
}

} // namespace subjectopt
