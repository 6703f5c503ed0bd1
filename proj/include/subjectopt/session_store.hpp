#pragma once

#include "subjectopt/adapters.hpp"
#include "subjectopt/checkpoint.hpp"
#include "subjectopt/engine.hpp"
#include "subjectopt/image.hpp"

#include <json.hpp>

#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

namespace subjectopt {

/// Session directory layout:
///   frame_0000.png ...        decoded frames
///   losses.jsonl              one record per step (no timings)
///   adapters/frame_0000.safetensors   per-frame adapters (optional)
///   adapter.safetensors       best-frame adapters
///   metadata.json, mask.png, subject.png, renders/...
struct SessionWriterOptions {
    int frame_stride = 1;
    bool per_frame_checkpoints = false;
};

std::string frame_file_name(int step_index);
std::string frame_checkpoint_name(int step_index);

nlohmann::json frame_record(const GeneratedFrame& frame);
// Parses losses.jsonl; an absent file yields an empty list.
std::vector<nlohmann::json> read_loss_log(const std::filesystem::path& session_dir);

class SessionWriter {
public:
    SessionWriter(std::filesystem::path dir, CheckpointMetadata base_metadata, SessionWriterOptions options = {});

    const std::filesystem::path& dir() const { return dir_; }

    void write_frame(const GeneratedFrame& frame, const AdapterParams& adapters_used);
    void write_image(const std::string& relative, const Image& image);
    void write_mask(const std::string& relative, const Mask& mask);
    void write_adapters(const std::string& relative, const AdapterParams& adapters, int step_index);
    void write_json(const std::string& relative, const nlohmann::json& value);
    void write_text(const std::string& relative, const std::string& text);

private:
    std::filesystem::path prepare(const std::string& relative);

    std::filesystem::path dir_;
    CheckpointMetadata base_;
    SessionWriterOptions options_;
    std::mutex mutex_;
};

nlohmann::json to_json(const StopDecision& decision);

// Writes via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

} // namespace subjectopt
