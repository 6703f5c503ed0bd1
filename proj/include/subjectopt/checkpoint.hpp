#pragma once

#include "subjectopt/adapters.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace subjectopt {

struct CheckpointMetadata {
    int rank = 0;
    double scale = 1.0;
    std::string backbone_id;
    std::string config_hash;
    int step_index = 0;

    friend bool operator==(const CheckpointMetadata&, const CheckpointMetadata&) = default;
};

struct Checkpoint {
    AdapterParams adapters;
    CheckpointMetadata metadata;
};

// safetensors layout: u64 little-endian header size, JSON header, raw F64
// row-major tensors named "{layer_id}.down" / "{layer_id}.up".
std::vector<unsigned char> encode_checkpoint(const AdapterParams& adapters, const CheckpointMetadata& meta);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const AdapterParams& adapters, const CheckpointMetadata& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace subjectopt
