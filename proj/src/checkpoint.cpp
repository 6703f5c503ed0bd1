#include "subjectopt/checkpoint.hpp"

#include "subjectopt/errors.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <iterator>

namespace subjectopt {

namespace {

using RowMajorXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void append_matrix(std::vector<unsigned char>& blob, const Eigen::MatrixXd& m) {
    const RowMajorXd row_major = m;
    const auto* bytes = reinterpret_cast<const unsigned char*>(row_major.data());
    blob.insert(blob.end(), bytes, bytes + row_major.size() * sizeof(double));
}

Eigen::MatrixXd read_matrix(const unsigned char* data, std::size_t begin, std::size_t end, Eigen::Index rows,
                            Eigen::Index cols) {
    if (end - begin != static_cast<std::size_t>(rows * cols) * sizeof(double))
        throw IoError("checkpoint tensor size does not match its shape");
    RowMajorXd m(rows, cols);
    std::memcpy(m.data(), data + begin, end - begin);
    return m;
}

std::string number_string(double v) { return nlohmann::json(v).dump(); }

} // namespace

std::vector<unsigned char> encode_checkpoint(const AdapterParams& adapters, const CheckpointMetadata& meta) {
    adapters.validate();
    nlohmann::json header = nlohmann::json::object();
    std::vector<unsigned char> blob;
    for (const auto& [id, f] : adapters.layers) {
        for (const auto& [suffix, m] : {std::pair{".down", &f.down}, std::pair{".up", &f.up}}) {
            const std::size_t begin = blob.size();
            append_matrix(blob, *m);
            header[id + suffix] = {{"dtype", "F64"},
                                   {"shape", {m->rows(), m->cols()}},
                                   {"data_offsets", {begin, blob.size()}}};
        }
    }
    header["__metadata__"] = {{"rank", std::to_string(meta.rank)},
                              {"scale", number_string(meta.scale)},
                              {"backbone_id", meta.backbone_id},
                              {"config_hash", meta.config_hash},
                              {"step_index", std::to_string(meta.step_index)}};
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::vector<unsigned char> out(8);
    std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>((n >> (8 * i)) & 0xff);
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8) throw IoError("checkpoint too short");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    if (8 + n > bytes.size()) throw IoError("checkpoint header overruns file");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint header is not JSON: ") + e.what());
    }
    const unsigned char* data = bytes.data() + 8 + n;
    const std::size_t data_size = bytes.size() - 8 - n;

    Checkpoint ck;
    try {
        const auto& md = header.at("__metadata__");
        ck.metadata.rank = std::stoi(md.at("rank").get<std::string>());
        ck.metadata.scale = std::stod(md.at("scale").get<std::string>());
        ck.metadata.backbone_id = md.at("backbone_id").get<std::string>();
        ck.metadata.config_hash = md.at("config_hash").get<std::string>();
        ck.metadata.step_index = std::stoi(md.at("step_index").get<std::string>());
        ck.adapters.rank = ck.metadata.rank;
        ck.adapters.scale = ck.metadata.scale;

        for (const auto& [name, entry] : header.items()) {
            if (name == "__metadata__") continue;
            if (entry.at("dtype") != "F64") throw IoError("unsupported dtype in tensor " + name);
            const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
            const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
            if (shape.size() != 2 || offsets.size() != 2 || offsets[1] > data_size || offsets[0] > offsets[1])
                throw IoError("malformed tensor entry " + name);
            Eigen::MatrixXd m = read_matrix(data, offsets[0], offsets[1], shape[0], shape[1]);
            const auto dot = name.rfind('.');
            if (dot == std::string::npos) throw IoError("unexpected tensor name " + name);
            const std::string layer = name.substr(0, dot);
            const std::string part = name.substr(dot + 1);
            if (part == "down")
                ck.adapters.layers[layer].down = std::move(m);
            else if (part == "up")
                ck.adapters.layers[layer].up = std::move(m);
            else
                throw IoError("unexpected tensor name " + name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw IoError("malformed checkpoint metadata");
    }
    ck.adapters.validate();
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const AdapterParams& adapters, const CheckpointMetadata& meta) {
    const auto bytes = encode_checkpoint(adapters, meta);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_checkpoint(bytes);
}

} // namespace subjectopt
