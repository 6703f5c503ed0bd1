#include "subjectopt/adapters.hpp"

#include "subjectopt/errors.hpp"
#include "subjectopt/rng.hpp"

#include <cmath>
#include <string_view>

namespace subjectopt {

const LoraFactors* AdapterParams::find(const std::string& layer_id) const {
    const auto it = layers.find(layer_id);
    return it == layers.end() ? nullptr : &it->second;
}

std::vector<std::string> AdapterParams::layer_ids() const {
    std::vector<std::string> ids;
    ids.reserve(layers.size());
    for (const auto& [id, _] : layers) ids.push_back(id);
    return ids;
}

std::size_t AdapterParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, f] : layers) n += static_cast<std::size_t>(f.down.size() + f.up.size());
    return n;
}

void AdapterParams::validate() const {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
    for (const auto& [id, f] : layers) {
        if (f.down.rows() != rank || f.up.cols() != rank)
            throw ConfigError("adapter layer '" + id + "' factor shapes disagree with rank " + std::to_string(rank));
    }
}

std::uint64_t AdapterParams::checksum() const {
    std::uint64_t h = fnv1a64(std::to_string(rank));
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&scale), sizeof scale), h);
    for (const auto& [id, f] : layers) {
        h = fnv1a64(id, h);
        for (const Eigen::MatrixXd* m : {&f.down, &f.up}) {
            h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m->data()), m->size() * sizeof(double)), h);
        }
    }
    return h;
}

AdapterParams AdapterParams::scaled(double s) const {
    AdapterParams out = *this;
    for (auto& [_, f] : out.layers) f.up *= s;
    return out;
}

bool AdapterParams::all_finite() const {
    for (const auto& [_, f] : layers)
        if (!f.down.allFinite() || !f.up.allFinite()) return false;
    return true;
}

bool operator==(const AdapterParams& a, const AdapterParams& b) {
    if (a.rank != b.rank || a.scale != b.scale || a.layers.size() != b.layers.size()) return false;
    for (const auto& [id, f] : a.layers) {
        const LoraFactors* g = b.find(id);
        if (!g || f.down.rows() != g->down.rows() || f.down.cols() != g->down.cols() || f.up.rows() != g->up.rows() ||
            f.up.cols() != g->up.cols() || f.down != g->down || f.up != g->up)
            return false;
    }
    return true;
}

bool is_attention_layer(const std::string& layer_id) { return layer_id.find("attn") != std::string::npos; }

AdapterParams init_adapters(const std::vector<LayerSpec>& available, int rank,
                            const std::vector<std::string>& target_layers, std::uint64_t seed, double scale) {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));

    std::vector<const LayerSpec*> chosen;
    if (target_layers.empty()) {
        for (const auto& spec : available)
            if (is_attention_layer(spec.id)) chosen.push_back(&spec);
        if (chosen.empty()) throw ConfigError("backbone exposes no attention projection layers");
    } else {
        for (const auto& id : target_layers) {
            const LayerSpec* match = nullptr;
            for (const auto& spec : available)
                if (spec.id == id) match = &spec;
            if (!match) throw ConfigError("unknown adapter target layer '" + id + "'");
            chosen.push_back(match);
        }
    }

    AdapterParams params;
    params.rank = rank;
    params.scale = scale;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for (const LayerSpec* spec : chosen) {
        LoraFactors f;
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec->in_dim));
        f.down.resize(rank, spec->in_dim);
        for (Eigen::Index i = 0; i < f.down.size(); ++i) f.down.data()[i] = rng.uniform(-bound, bound);
        f.up = Eigen::MatrixXd::Zero(spec->out_dim, rank);
        params.layers.emplace(spec->id, std::move(f));
    }
    return params;
}

AdapterGradients zero_gradients(const AdapterParams& params) {
    AdapterGradients grads;
    for (const auto& [id, f] : params.layers)
        grads.emplace(id, LoraFactors{Eigen::MatrixXd::Zero(f.down.rows(), f.down.cols()),
                                      Eigen::MatrixXd::Zero(f.up.rows(), f.up.cols())});
    return grads;
}

bool all_finite(const AdapterGradients& grads) {
    for (const auto& [_, f] : grads)
        if (!f.down.allFinite() || !f.up.allFinite()) return false;
    return true;
}

} // namespace subjectopt
