#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace subjectopt {

/// A frozen linear layer that accepts a low-rank adapter.
struct LayerSpec {
    std::string id;
    int in_dim = 0;
    int out_dim = 0;
};

/// One low-rank delta: W' = W + scale * up * down.
struct LoraFactors {
    Eigen::MatrixXd down; // rank x in_dim
    Eigen::MatrixXd up;   // out_dim x rank
};

using AdapterGradients = std::map<std::string, LoraFactors>;

struct AdapterParams {
    int rank = 0;
    double scale = 1.0;
    std::map<std::string, LoraFactors> layers;

    const LoraFactors* find(const std::string& layer_id) const;
    std::vector<std::string> layer_ids() const;
    std::size_t parameter_count() const;
    bool empty() const { return layers.empty(); }

    // Throws ConfigError when rank < 1 or a factor disagrees with the rank.
    void validate() const;

    // FNV-1a over layer ids and raw factor bytes.
    std::uint64_t checksum() const;

    // Copy with every up-projection multiplied by s.
    AdapterParams scaled(double s) const;

    bool all_finite() const;
};

bool operator==(const AdapterParams& a, const AdapterParams& b);

bool is_attention_layer(const std::string& layer_id);

/// Random down-projections (uniform, +-1/sqrt(in_dim)), zero up-projections.
/// Empty `target_layers` selects every attention projection layer.
AdapterParams init_adapters(const std::vector<LayerSpec>& available, int rank,
                            const std::vector<std::string>& target_layers, std::uint64_t seed,
                            double scale = 1.0);

// Zero-valued gradient container with the same shapes as `params`.
AdapterGradients zero_gradients(const AdapterParams& params);

bool all_finite(const AdapterGradients& grads);

} // namespace subjectopt
