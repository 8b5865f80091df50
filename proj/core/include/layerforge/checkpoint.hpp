#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "layerforge/rng.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge::checkpoint {

struct ModelConfig {
    int64_t n_layers = 0;
    int64_t d_model = 0;
    int64_t n_heads = 0;
    int64_t d_ff = 0;
    int64_t vocab_size = 0;
    int64_t max_seq_len = 0;
    float rope_theta = 10000.0f;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

/// The seven per-layer projection matrices that get decomposed together.
enum class MatrixFamily : int {
    q_proj = 0,
    k_proj,
    v_proj,
    o_proj,
    up_proj,
    down_proj,
    gate_proj,
};

inline constexpr std::array<MatrixFamily, 7> kAllFamilies = {
    MatrixFamily::q_proj,   MatrixFamily::k_proj,  MatrixFamily::v_proj,
    MatrixFamily::o_proj,   MatrixFamily::up_proj, MatrixFamily::down_proj,
    MatrixFamily::gate_proj,
};

std::string_view family_name(MatrixFamily f);
MatrixFamily family_from_name(std::string_view name);  // throws ArgumentError

/// (d1, d2) of one family matrix, stored out-features x in-features.
std::pair<int64_t, int64_t> family_shape(const ModelConfig& cfg, MatrixFamily f);

struct LayerWeights {
    Tensor q_proj, k_proj, v_proj, o_proj;  // [d_model, d_model]
    Tensor gate_proj, up_proj;              // [d_ff, d_model]
    Tensor down_proj;                       // [d_model, d_ff]
    Tensor input_norm, post_attn_norm;      // [d_model]
};

struct TransformerCheckpoint {
    ModelConfig config;
    Tensor embed;  // [vocab, d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm;  // [d_model]
    Tensor lm_head;     // [vocab, d_model]

    Tensor& family(int64_t layer, MatrixFamily f);
    const Tensor& family(int64_t layer, MatrixFamily f) const;

    /// Checks that every tensor exists with exactly the declared shape.
    void validate() const;
};

/// Random Normal(0, init_std) weights, norm vectors set to 1.
TransformerCheckpoint random_checkpoint(const ModelConfig& cfg, Rng& rng, double init_std = 0.02);

// LFCK-v1 on disk. Tensor names: "embed", "layers.{i}.{q_proj|k_proj|v_proj|
// o_proj|gate_proj|up_proj|down_proj|input_norm|post_attn_norm}" with i
// zero-based, then "final_norm", "lm_head". Round trips are bit-exact.
void save_checkpoint(const TransformerCheckpoint& model, const std::filesystem::path& path);
TransformerCheckpoint load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace layerforge::checkpoint
