#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/predictor.hpp"

namespace layerforge::expansion {

using checkpoint::MatrixFamily;
using checkpoint::ModelConfig;
using checkpoint::TransformerCheckpoint;
using predictor::PredictorNet;

enum class Strategy {
    lesa,           // predicted layers in SVD coefficient space
    lesa_raw,       // predicted layers on raw weight columns (no SVD)
    interpolation,  // a copy after every layer
    stack,          // consecutive groups duplicated wholesale
    pro,            // copies of selected layers, optionally identity-initialized
    solar,          // first n ++ last n
};

std::string_view strategy_name(Strategy s);
Strategy strategy_from_name(std::string_view name);

struct LayerEntry {
    enum class Kind { original, synth, copy } kind = Kind::original;
    // original/copy: src_a is the source layer; synth: between src_a, src_b.
    int64_t src_a = 0;
    int64_t src_b = 0;
};

struct ExpansionParams {
    // lesa / lesa_raw: insert between each adjacent pair inside [a, b]
    // (1-based original layer indices).
    int64_t interval_a = 0;
    int64_t interval_b = 0;
    int64_t group_size = 0;     // stack; 0 = whole model
    int64_t n_copies = 0;       // pro; 0 = ceil(L/4)
    bool identity_init = false; // pro
    int64_t n_overlap = 0;      // solar; 0 = ceil(3L/4)
};

struct ExpansionPlan {
    Strategy strategy = Strategy::lesa;
    int64_t n_original = 0;
    ExpansionParams params;
    std::vector<LayerEntry> layers;

    /// Zero-based indices (in the expanded model) of non-original layers.
    std::vector<int64_t> new_layer_indices() const;
    /// Zero-based indices of layers carried over unchanged.
    std::vector<int64_t> original_layer_indices() const;
};

ExpansionPlan plan_expansion(const ModelConfig& cfg, Strategy strategy,
                             const ExpansionParams& params);

/// Builds the deeper checkpoint for lesa / lesa_raw. With use_svd, each
/// synthesized family matrix is reconstruct(U&Sigma, G_W(V_l, V_{l+1}));
/// without, G_W maps raw weight columns directly. Norm vectors of new
/// layers are the elementwise mean of their two neighbors.
TransformerCheckpoint expand_lesa(const TransformerCheckpoint& model,
                                  const std::map<MatrixFamily, PredictorNet>& predictors,
                                  const ExpansionPlan& plan, bool use_svd);

/// Duplication strategies (interpolation, stack, pro, solar). Deep copies;
/// pro with identity_init zeroes o_proj and down_proj of the copies.
TransformerCheckpoint expand_baseline(const TransformerCheckpoint& model,
                                      const ExpansionPlan& plan);

struct NormReportRow {
    MatrixFamily family{};
    double original_mean_norm = 0;  // mean column L2 norm over original layers
    double synth_mean_norm = 0;     // same over non-original layers
    double ratio = 0;
};

/// Mean-column-norm comparison between carried-over and new layers of an
/// expanded checkpoint.
std::vector<NormReportRow> norm_report(const TransformerCheckpoint& expanded,
                                       const ExpansionPlan& plan);

void write_norm_report_csv(const std::vector<NormReportRow>& rows,
                           const std::filesystem::path& path);

/// Provenance sidecar: ordered layer list with kinds, sources, strategy and
/// parameters, as JSON.
void write_provenance(const ExpansionPlan& plan, const std::filesystem::path& path);
ExpansionPlan read_provenance(const std::filesystem::path& path);

}  // namespace layerforge::expansion
