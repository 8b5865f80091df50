#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/expansion.hpp"
#include "layerforge/predictor.hpp"

namespace layerforge::trainpipe {

using checkpoint::TransformerCheckpoint;

// Byte-level tokenizer: bytes 0-255 map to themselves, plus BOS/EOS.
inline constexpr int32_t kBosToken = 256;
inline constexpr int32_t kEosToken = 257;
inline constexpr int32_t kByteVocab = 258;

std::vector<int32_t> tokenize(std::span<const uint8_t> bytes);
/// Inverse of tokenize; BOS/EOS tokens are skipped.
std::vector<uint8_t> detokenize(std::span<const int32_t> tokens);

struct TrainConfig {
    double lr = 5e-5;  // continual-pretraining default; from-scratch uses 3e-4
    double warmup_ratio = 0.1;
    int64_t batch_size = 4;
    int64_t grad_accum_steps = 4;
    int64_t cutoff_len = 256;
    int64_t total_steps = 100;
    uint64_t seed = 0;
    enum class FreezeMode { new_layers_only, none };
    FreezeMode freeze_mode = FreezeMode::new_layers_only;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

    static TrainConfig from_scratch_defaults();
    void validate() const;
};

/// Linear warmup to lr over w = warmup_ratio * total_steps optimizer steps,
/// then cosine to zero; step is 1-based and runs to total_steps.
double lr_at(const TrainConfig& cfg, int64_t step);

struct Corpus {
    std::vector<uint8_t> train_bytes;
    std::vector<std::vector<int32_t>> eval_sequences;  // BOS-prefixed byte windows
};

/// Reads every regular file under `path` (or the file itself) in
/// lexicographic path order, carves eval_count sequences of eval_seq_len
/// tokens from the tail, and keeps the rest as the training stream.
Corpus ingest(const std::filesystem::path& path, int64_t eval_count = 500,
              int64_t eval_seq_len = 128);

struct LossPoint {
    int64_t step = 0;
    double raw_loss = 0;
    double smoothed_loss = 0;  // EMA, coefficient 0.98
    double lr = 0;
};

struct LossCurve {
    std::vector<LossPoint> points;
    std::string strategy;
    uint64_t seed = 0;
    std::string config_hash;
};

/// CSV with header "step,raw_loss,smoothed_loss,lr".
void write_losscurve_csv(const LossCurve& curve, const std::filesystem::path& path);

struct PretrainResult {
    TransformerCheckpoint model;
    LossCurve curve;
    std::vector<std::string> warnings;
};

/// AdamW training with per-layer freezing. Layers listed in frozen_layers
/// (zero-based) are left bit-identical; embed / final_norm / lm_head train
/// only in FreezeMode::none. Gradients are averaged over grad_accum_steps
/// micro-batches per optimizer step.
PretrainResult pretrain(const TransformerCheckpoint& model, const Corpus& corpus,
                        const TrainConfig& cfg, const std::vector<int64_t>& frozen_layers);

struct CompareOptions {
    // lesa interval defaults to the output end: [L - ceil(L/2), L - 1].
    int64_t interval_a = 0;
    int64_t interval_b = 0;
    int64_t solar_overlap = 0;  // 0 = ceil(3L/4)
    int64_t stack_group = 0;
    int64_t pro_copies = 0;
    bool pro_identity_init = false;
    predictor::PredictorTrainConfig predictor_cfg;
    int64_t predictor_hidden = 256;
};

struct CompareCell {
    std::string strategy;
    uint64_t seed = 0;
    double init_ppl = 0;
    double final_ppl = 0;
    int64_t steps_to_threshold = -1;  // vs same-seed solar final smoothed loss
    double wall_clock_s = 0;
    LossCurve curve;
};

struct CompareReport {
    std::vector<CompareCell> cells;
};

/// Expand -> record init PPL -> continual-pretrain -> record final PPL, for
/// every (strategy, seed). Freeze defaults: new_layers_only for
/// lesa/lesa_raw/interpolation/stack/pro, none (full-parameter) for solar.
CompareReport compare_strategies(const TransformerCheckpoint& base, const Corpus& corpus,
                                 const std::vector<expansion::Strategy>& strategies,
                                 const std::vector<uint64_t>& seeds, const TrainConfig& cfg,
                                 const CompareOptions& options);

/// report.csv: "strategy,seed,init_ppl,final_ppl,steps_to_threshold,
/// wall_clock_s"; report.md summarizes majority-of-seeds orderings;
/// per-cell loss curves land next to them.
void write_report(const CompareReport& report, const std::filesystem::path& dir);

/// FNV-1a hash of the config fields, hex-encoded (curve metadata).
std::string config_hash(const TrainConfig& cfg);

/// Default 1.5x lesa insertion interval for an L-layer model: the output
/// end, [L - ceil(L/2), L - 1] in 1-based indices.
std::pair<int64_t, int64_t> default_lesa_interval(int64_t n_layers);

}  // namespace layerforge::trainpipe
