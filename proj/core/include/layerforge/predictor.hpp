#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/svdspace.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge::predictor {

using checkpoint::MatrixFamily;
using checkpoint::TransformerCheckpoint;
using svdspace::SvdSpace;

/// Three-layer MLP applied per column: maps the concatenated coefficient
/// columns of two surrounding layers (2r inputs) to the column of the layer
/// between them (r outputs). ReLU after the first two affine maps, linear
/// output.
struct PredictorNet {
    MatrixFamily family{};
    int64_t input_rank = 0;  // r
    int64_t hidden = 256;
    Tensor w1, b1;  // [h, 2r], [h]
    Tensor w2, b2;  // [h, h], [h]
    Tensor w3, b3;  // [r, h], [r]

    int64_t parameter_count() const;
};

struct PredictorTrainConfig {
    double lr = 1e-3;
    int epochs = 5;
    double lambda = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    double init_std = 0.02;

    void validate() const;
};

struct TripletSample {
    Tensor prev, mid, next;  // each [r, d2]
    int64_t layer_index = 0;    // index of the middle layer, zero-based
    int64_t checkpoint_id = 0;  // provenance
};

struct TripletDataset {
    std::vector<TripletSample> samples;
};

/// Consecutive-layer triplets (V_{i-1}, V_i, V_{i+1}) from one space;
/// n_layers - 2 samples.
TripletDataset build_triplets(const SvdSpace& space, int64_t checkpoint_id = 0);

/// Raw-weight triplets for the no-SVD variant; input rank is d1.
TripletDataset build_raw_triplets(const TransformerCheckpoint& model, MatrixFamily family,
                                  int64_t checkpoint_id = 0);

void append_dataset(TripletDataset& dst, const TripletDataset& src);

/// Deterministic shuffle-then-split; holdout_frac of samples go to the
/// second dataset (rounded down, at least one stays in training).
std::pair<TripletDataset, TripletDataset> split_dataset(const TripletDataset& ds,
                                                        double holdout_frac, uint64_t seed);

/// Weights ~ Normal(0, init_std), biases zero, deterministic given seed.
PredictorNet build_predictor(MatrixFamily family, int64_t input_rank, int64_t hidden,
                             uint64_t seed, double init_std = 0.02);

/// Column j of the result is MLP(concat(prev[:, j], next[:, j])).
Tensor forward_columns(const PredictorNet& net, const Tensor& prev_cols,
                       const Tensor& next_cols);

struct LossParts {
    double total = 0;  // (1 - lambda) * mse + lambda * norm
    double mse = 0;    // mean over all r*n entries of squared error
    double norm = 0;   // mean over columns of (||pred_col|| - ||target_col||)^2
};

LossParts combined_loss(const Tensor& pred, const Tensor& target, double lambda);

struct LossRecord {
    int epoch = 0;
    int sample = 0;
    double L = 0, L1 = 0, L2 = 0;
};

struct TrainResult {
    PredictorNet net;
    std::vector<LossRecord> history;
};

/// One AdamW step per sample (a sample is one triplet, processed as a batch
/// of its d2 columns); per-epoch shuffled order, exact analytic gradients.
TrainResult train_predictor(MatrixFamily family, const TripletDataset& dataset,
                            const PredictorTrainConfig& cfg, int64_t hidden = 256);

/// Mean (L, L1, L2) over the dataset; no parameter mutation.
LossParts evaluate_predictor(const PredictorNet& net, const TripletDataset& dataset,
                             double lambda);

Tensor predict_intermediate(const PredictorNet& net, const Tensor& v_a, const Tensor& v_b);

void save_predictor(const PredictorNet& net, const std::filesystem::path& path);
PredictorNet load_predictor(const std::filesystem::path& path);

/// CSV with header "epoch,sample,L,L1,L2".
void write_loss_history_csv(const std::vector<LossRecord>& history,
                            const std::filesystem::path& path);

namespace detail {

/// Flat buffers for the templated math path; double instantiation backs the
/// finite-difference gradient checks.
template <typename Real>
struct NetBuf {
    int64_t r = 0, h = 0;
    std::vector<Real> w1, b1, w2, b2, w3, b3;
};

template <typename Real>
NetBuf<Real> to_buf(const PredictorNet& net);

template <typename Real>
void from_buf(const NetBuf<Real>& buf, PredictorNet& net);

/// x: [n, 2r] row-major (one column sample per row), out: [n, r].
template <typename Real>
void forward_buf(const NetBuf<Real>& net, const std::vector<Real>& x, int64_t n,
                 std::vector<Real>& h1, std::vector<Real>& h2, std::vector<Real>& out);

/// Returns loss parts; grads accumulated into gout (pre-zeroed by caller).
template <typename Real>
LossParts loss_and_grad_buf(const NetBuf<Real>& net, const std::vector<Real>& x,
                            const std::vector<Real>& target, int64_t n, double lambda,
                            NetBuf<Real>& gout, std::vector<Real>& h1, std::vector<Real>& h2,
                            std::vector<Real>& out);

}  // namespace detail

}  // namespace layerforge::predictor
