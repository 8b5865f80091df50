#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge::lm {

using checkpoint::ModelConfig;
using checkpoint::TransformerCheckpoint;

struct TokenBatch {
    int64_t batch = 0;
    int64_t seq = 0;
    std::vector<int32_t> tokens;   // [batch * seq], row-major
    std::vector<int64_t> lengths;  // per row; empty means every row is full

    int64_t length(int64_t row) const {
        return lengths.empty() ? seq : lengths[static_cast<size_t>(row)];
    }
    /// Count of predicted positions: sum_b (length(b) - 1).
    int64_t predicted_tokens() const;
    void validate(const ModelConfig& cfg) const;
};

/// Model weights as flat typed buffers. The float instantiation is the
/// training representation; the double instantiation backs the
/// finite-difference gradient checks.
template <typename Real>
struct LayerParams {
    std::vector<Real> q_proj, k_proj, v_proj, o_proj;  // [D*D]
    std::vector<Real> gate_proj, up_proj;              // [F*D]
    std::vector<Real> down_proj;                       // [D*F]
    std::vector<Real> input_norm, post_attn_norm;      // [D]
};

template <typename Real>
struct ModelParams {
    ModelConfig config;
    std::vector<Real> embed;  // [V*D]
    std::vector<LayerParams<Real>> layers;
    std::vector<Real> final_norm;  // [D]
    std::vector<Real> lm_head;     // [V*D]

    static ModelParams from_checkpoint(const TransformerCheckpoint& model);
    void write_back(TransformerCheckpoint& model) const;
    static ModelParams zeros_like(const ModelParams& other);

    /// Visits every parameter buffer with its canonical tensor name and the
    /// owning layer index (-1 for embed/final_norm/lm_head).
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        fn(std::string("embed"), embed, int64_t(-1));
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            auto& lw = layers[l];
            const int64_t li = static_cast<int64_t>(l);
            fn(p + "q_proj", lw.q_proj, li);
            fn(p + "k_proj", lw.k_proj, li);
            fn(p + "v_proj", lw.v_proj, li);
            fn(p + "o_proj", lw.o_proj, li);
            fn(p + "gate_proj", lw.gate_proj, li);
            fn(p + "up_proj", lw.up_proj, li);
            fn(p + "down_proj", lw.down_proj, li);
            fn(p + "input_norm", lw.input_norm, li);
            fn(p + "post_attn_norm", lw.post_attn_norm, li);
        }
        fn(std::string("final_norm"), final_norm, int64_t(-1));
        fn(std::string("lm_head"), lm_head, int64_t(-1));
    }
};

/// Activations stored by forward() for the exact backward pass, plus scratch
/// reused across calls. Layout is row-major with N = batch * seq rows.
template <typename Real>
struct ForwardCache {
    int64_t batch = 0, seq = 0;

    std::vector<std::vector<Real>> x;  // n_layers + 1 buffers [N*D]
    std::vector<std::vector<Real>> a1, q_rot, k_rot, v_rows;   // [N*D]
    std::vector<std::vector<Real>> probs;                      // [B*H*T*T]
    std::vector<std::vector<Real>> attn_cat, x_mid, a2;        // [N*D]
    std::vector<std::vector<Real>> gate, up;                   // [N*F]
    std::vector<std::vector<Real>> inv_rms1, inv_rms2;         // [N]
    std::vector<Real> a_final, inv_rms_final;
    std::vector<Real> logits;  // [N*V]
    std::vector<Real> rope_cos, rope_sin;  // [T * hd/2]

    // scratch (forward + backward), reused across calls
    std::vector<Real> m_buf;                            // [N*F]
    std::vector<Real> d_gate, d_up, d_m;                // [N*F]
    std::vector<Real> d_a1, d_a2, d_attn_cat;           // [N*D]
    std::vector<Real> d_q, d_k, d_v, dx;                // [N*D]
    std::vector<Real> d_logits;                         // [N*V]
    std::vector<Real> qh, kh, vh, oh, doh, dqh, dkh, dvh;  // [T*hd]
    std::vector<Real> stt;                              // [T*T]
};

inline constexpr double kRmsEps = 1e-5;

/// Pre-norm decoder forward; fills cache (including logits). Causal
/// attention with rotary embeddings on q/k (interleaved pairs), SwiGLU MLP.
template <typename Real>
void forward(const ModelParams<Real>& params, const TokenBatch& batch, ForwardCache<Real>& cache);

/// Mean next-token cross-entropy (natural log) over non-ignored positions;
/// targets are the inputs shifted left by one, last position ignored.
/// Per-row softmax statistics are computed in float64.
template <typename Real>
double loss_from_logits(const std::vector<Real>& logits, const TokenBatch& batch, int64_t vocab);

/// Backward through the whole model. Accumulates into grads (callers zero
/// them at the start of an accumulation window); returns the loss.
template <typename Real>
double loss_and_backward(const ModelParams<Real>& params, const TokenBatch& batch,
                         ForwardCache<Real>& cache, ModelParams<Real>& grads);

// Convenience entry points on checkpoints (float32 path).

/// Logits tensor [batch, seq, vocab].
Tensor forward_logits(const TransformerCheckpoint& model, const TokenBatch& batch);

double lm_loss(const Tensor& logits, const TokenBatch& batch);

/// exp(total cross-entropy / total predicted tokens) over the eval set.
double perplexity(const TransformerCheckpoint& model,
                  const std::vector<std::vector<int32_t>>& eval_set);

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template struct ForwardCache<float>;
extern template struct ForwardCache<double>;
extern template void forward<float>(const ModelParams<float>&, const TokenBatch&,
                                    ForwardCache<float>&);
extern template void forward<double>(const ModelParams<double>&, const TokenBatch&,
                                     ForwardCache<double>&);
extern template double loss_from_logits<float>(const std::vector<float>&, const TokenBatch&,
                                               int64_t);
extern template double loss_from_logits<double>(const std::vector<double>&, const TokenBatch&,
                                                int64_t);
extern template double loss_and_backward<float>(const ModelParams<float>&, const TokenBatch&,
                                                ForwardCache<float>&, ModelParams<float>&);
extern template double loss_and_backward<double>(const ModelParams<double>&, const TokenBatch&,
                                                 ForwardCache<double>&, ModelParams<double>&);

}  // namespace layerforge::lm
