#include "layerforge/lm.hpp"

#include <cmath>
#include <cstring>

#include "gemm_kernels.hpp"

namespace layerforge::lm {

using layerforge::detail::gemm_nn;
using layerforge::detail::gemm_nt;
using layerforge::detail::gemm_tn_acc;

int64_t TokenBatch::predicted_tokens() const {
    int64_t m = 0;
    for (int64_t b = 0; b < batch; ++b) m += length(b) - 1;
    return m;
}

void TokenBatch::validate(const ModelConfig& cfg) const {
    if (batch < 1 || seq < 1) throw ValidationError("token batch must be non-empty");
    if (static_cast<size_t>(batch * seq) != tokens.size()) {
        throw ValidationError("token payload does not match batch*seq");
    }
    if (seq > cfg.max_seq_len) {
        throw ValidationError("sequence length " + std::to_string(seq) +
                              " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (!lengths.empty()) {
        if (static_cast<size_t>(batch) != lengths.size()) {
            throw ValidationError("lengths size does not match batch");
        }
        for (int64_t len : lengths) {
            if (len < 1 || len > seq) throw ValidationError("row length out of range");
        }
    }
    for (int32_t t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw ValidationError("token " + std::to_string(t) + " out of vocab range [0, " +
                                  std::to_string(cfg.vocab_size) + ")");
        }
    }
}

namespace {

template <typename Real>
std::vector<Real> tensor_to_vec(const Tensor& t) {
    std::vector<Real> v(static_cast<size_t>(t.numel()));
    const float* p = t.data();
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(p[i]);
    return v;
}

template <typename Real>
void vec_to_tensor(const std::vector<Real>& v, Tensor& t) {
    float* p = t.data();
    for (size_t i = 0; i < v.size(); ++i) p[i] = static_cast<float>(v[i]);
}

template <typename Real>
void rmsnorm_forward(const Real* x, const Real* w, Real* out, Real* inv_rms, int64_t rows,
                     int64_t d) {
    for (int64_t i = 0; i < rows; ++i) {
        const Real* xr = x + i * d;
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
        const Real r = static_cast<Real>(1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps));
        inv_rms[i] = r;
        Real* orow = out + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] * r * w[j];
    }
}

// dx_accum += d(loss)/dx, dw_accum += d(loss)/dw for y = x * inv_rms * w.
template <typename Real>
void rmsnorm_backward(const Real* x, const Real* inv_rms, const Real* w, const Real* dy,
                      Real* dx_accum, Real* dw_accum, int64_t rows, int64_t d) {
    for (int64_t i = 0; i < rows; ++i) {
        const Real* xr = x + i * d;
        const Real* dyr = dy + i * d;
        Real* dxr = dx_accum + i * d;
        const double r = static_cast<double>(inv_rms[i]);
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double u = static_cast<double>(dyr[j]) * static_cast<double>(w[j]);
            dot += u * static_cast<double>(xr[j]);
        }
        const double k = r * r * r * dot / static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
            const double u = static_cast<double>(dyr[j]) * static_cast<double>(w[j]);
            dxr[j] += static_cast<Real>(u * r - static_cast<double>(xr[j]) * k);
            dw_accum[j] += static_cast<Real>(static_cast<double>(dyr[j]) *
                                             static_cast<double>(xr[j]) * r);
        }
    }
}

// Interleaved rotary embedding: pair p of a head rotates by t * theta^(-2p/hd).
template <typename Real>
void build_rope_tables(const ModelConfig& cfg, int64_t seq, std::vector<Real>& cos_t,
                       std::vector<Real>& sin_t) {
    const int64_t hd = cfg.d_model / cfg.n_heads;
    const int64_t pairs = hd / 2;
    cos_t.resize(static_cast<size_t>(seq * pairs));
    sin_t.resize(static_cast<size_t>(seq * pairs));
    for (int64_t t = 0; t < seq; ++t) {
        for (int64_t p = 0; p < pairs; ++p) {
            const double freq = std::pow(static_cast<double>(cfg.rope_theta),
                                         -2.0 * static_cast<double>(p) / static_cast<double>(hd));
            const double ang = static_cast<double>(t) * freq;
            cos_t[static_cast<size_t>(t * pairs + p)] = static_cast<Real>(std::cos(ang));
            sin_t[static_cast<size_t>(t * pairs + p)] = static_cast<Real>(std::sin(ang));
        }
    }
}

// In-place rotation of q/k rows; sign=+1 forward, -1 for the backward
// (transpose) rotation.
template <typename Real>
void apply_rope(Real* xrow, int64_t heads, int64_t hd, const Real* cos_row, const Real* sin_row,
                int sign) {
    const int64_t pairs = hd / 2;
    for (int64_t h = 0; h < heads; ++h) {
        Real* base = xrow + h * hd;
        for (int64_t p = 0; p < pairs; ++p) {
            const Real c = cos_row[p];
            const Real s = sign > 0 ? sin_row[p] : -sin_row[p];
            const Real x0 = base[2 * p], x1 = base[2 * p + 1];
            base[2 * p] = x0 * c - x1 * s;
            base[2 * p + 1] = x0 * s + x1 * c;
        }
    }
}

template <typename Real>
void resize_cache(ForwardCache<Real>& cache, const ModelConfig& cfg, int64_t batch, int64_t seq) {
    const int64_t N = batch * seq;
    const int64_t D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size, H = cfg.n_heads;
    const int64_t hd = D / H;
    const size_t L = static_cast<size_t>(cfg.n_layers);
    cache.batch = batch;
    cache.seq = seq;

    auto fit = [](std::vector<std::vector<Real>>& vs, size_t count, int64_t len) {
        vs.resize(count);
        for (auto& v : vs) v.assign(static_cast<size_t>(len), Real(0));
    };
    fit(cache.x, L + 1, N * D);
    fit(cache.a1, L, N * D);
    fit(cache.q_rot, L, N * D);
    fit(cache.k_rot, L, N * D);
    fit(cache.v_rows, L, N * D);
    fit(cache.probs, L, batch * H * seq * seq);
    fit(cache.attn_cat, L, N * D);
    fit(cache.x_mid, L, N * D);
    fit(cache.a2, L, N * D);
    fit(cache.gate, L, N * F);
    fit(cache.up, L, N * F);
    fit(cache.inv_rms1, L, N);
    fit(cache.inv_rms2, L, N);
    cache.a_final.assign(static_cast<size_t>(N * D), Real(0));
    cache.inv_rms_final.assign(static_cast<size_t>(N), Real(0));
    cache.logits.assign(static_cast<size_t>(N * V), Real(0));
    build_rope_tables(cfg, seq, cache.rope_cos, cache.rope_sin);

    cache.m_buf.assign(static_cast<size_t>(N * F), Real(0));
    cache.d_gate.assign(static_cast<size_t>(N * F), Real(0));
    cache.d_up.assign(static_cast<size_t>(N * F), Real(0));
    cache.d_m.assign(static_cast<size_t>(N * F), Real(0));
    cache.d_a1.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_a2.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_attn_cat.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_q.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_k.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_v.assign(static_cast<size_t>(N * D), Real(0));
    cache.dx.assign(static_cast<size_t>(N * D), Real(0));
    cache.d_logits.assign(static_cast<size_t>(N * V), Real(0));
    cache.qh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.kh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.vh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.oh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.doh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.dqh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.dkh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.dvh.assign(static_cast<size_t>(seq * hd), Real(0));
    cache.stt.assign(static_cast<size_t>(seq * seq), Real(0));
}

template <typename Real>
void gather_head(const std::vector<Real>& rows, Real* dst, int64_t b, int64_t h, int64_t seq,
                 int64_t d, int64_t hd) {
    for (int64_t t = 0; t < seq; ++t) {
        std::memcpy(dst + t * hd, rows.data() + (b * seq + t) * d + h * hd,
                    static_cast<size_t>(hd) * sizeof(Real));
    }
}

template <typename Real>
void scatter_head_add(const Real* src, std::vector<Real>& rows, int64_t b, int64_t h, int64_t seq,
                      int64_t d, int64_t hd) {
    for (int64_t t = 0; t < seq; ++t) {
        Real* dst = rows.data() + (b * seq + t) * d + h * hd;
        const Real* s = src + t * hd;
        for (int64_t j = 0; j < hd; ++j) dst[j] += s[j];
    }
}

template <typename Real>
inline Real silu(Real z) {
    const double zd = static_cast<double>(z);
    return static_cast<Real>(zd / (1.0 + std::exp(-zd)));
}

template <typename Real>
inline Real silu_grad(Real z) {
    const double zd = static_cast<double>(z);
    const double sig = 1.0 / (1.0 + std::exp(-zd));
    return static_cast<Real>(sig * (1.0 + zd * (1.0 - sig)));
}

}  // namespace

template <typename Real>
ModelParams<Real> ModelParams<Real>::from_checkpoint(const TransformerCheckpoint& model) {
    model.validate();
    ModelParams<Real> p;
    p.config = model.config;
    p.embed = tensor_to_vec<Real>(model.embed);
    p.layers.resize(model.layers.size());
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto& src = model.layers[l];
        auto& dst = p.layers[l];
        dst.q_proj = tensor_to_vec<Real>(src.q_proj);
        dst.k_proj = tensor_to_vec<Real>(src.k_proj);
        dst.v_proj = tensor_to_vec<Real>(src.v_proj);
        dst.o_proj = tensor_to_vec<Real>(src.o_proj);
        dst.gate_proj = tensor_to_vec<Real>(src.gate_proj);
        dst.up_proj = tensor_to_vec<Real>(src.up_proj);
        dst.down_proj = tensor_to_vec<Real>(src.down_proj);
        dst.input_norm = tensor_to_vec<Real>(src.input_norm);
        dst.post_attn_norm = tensor_to_vec<Real>(src.post_attn_norm);
    }
    p.final_norm = tensor_to_vec<Real>(model.final_norm);
    p.lm_head = tensor_to_vec<Real>(model.lm_head);
    return p;
}

template <typename Real>
void ModelParams<Real>::write_back(TransformerCheckpoint& model) const {
    vec_to_tensor(embed, model.embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const auto& src = layers[l];
        auto& dst = model.layers[l];
        vec_to_tensor(src.q_proj, dst.q_proj);
        vec_to_tensor(src.k_proj, dst.k_proj);
        vec_to_tensor(src.v_proj, dst.v_proj);
        vec_to_tensor(src.o_proj, dst.o_proj);
        vec_to_tensor(src.gate_proj, dst.gate_proj);
        vec_to_tensor(src.up_proj, dst.up_proj);
        vec_to_tensor(src.down_proj, dst.down_proj);
        vec_to_tensor(src.input_norm, dst.input_norm);
        vec_to_tensor(src.post_attn_norm, dst.post_attn_norm);
    }
    vec_to_tensor(final_norm, model.final_norm);
    vec_to_tensor(lm_head, model.lm_head);
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::zeros_like(const ModelParams<Real>& other) {
    ModelParams<Real> p;
    p.config = other.config;
    p.embed.assign(other.embed.size(), Real(0));
    p.layers.resize(other.layers.size());
    for (size_t l = 0; l < other.layers.size(); ++l) {
        const auto& src = other.layers[l];
        auto& dst = p.layers[l];
        dst.q_proj.assign(src.q_proj.size(), Real(0));
        dst.k_proj.assign(src.k_proj.size(), Real(0));
        dst.v_proj.assign(src.v_proj.size(), Real(0));
        dst.o_proj.assign(src.o_proj.size(), Real(0));
        dst.gate_proj.assign(src.gate_proj.size(), Real(0));
        dst.up_proj.assign(src.up_proj.size(), Real(0));
        dst.down_proj.assign(src.down_proj.size(), Real(0));
        dst.input_norm.assign(src.input_norm.size(), Real(0));
        dst.post_attn_norm.assign(src.post_attn_norm.size(), Real(0));
    }
    p.final_norm.assign(other.final_norm.size(), Real(0));
    p.lm_head.assign(other.lm_head.size(), Real(0));
    return p;
}

template <typename Real>
void forward(const ModelParams<Real>& params, const TokenBatch& batch, ForwardCache<Real>& cache) {
    const ModelConfig& cfg = params.config;
    batch.validate(cfg);
    const int64_t B = batch.batch, T = batch.seq;
    const int64_t D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size, H = cfg.n_heads;
    const int64_t hd = D / H;
    const int64_t N = B * T;
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));

    if (cache.batch != B || cache.seq != T ||
        cache.x.size() != static_cast<size_t>(cfg.n_layers) + 1 ||
        cache.x[0].size() != static_cast<size_t>(N * D) ||
        cache.logits.size() != static_cast<size_t>(N * V) || cache.gate.empty() ||
        cache.gate[0].size() != static_cast<size_t>(N * F)) {
        resize_cache(cache, cfg, B, T);
    }

    for (int64_t i = 0; i < N; ++i) {
        std::memcpy(cache.x[0].data() + i * D,
                    params.embed.data() + static_cast<int64_t>(batch.tokens[static_cast<size_t>(i)]) * D,
                    static_cast<size_t>(D) * sizeof(Real));
    }

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = params.layers[static_cast<size_t>(l)];
        const auto li = static_cast<size_t>(l);
        const std::vector<Real>& xin = cache.x[li];

        rmsnorm_forward(xin.data(), lw.input_norm.data(), cache.a1[li].data(),
                        cache.inv_rms1[li].data(), N, D);

        std::fill(cache.q_rot[li].begin(), cache.q_rot[li].end(), Real(0));
        std::fill(cache.k_rot[li].begin(), cache.k_rot[li].end(), Real(0));
        std::fill(cache.v_rows[li].begin(), cache.v_rows[li].end(), Real(0));
        gemm_nt<Real, Real>(cache.a1[li].data(), lw.q_proj.data(), cache.q_rot[li].data(), N, D, D);
        gemm_nt<Real, Real>(cache.a1[li].data(), lw.k_proj.data(), cache.k_rot[li].data(), N, D, D);
        gemm_nt<Real, Real>(cache.a1[li].data(), lw.v_proj.data(), cache.v_rows[li].data(), N, D, D);

        const int64_t pairs = hd / 2;
        for (int64_t i = 0; i < N; ++i) {
            const int64_t t = i % T;
            apply_rope(cache.q_rot[li].data() + i * D, H, hd,
                       cache.rope_cos.data() + t * pairs, cache.rope_sin.data() + t * pairs, +1);
            apply_rope(cache.k_rot[li].data() + i * D, H, hd,
                       cache.rope_cos.data() + t * pairs, cache.rope_sin.data() + t * pairs, +1);
        }

        std::fill(cache.attn_cat[li].begin(), cache.attn_cat[li].end(), Real(0));
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                gather_head(cache.q_rot[li], cache.qh.data(), b, h, T, D, hd);
                gather_head(cache.k_rot[li], cache.kh.data(), b, h, T, D, hd);
                gather_head(cache.v_rows[li], cache.vh.data(), b, h, T, D, hd);

                std::fill(cache.stt.begin(), cache.stt.end(), Real(0));
                gemm_nt<Real, Real>(cache.qh.data(), cache.kh.data(), cache.stt.data(), T, hd, T);

                Real* probs = cache.probs[li].data() + ((b * H + h) * T) * T;
                for (int64_t t = 0; t < T; ++t) {
                    const Real* srow = cache.stt.data() + t * T;
                    Real* prow = probs + t * T;
                    double mx = -1e300;
                    for (int64_t j = 0; j <= t; ++j) {
                        const double s = static_cast<double>(srow[j]) * static_cast<double>(scale);
                        if (s > mx) mx = s;
                    }
                    double sum = 0.0;
                    for (int64_t j = 0; j <= t; ++j) {
                        const double e = std::exp(static_cast<double>(srow[j]) *
                                                      static_cast<double>(scale) -
                                                  mx);
                        prow[j] = static_cast<Real>(e);
                        sum += e;
                    }
                    const Real inv = static_cast<Real>(1.0 / sum);
                    for (int64_t j = 0; j <= t; ++j) prow[j] *= inv;
                    for (int64_t j = t + 1; j < T; ++j) prow[j] = Real(0);
                }

                std::fill(cache.oh.begin(), cache.oh.end(), Real(0));
                gemm_nn<Real, Real>(probs, cache.vh.data(), cache.oh.data(), T, T, hd);
                for (int64_t t = 0; t < T; ++t) {
                    std::memcpy(cache.attn_cat[li].data() + (b * T + t) * D + h * hd,
                                cache.oh.data() + t * hd, static_cast<size_t>(hd) * sizeof(Real));
                }
            }
        }

        // x_mid = x + attn_cat * Wo^T
        std::vector<Real>& xmid = cache.x_mid[li];
        std::memcpy(xmid.data(), xin.data(), static_cast<size_t>(N * D) * sizeof(Real));
        gemm_nt<Real, Real>(cache.attn_cat[li].data(), lw.o_proj.data(), xmid.data(), N, D, D);

        rmsnorm_forward(xmid.data(), lw.post_attn_norm.data(), cache.a2[li].data(),
                        cache.inv_rms2[li].data(), N, D);

        std::fill(cache.gate[li].begin(), cache.gate[li].end(), Real(0));
        std::fill(cache.up[li].begin(), cache.up[li].end(), Real(0));
        gemm_nt<Real, Real>(cache.a2[li].data(), lw.gate_proj.data(), cache.gate[li].data(), N, D, F);
        gemm_nt<Real, Real>(cache.a2[li].data(), lw.up_proj.data(), cache.up[li].data(), N, D, F);

        for (int64_t i = 0; i < N * F; ++i) {
            cache.m_buf[static_cast<size_t>(i)] =
                silu(cache.gate[li][static_cast<size_t>(i)]) * cache.up[li][static_cast<size_t>(i)];
        }

        // x_next = x_mid + m * Wd^T
        std::vector<Real>& xnext = cache.x[li + 1];
        std::memcpy(xnext.data(), xmid.data(), static_cast<size_t>(N * D) * sizeof(Real));
        gemm_nt<Real, Real>(cache.m_buf.data(), lw.down_proj.data(), xnext.data(), N, F, D);
    }

    rmsnorm_forward(cache.x[static_cast<size_t>(cfg.n_layers)].data(), params.final_norm.data(),
                    cache.a_final.data(), cache.inv_rms_final.data(), N, D);
    std::fill(cache.logits.begin(), cache.logits.end(), Real(0));
    gemm_nt<Real, Real>(cache.a_final.data(), params.lm_head.data(), cache.logits.data(), N, D, V);
}

template <typename Real>
double loss_from_logits(const std::vector<Real>& logits, const TokenBatch& batch, int64_t vocab) {
    const int64_t B = batch.batch, T = batch.seq;
    const int64_t M = batch.predicted_tokens();
    if (M <= 0) throw ArgumentError("loss_from_logits: no predicted positions");
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t len = batch.length(b);
        for (int64_t t = 0; t + 1 < len; ++t) {
            const Real* row = logits.data() + (b * T + t) * vocab;
            const int32_t target = batch.tokens[static_cast<size_t>(b * T + t + 1)];
            double mx = -1e300;
            for (int64_t v = 0; v < vocab; ++v) {
                if (static_cast<double>(row[v]) > mx) mx = static_cast<double>(row[v]);
            }
            double sum = 0.0;
            for (int64_t v = 0; v < vocab; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
            total += mx + std::log(sum) - static_cast<double>(row[target]);
        }
    }
    return total / static_cast<double>(M);
}

template <typename Real>
double loss_and_backward(const ModelParams<Real>& params, const TokenBatch& batch,
                         ForwardCache<Real>& cache, ModelParams<Real>& grads) {
    forward(params, batch, cache);

    const ModelConfig& cfg = params.config;
    const int64_t B = batch.batch, T = batch.seq;
    const int64_t D = cfg.d_model, F = cfg.d_ff, V = cfg.vocab_size, H = cfg.n_heads;
    const int64_t hd = D / H;
    const int64_t N = B * T;
    const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(hd)));
    const int64_t M = batch.predicted_tokens();
    if (M <= 0) throw ArgumentError("loss_and_backward: no predicted positions");

    // dlogits = (softmax - onehot) / M on predicted rows, 0 elsewhere.
    std::fill(cache.d_logits.begin(), cache.d_logits.end(), Real(0));
    double total = 0.0;
    const double invM = 1.0 / static_cast<double>(M);
    for (int64_t b = 0; b < B; ++b) {
        const int64_t len = batch.length(b);
        for (int64_t t = 0; t + 1 < len; ++t) {
            const int64_t row_idx = b * T + t;
            const Real* row = cache.logits.data() + row_idx * V;
            Real* drow = cache.d_logits.data() + row_idx * V;
            const int32_t target = batch.tokens[static_cast<size_t>(row_idx + 1)];
            double mx = -1e300;
            for (int64_t v = 0; v < V; ++v) {
                if (static_cast<double>(row[v]) > mx) mx = static_cast<double>(row[v]);
            }
            double sum = 0.0;
            for (int64_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
            total += mx + std::log(sum) - static_cast<double>(row[target]);
            const double inv_sum = 1.0 / sum;
            for (int64_t v = 0; v < V; ++v) {
                const double p = std::exp(static_cast<double>(row[v]) - mx) * inv_sum;
                drow[v] = static_cast<Real>((p - (v == target ? 1.0 : 0.0)) * invM);
            }
        }
    }
    const double loss = total * invM;

    // lm_head and final norm.
    gemm_tn_acc<Real, Real>(cache.d_logits.data(), cache.a_final.data(), grads.lm_head.data(), N,
                            V, D);
    std::fill(cache.d_a1.begin(), cache.d_a1.end(), Real(0));  // borrow as d_a_final
    gemm_nn<Real, Real>(cache.d_logits.data(), params.lm_head.data(), cache.d_a1.data(), N, V, D);
    std::fill(cache.dx.begin(), cache.dx.end(), Real(0));
    rmsnorm_backward(cache.x[static_cast<size_t>(cfg.n_layers)].data(),
                     cache.inv_rms_final.data(), params.final_norm.data(), cache.d_a1.data(),
                     cache.dx.data(), grads.final_norm.data(), N, D);

    for (int64_t l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lw = params.layers[static_cast<size_t>(l)];
        auto& gw = grads.layers[static_cast<size_t>(l)];
        const auto li = static_cast<size_t>(l);

        // ---- MLP half: dx currently holds d(x_next). Residual passes it
        // through; the MLP branch adds its contribution via rmsnorm.
        for (int64_t i = 0; i < N * F; ++i) {
            cache.m_buf[static_cast<size_t>(i)] =
                silu(cache.gate[li][static_cast<size_t>(i)]) * cache.up[li][static_cast<size_t>(i)];
        }
        gemm_tn_acc<Real, Real>(cache.dx.data(), cache.m_buf.data(), gw.down_proj.data(), N, D, F);
        std::fill(cache.d_m.begin(), cache.d_m.end(), Real(0));
        gemm_nn<Real, Real>(cache.dx.data(), lw.down_proj.data(), cache.d_m.data(), N, D, F);
        for (int64_t i = 0; i < N * F; ++i) {
            const Real g = cache.gate[li][static_cast<size_t>(i)];
            const Real u = cache.up[li][static_cast<size_t>(i)];
            const Real dm = cache.d_m[static_cast<size_t>(i)];
            cache.d_up[static_cast<size_t>(i)] = dm * silu(g);
            cache.d_gate[static_cast<size_t>(i)] = dm * u * silu_grad(g);
        }
        gemm_tn_acc<Real, Real>(cache.d_up.data(), cache.a2[li].data(), gw.up_proj.data(), N, F, D);
        gemm_tn_acc<Real, Real>(cache.d_gate.data(), cache.a2[li].data(), gw.gate_proj.data(), N,
                                F, D);
        std::fill(cache.d_a2.begin(), cache.d_a2.end(), Real(0));
        gemm_nn<Real, Real>(cache.d_up.data(), lw.up_proj.data(), cache.d_a2.data(), N, F, D);
        gemm_nn<Real, Real>(cache.d_gate.data(), lw.gate_proj.data(), cache.d_a2.data(), N, F, D);
        rmsnorm_backward(cache.x_mid[li].data(), cache.inv_rms2[li].data(),
                         lw.post_attn_norm.data(), cache.d_a2.data(), cache.dx.data(),
                         gw.post_attn_norm.data(), N, D);
        // dx now holds d(x_mid).

        // ---- Attention half.
        gemm_tn_acc<Real, Real>(cache.dx.data(), cache.attn_cat[li].data(), gw.o_proj.data(), N, D,
                                D);
        std::fill(cache.d_attn_cat.begin(), cache.d_attn_cat.end(), Real(0));
        gemm_nn<Real, Real>(cache.dx.data(), lw.o_proj.data(), cache.d_attn_cat.data(), N, D, D);

        std::fill(cache.d_q.begin(), cache.d_q.end(), Real(0));
        std::fill(cache.d_k.begin(), cache.d_k.end(), Real(0));
        std::fill(cache.d_v.begin(), cache.d_v.end(), Real(0));
        const int64_t pairs = hd / 2;
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < H; ++h) {
                gather_head(cache.q_rot[li], cache.qh.data(), b, h, T, D, hd);
                gather_head(cache.k_rot[li], cache.kh.data(), b, h, T, D, hd);
                gather_head(cache.v_rows[li], cache.vh.data(), b, h, T, D, hd);
                gather_head(cache.d_attn_cat, cache.doh.data(), b, h, T, D, hd);
                const Real* probs = cache.probs[li].data() + ((b * H + h) * T) * T;

                // dP then softmax backward into stt (scaled).
                std::fill(cache.stt.begin(), cache.stt.end(), Real(0));
                gemm_nt<Real, Real>(cache.doh.data(), cache.vh.data(), cache.stt.data(), T, hd, T);
                std::fill(cache.dvh.begin(), cache.dvh.end(), Real(0));
                gemm_tn_acc<Real, Real>(probs, cache.doh.data(), cache.dvh.data(), T, T, hd);

                for (int64_t t = 0; t < T; ++t) {
                    Real* dsrow = cache.stt.data() + t * T;
                    const Real* prow = probs + t * T;
                    double dot = 0.0;
                    for (int64_t j = 0; j <= t; ++j) {
                        dot += static_cast<double>(dsrow[j]) * static_cast<double>(prow[j]);
                    }
                    for (int64_t j = 0; j <= t; ++j) {
                        dsrow[j] = static_cast<Real>(
                            (static_cast<double>(dsrow[j]) - dot) *
                            static_cast<double>(prow[j]) * static_cast<double>(scale));
                    }
                    for (int64_t j = t + 1; j < T; ++j) dsrow[j] = Real(0);
                }

                std::fill(cache.dqh.begin(), cache.dqh.end(), Real(0));
                gemm_nn<Real, Real>(cache.stt.data(), cache.kh.data(), cache.dqh.data(), T, T, hd);
                std::fill(cache.dkh.begin(), cache.dkh.end(), Real(0));
                gemm_tn_acc<Real, Real>(cache.stt.data(), cache.qh.data(), cache.dkh.data(), T, T,
                                        hd);

                for (int64_t t = 0; t < T; ++t) {
                    apply_rope(cache.dqh.data() + t * hd, 1, hd, cache.rope_cos.data() + t * pairs,
                               cache.rope_sin.data() + t * pairs, -1);
                    apply_rope(cache.dkh.data() + t * hd, 1, hd, cache.rope_cos.data() + t * pairs,
                               cache.rope_sin.data() + t * pairs, -1);
                }
                scatter_head_add(cache.dqh.data(), cache.d_q, b, h, T, D, hd);
                scatter_head_add(cache.dkh.data(), cache.d_k, b, h, T, D, hd);
                scatter_head_add(cache.dvh.data(), cache.d_v, b, h, T, D, hd);
            }
        }

        gemm_tn_acc<Real, Real>(cache.d_q.data(), cache.a1[li].data(), gw.q_proj.data(), N, D, D);
        gemm_tn_acc<Real, Real>(cache.d_k.data(), cache.a1[li].data(), gw.k_proj.data(), N, D, D);
        gemm_tn_acc<Real, Real>(cache.d_v.data(), cache.a1[li].data(), gw.v_proj.data(), N, D, D);

        std::fill(cache.d_a1.begin(), cache.d_a1.end(), Real(0));
        gemm_nn<Real, Real>(cache.d_q.data(), lw.q_proj.data(), cache.d_a1.data(), N, D, D);
        gemm_nn<Real, Real>(cache.d_k.data(), lw.k_proj.data(), cache.d_a1.data(), N, D, D);
        gemm_nn<Real, Real>(cache.d_v.data(), lw.v_proj.data(), cache.d_a1.data(), N, D, D);
        rmsnorm_backward(cache.x[li].data(), cache.inv_rms1[li].data(), lw.input_norm.data(),
                         cache.d_a1.data(), cache.dx.data(), gw.input_norm.data(), N, D);
        // dx now holds d(x_in) for this layer.
    }

    for (int64_t i = 0; i < N; ++i) {
        const int64_t tok = batch.tokens[static_cast<size_t>(i)];
        Real* dst = grads.embed.data() + tok * D;
        const Real* src = cache.dx.data() + i * D;
        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
    }
    return loss;
}

Tensor forward_logits(const TransformerCheckpoint& model, const TokenBatch& batch) {
    auto params = ModelParams<float>::from_checkpoint(model);
    ForwardCache<float> cache;
    forward(params, batch, cache);
    Tensor out({batch.batch, batch.seq, model.config.vocab_size});
    std::memcpy(out.data(), cache.logits.data(), cache.logits.size() * sizeof(float));
    if (!out.all_finite()) throw NumericError("forward_logits produced non-finite values");
    return out;
}

double lm_loss(const Tensor& logits, const TokenBatch& batch) {
    if (logits.rank() != 3 || logits.dim(0) != batch.batch || logits.dim(1) != batch.seq) {
        throw DimensionError("lm_loss: logits shape does not match batch");
    }
    const int64_t vocab = logits.dim(2);
    std::vector<float> flat(logits.data(), logits.data() + logits.numel());
    return loss_from_logits(flat, batch, vocab);
}

double perplexity(const TransformerCheckpoint& model,
                  const std::vector<std::vector<int32_t>>& eval_set) {
    if (eval_set.empty()) throw ArgumentError("perplexity: empty eval set");
    auto params = ModelParams<float>::from_checkpoint(model);
    ForwardCache<float> cache;

    constexpr int64_t kGroup = 8;
    double total_ce = 0.0;
    int64_t total_tokens = 0;
    for (size_t start = 0; start < eval_set.size(); start += kGroup) {
        const size_t end = std::min(eval_set.size(), start + kGroup);
        int64_t maxlen = 0;
        for (size_t i = start; i < end; ++i) {
            maxlen = std::max<int64_t>(maxlen, static_cast<int64_t>(eval_set[i].size()));
        }
        if (maxlen < 2) continue;  // nothing to predict
        TokenBatch b;
        b.batch = static_cast<int64_t>(end - start);
        b.seq = maxlen;
        b.tokens.assign(static_cast<size_t>(b.batch * b.seq), 0);
        b.lengths.resize(static_cast<size_t>(b.batch));
        for (size_t i = start; i < end; ++i) {
            const auto& s = eval_set[i];
            const size_t row = i - start;
            b.lengths[row] = static_cast<int64_t>(s.size());
            std::copy(s.begin(), s.end(), b.tokens.begin() + static_cast<int64_t>(row) * b.seq);
        }
        forward(params, b, cache);
        const int64_t m = b.predicted_tokens();
        total_ce += loss_from_logits(cache.logits, b, model.config.vocab_size) *
                    static_cast<double>(m);
        total_tokens += m;
    }
    if (total_tokens == 0) throw ArgumentError("perplexity: eval set has no predictable tokens");
    return std::exp(total_ce / static_cast<double>(total_tokens));
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template struct ForwardCache<float>;
template struct ForwardCache<double>;
template void forward<float>(const ModelParams<float>&, const TokenBatch&, ForwardCache<float>&);
template void forward<double>(const ModelParams<double>&, const TokenBatch&,
                              ForwardCache<double>&);
template double loss_from_logits<float>(const std::vector<float>&, const TokenBatch&, int64_t);
template double loss_from_logits<double>(const std::vector<double>&, const TokenBatch&, int64_t);
template double loss_and_backward<float>(const ModelParams<float>&, const TokenBatch&,
                                         ForwardCache<float>&, ModelParams<float>&);
template double loss_and_backward<double>(const ModelParams<double>&, const TokenBatch&,
                                          ForwardCache<double>&, ModelParams<double>&);

}  // namespace layerforge::lm
