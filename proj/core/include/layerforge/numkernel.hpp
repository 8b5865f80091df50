#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "layerforge/rng.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge::numkernel {

/// C = A[m,k] * B[k,n]. Accumulates each output element in float64 along
/// increasing k, then rounds once to float32, so results are bit-stable
/// regardless of the thread cap.
Tensor matmul(const Tensor& a, const Tensor& b);

/// C = A[m,k] * B[n,k]^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// C = A[k,m]^T * B[k,n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);

struct SvdResult {
    Tensor u;                  // [d1, r], orthonormal columns
    std::vector<float> sigma;  // [r], descending, >= 0
    Tensor vt;                 // [r, m], orthonormal rows
};

/// Thin SVD, r = min(d1, m), by one-sided Jacobi in float64.
///
/// Sign convention: each row of vt is flipped (with its matching u column)
/// so the entry of largest magnitude is positive; ties break toward the
/// lowest index. Rows belonging to singular values at roundoff scale are
/// replaced by a deterministic orthonormal completion so vt always has
/// orthonormal rows. Throws ConvergenceError after 60 sweeps without
/// reaching the rotation threshold, NumericError on non-finite input.
SvdResult svd_thin(const Tensor& w);

struct AdamWState {
    Tensor first_moment;
    Tensor second_moment;
    int64_t step_count = 0;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

AdamWState make_adamw_state(const std::vector<int64_t>& shape);

/// Bias-corrected decoupled-weight-decay update:
///   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2;  t <- t+1
///   p <- p - lr*wd*p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
/// Per-element math in float64, state and parameters stored float32.
void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWConfig& cfg);

/// Span form used by the training loops (same math, no Tensor wrapper).
void adamw_step_span(std::span<float> param, std::span<const float> grad,
                     std::span<float> m, std::span<float> v, int64_t step_count,
                     const AdamWConfig& cfg);

/// Frobenius norm with float64 accumulation.
double frobenius_norm(const Tensor& t);

}  // namespace layerforge::numkernel
