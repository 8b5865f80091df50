#pragma once

// Internal GEMM kernels shared by numkernel and the LM math. Every variant
// ACCUMULATES into C (callers zero or preload it) and uses a fixed
// summation order so repeated runs are bit-identical:
//   axpy forms accumulate along k in increasing order;
//   dot forms accumulate into 16 interleaved partial sums (k mod 16), then
//   reduce the partials in index order.
// Acc is the accumulator type (double for the public numkernel contract,
// Real itself inside the templated LM/predictor paths).

#include <cstdint>

namespace layerforge::detail {

inline constexpr int kDotLanes = 16;

// C[m,n] += sum_k A[m,k] * B[k,n].
template <typename Real, typename Acc>
void gemm_nn(const Real* a, const Real* b, Acc* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        Acc* crow = c + i * n;
        const Real* arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const Acc av = static_cast<Acc>(arow[kk]);
            const Real* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * static_cast<Acc>(brow[j]);
            }
        }
    }
}

// C[m,n] += sum_k A[m,k] * B[n,k]  (B transposed; rows dotted with rows).
template <typename Real, typename Acc>
void gemm_nt_row(const Real* arow, const Real* b, Acc* crow, int64_t k, int64_t n) {
    for (int64_t j = 0; j < n; ++j) {
        const Real* brow = b + j * k;
        Acc lanes[kDotLanes] = {};
        int64_t kk = 0;
        for (; kk + kDotLanes <= k; kk += kDotLanes) {
            for (int l = 0; l < kDotLanes; ++l) {
                lanes[l] += static_cast<Acc>(arow[kk + l]) * static_cast<Acc>(brow[kk + l]);
            }
        }
        for (int l = 0; kk + l < k; ++l) {
            lanes[l] += static_cast<Acc>(arow[kk + l]) * static_cast<Acc>(brow[kk + l]);
        }
        Acc sum = 0;
        for (int l = 0; l < kDotLanes; ++l) sum += lanes[l];
        crow[j] += sum;
    }
}

template <typename Real, typename Acc>
void gemm_nt(const Real* a, const Real* b, Acc* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        gemm_nt_row<Real, Acc>(a + i * k, b, c + i * n, k, n);
    }
}

// C[m,n] += sum_k A[k,m] * B[k,n]  (A transposed). C is accumulated into,
// which is what weight-gradient calls want.
template <typename Real, typename Acc>
void gemm_tn_acc(const Real* a, const Real* b, Acc* c, int64_t k, int64_t m, int64_t n) {
    for (int64_t kk = 0; kk < k; ++kk) {
        const Real* arow = a + kk * m;
        const Real* brow = b + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const Acc av = static_cast<Acc>(arow[i]);
            Acc* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                crow[j] += av * static_cast<Acc>(brow[j]);
            }
        }
    }
}

}  // namespace layerforge::detail
