#pragma once

// Shared test helpers: independent numeric oracles, temp dirs, tiny model
// builders. Oracles here never call the library code paths they check.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/tensor.hpp"

namespace testsupport {

inline std::filesystem::path fresh_tmp_dir(const std::string& tag) {
    static uint64_t counter = 0;
    auto dir = std::filesystem::temp_directory_path() /
               ("layerforge_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
    std::filesystem::create_directories(dir);
    return dir;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Naive triple-loop matrix product in float64 (oracle for matmul).
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int64_t m, int64_t k, int64_t n) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t kk = 0; kk < k; ++kk) {
                s += a[static_cast<size_t>(i * k + kk)] * b[static_cast<size_t>(kk * n + j)];
            }
            c[static_cast<size_t>(i * n + j)] = s;
        }
    }
    return c;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix (oracle for the
// SVD cross-check and the PCA covariance check). Returns eigenvalues in
// descending order with matching eigenvector columns.
inline void jacobi_eigh(std::vector<double> a, int64_t n, std::vector<double>& eigvals,
                        std::vector<double>& eigvecs) {
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = i + 1; j < n; ++j) {
                off += std::abs(a[static_cast<size_t>(i * n + j)]);
            }
        }
        if (off < 1e-13) break;
        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p * n + q)];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p * n + p)];
                const double aqq = a[static_cast<size_t>(q * n + q)];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k * n + p)];
                    const double akq = a[static_cast<size_t>(k * n + q)];
                    a[static_cast<size_t>(k * n + p)] = c * akp - s * akq;
                    a[static_cast<size_t>(k * n + q)] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p * n + k)];
                    const double aqk = a[static_cast<size_t>(q * n + k)];
                    a[static_cast<size_t>(p * n + k)] = c * apk - s * aqk;
                    a[static_cast<size_t>(q * n + k)] = s * apk + c * aqk;
                }
                for (int64_t k = 0; k < n; ++k) {
                    const double vkp = v[static_cast<size_t>(k * n + p)];
                    const double vkq = v[static_cast<size_t>(k * n + q)];
                    v[static_cast<size_t>(k * n + p)] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k * n + q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return a[static_cast<size_t>(x * n + x)] > a[static_cast<size_t>(y * n + y)];
    });
    eigvals.resize(static_cast<size_t>(n));
    eigvecs.assign(static_cast<size_t>(n * n), 0.0);
    for (int64_t c = 0; c < n; ++c) {
        const int64_t src = order[static_cast<size_t>(c)];
        eigvals[static_cast<size_t>(c)] = a[static_cast<size_t>(src * n + src)];
        for (int64_t r = 0; r < n; ++r) {
            eigvecs[static_cast<size_t>(r * n + c)] = v[static_cast<size_t>(r * n + src)];
        }
    }
}

inline layerforge::checkpoint::ModelConfig tiny_config(int64_t layers = 2, int64_t d_model = 8,
                                                       int64_t heads = 2, int64_t d_ff = 12,
                                                       int64_t vocab = 11, int64_t max_seq = 16) {
    layerforge::checkpoint::ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.d_ff = d_ff;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = max_seq;
    return cfg;
}

inline layerforge::Tensor random_tensor(layerforge::Rng& rng, std::vector<int64_t> shape,
                                        double std = 1.0) {
    return layerforge::rng_normal(rng, std::move(shape), 0.0, std);
}

}  // namespace testsupport
