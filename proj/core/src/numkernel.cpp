#include "layerforge/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "layerforge/parallel.hpp"
#include "gemm_kernels.hpp"

namespace layerforge::numkernel {

namespace {

void require_matrix(const Tensor& t, const char* name) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(name) + " must be 2-D, got shape " +
                             shape_string(t.shape()));
    }
}

void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite values in ") + what);
    }
}

Tensor round_to_f32(const std::vector<double>& acc, std::vector<int64_t> shape) {
    Tensor out(std::move(shape));
    float* p = out.data();
    for (size_t i = 0; i < acc.size(); ++i) p[i] = static_cast<float>(acc[i]);
    return out;
}

// Fixed-order lane-blocked double dot product (deterministic, vectorizable).
double dot_lanes(const double* a, const double* b, int64_t n) {
    constexpr int L = detail::kDotLanes;
    double lanes[L] = {};
    int64_t i = 0;
    for (; i + L <= n; i += L) {
        for (int l = 0; l < L; ++l) lanes[l] += a[i + l] * b[i + l];
    }
    for (int l = 0; i + l < n; ++l) lanes[l] += a[i + l] * b[i + l];
    double s = 0;
    for (int l = 0; l < L; ++l) s += lanes[l];
    return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()));
    }
    std::vector<double> acc(static_cast<size_t>(m * n), 0.0);
    parallel_for(m, [&](int64_t begin, int64_t end) {
        detail::gemm_nn<float, double>(a.data() + begin * k, b.data(), acc.data() + begin * n,
                                       end - begin, k, n);
    });
    Tensor out = round_to_f32(acc, {m, n});
    require_finite(out, "matmul result");
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt lhs");
    require_matrix(b, "matmul_nt rhs");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt inner dimensions disagree: " + shape_string(a.shape()) +
                             " x " + shape_string(b.shape()) + "^T");
    }
    std::vector<double> acc(static_cast<size_t>(m * n), 0.0);
    parallel_for(m, [&](int64_t begin, int64_t end) {
        detail::gemm_nt<float, double>(a.data() + begin * k, b.data(), acc.data() + begin * n,
                                       end - begin, k, n);
    });
    Tensor out = round_to_f32(acc, {m, n});
    require_finite(out, "matmul_nt result");
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn lhs");
    require_matrix(b, "matmul_tn rhs");
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul_tn inner dimensions disagree: " + shape_string(a.shape()) +
                             "^T x " + shape_string(b.shape()));
    }
    std::vector<double> acc(static_cast<size_t>(m * n), 0.0);
    // Parallel over output rows; every element still sums k in increasing order.
    parallel_for(m, [&](int64_t begin, int64_t end) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const float* arow = a.data() + kk * m;
            const float* brow = b.data() + kk * n;
            for (int64_t i = begin; i < end; ++i) {
                const double av = static_cast<double>(arow[i]);
                double* crow = acc.data() + i * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(brow[j]);
            }
        }
    });
    Tensor out = round_to_f32(acc, {m, n});
    require_finite(out, "matmul_tn result");
    return out;
}

namespace {

constexpr int kMaxJacobiSweeps = 60;
constexpr double kJacobiTol = 1e-12;

// One-sided Jacobi on a tall matrix held column-major: orthogonalizes the
// columns of A (rows x cols, rows >= cols) by plane rotations, accumulating
// them into P (cols x cols, column-major, initialized to identity).
// Columns whose norm falls to roundoff scale are excluded from further
// rotations; rank-deficient inputs would otherwise never converge.
void jacobi_orthogonalize(std::vector<double>& a, std::vector<double>& p,
                          int64_t rows, int64_t cols) {
    double sumsq = 0.0;
    for (const double v : a) sumsq += v * v;
    const double dead_norm2 =
        sumsq * static_cast<double>(std::max(rows, cols)) * 1e-28;  // ~ (eps * ||A||_F)^2

    for (int sweep = 0; sweep < kMaxJacobiSweeps; ++sweep) {
        bool rotated = false;
        for (int64_t i = 0; i < cols - 1; ++i) {
            double* ci = a.data() + i * rows;
            for (int64_t j = i + 1; j < cols; ++j) {
                double* cj = a.data() + j * rows;
                const double alpha = dot_lanes(ci, ci, rows);
                const double beta = dot_lanes(cj, cj, rows);
                const double gamma = dot_lanes(ci, cj, rows);
                if (alpha <= dead_norm2 || beta <= dead_norm2) continue;
                if (std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int64_t r = 0; r < rows; ++r) {
                    const double vi = ci[r], vj = cj[r];
                    ci[r] = c * vi - s * vj;
                    cj[r] = s * vi + c * vj;
                }
                double* pi = p.data() + i * cols;
                double* pj = p.data() + j * cols;
                for (int64_t r = 0; r < cols; ++r) {
                    const double vi = pi[r], vj = pj[r];
                    pi[r] = c * vi - s * vj;
                    pj[r] = s * vi + c * vj;
                }
            }
        }
        if (!rotated) return;
    }
    throw ConvergenceError("svd_thin: Jacobi sweeps did not converge within " +
                           std::to_string(kMaxJacobiSweeps) + " sweeps");
}

// Replace columns of q (column-major, rows x cols) listed in `dead` by a
// deterministic orthonormal completion: for each dead column in index
// order, pick the coordinate axis whose residual against all live columns
// is largest (ties toward the lowest axis index), orthogonalize, normalize.
void complete_orthonormal(std::vector<double>& q, int64_t rows, int64_t cols,
                          const std::vector<int64_t>& dead) {
    std::vector<int64_t> live;
    for (int64_t c = 0; c < cols; ++c) {
        if (std::find(dead.begin(), dead.end(), c) == dead.end()) live.push_back(c);
    }
    std::vector<double> cand(static_cast<size_t>(rows));
    std::vector<double> best(static_cast<size_t>(rows));
    for (int64_t d : dead) {
        double best_norm2 = -1.0;
        for (int64_t axis = 0; axis < rows; ++axis) {
            std::fill(cand.begin(), cand.end(), 0.0);
            cand[static_cast<size_t>(axis)] = 1.0;
            for (int64_t lc : live) {
                const double* col = q.data() + lc * rows;
                const double proj = dot_lanes(cand.data(), col, rows);
                for (int64_t r = 0; r < rows; ++r) cand[r] -= proj * col[r];
            }
            const double n2 = dot_lanes(cand.data(), cand.data(), rows);
            if (n2 > best_norm2 + 1e-12) {
                best_norm2 = n2;
                best = cand;
            }
            if (best_norm2 > 0.49) break;  // good enough, keep lowest such axis
        }
        const double inv = 1.0 / std::sqrt(best_norm2);
        double* col = q.data() + d * rows;
        for (int64_t r = 0; r < rows; ++r) col[r] = best[r] * inv;
        live.push_back(d);
    }
}

}  // namespace

SvdResult svd_thin(const Tensor& w) {
    require_matrix(w, "svd_thin input");
    require_finite(w, "svd_thin input");
    const int64_t d1 = w.dim(0), m = w.dim(1);
    const int64_t r = std::min(d1, m);

    // Factor the tall orientation A (rows x cols, rows >= cols) as
    // A = Q diag(sigma) P^T with Q's columns orthonormal after completion.
    //   d1 <= m: A = W^T  => W = P diag(sigma) Q^T  => u = P,  vt = Q^T
    //   d1 >  m: A = W    => W = Q diag(sigma) P^T  => u = Q,  vt = P^T
    const bool transposed = (d1 <= m);
    const int64_t rows = transposed ? m : d1;
    const int64_t cols = r;

    std::vector<double> a(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < d1; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            const double v = static_cast<double>(w.data()[i * m + j]);
            if (transposed) {
                a[static_cast<size_t>(i) * rows + j] = v;  // column i holds W row i
            } else {
                a[static_cast<size_t>(j) * rows + i] = v;  // column j holds W column j
            }
        }
    }
    std::vector<double> p(static_cast<size_t>(cols * cols), 0.0);
    for (int64_t i = 0; i < cols; ++i) p[static_cast<size_t>(i) * cols + i] = 1.0;

    jacobi_orthogonalize(a, p, rows, cols);

    std::vector<double> sigma(static_cast<size_t>(cols));
    for (int64_t j = 0; j < cols; ++j) {
        sigma[static_cast<size_t>(j)] = std::sqrt(dot_lanes(a.data() + j * rows, a.data() + j * rows, rows));
    }

    std::vector<int64_t> order(static_cast<size_t>(cols));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        if (sigma[static_cast<size_t>(x)] != sigma[static_cast<size_t>(y)]) {
            return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
        }
        return x < y;
    });

    // Reorder, normalize Q columns, remember which are numerically zero.
    // The cutoff dominates the dead-column threshold used inside the sweep
    // so no un-orthogonalized column slips through as "nonzero".
    double sig_max = 0.0, sig_sumsq = 0.0;
    for (double s : sigma) {
        sig_max = std::max(sig_max, s);
        sig_sumsq += s * s;
    }
    const double maxdim = static_cast<double>(std::max(rows, cols));
    const double cutoff = std::max(sig_max * maxdim * 1e-15,
                                   2e-14 * std::sqrt(sig_sumsq * maxdim));

    std::vector<double> q_sorted(static_cast<size_t>(rows * cols));
    std::vector<double> p_sorted(static_cast<size_t>(cols * cols));
    std::vector<double> sig_sorted(static_cast<size_t>(cols));
    std::vector<int64_t> dead;
    for (int64_t jj = 0; jj < cols; ++jj) {
        const int64_t src = order[static_cast<size_t>(jj)];
        const double s = sigma[static_cast<size_t>(src)];
        sig_sorted[static_cast<size_t>(jj)] = s;
        std::copy_n(p.data() + src * cols, cols, p_sorted.data() + jj * cols);
        if (s > cutoff) {
            const double inv = 1.0 / s;
            const double* colsrc = a.data() + src * rows;
            double* coldst = q_sorted.data() + jj * rows;
            for (int64_t rr = 0; rr < rows; ++rr) coldst[rr] = colsrc[rr] * inv;
        } else {
            sig_sorted[static_cast<size_t>(jj)] = 0.0;
            dead.push_back(jj);
        }
    }
    if (!dead.empty()) complete_orthonormal(q_sorted, rows, cols, dead);

    // Sign convention keyed on vt rows: row j of vt is Q column j when
    // transposed, else P column j.
    std::vector<double>& vtcols = transposed ? q_sorted : p_sorted;
    std::vector<double>& ucols = transposed ? p_sorted : q_sorted;
    const int64_t vt_len = transposed ? rows : cols;  // == m
    const int64_t u_len = transposed ? cols : rows;   // == d1
    for (int64_t j = 0; j < cols; ++j) {
        double* vtc = vtcols.data() + j * vt_len;
        int64_t arg = 0;
        double mag = std::abs(vtc[0]);
        for (int64_t i = 1; i < vt_len; ++i) {
            const double v = std::abs(vtc[i]);
            if (v > mag) {
                mag = v;
                arg = i;
            }
        }
        if (vtc[arg] < 0.0) {
            for (int64_t i = 0; i < vt_len; ++i) vtc[i] = -vtc[i];
            double* uc = ucols.data() + j * u_len;
            for (int64_t i = 0; i < u_len; ++i) uc[i] = -uc[i];
        }
    }

    SvdResult out;
    out.sigma.resize(static_cast<size_t>(r));
    for (int64_t j = 0; j < r; ++j) out.sigma[static_cast<size_t>(j)] = static_cast<float>(sig_sorted[static_cast<size_t>(j)]);
    out.u = Tensor({d1, r});
    for (int64_t i = 0; i < d1; ++i) {
        for (int64_t j = 0; j < r; ++j) {
            out.u.at(i, j) = static_cast<float>(ucols[static_cast<size_t>(j) * u_len + i]);
        }
    }
    out.vt = Tensor({r, m});
    for (int64_t j = 0; j < r; ++j) {
        const double* col = vtcols.data() + j * vt_len;
        for (int64_t i = 0; i < m; ++i) {
            out.vt.at(j, i) = static_cast<float>(col[i]);
        }
    }
    return out;
}

AdamWState make_adamw_state(const std::vector<int64_t>& shape) {
    AdamWState s;
    s.first_moment = Tensor(shape);
    s.second_moment = Tensor(shape);
    s.step_count = 0;
    return s;
}

void adamw_step_span(std::span<float> param, std::span<const float> grad,
                     std::span<float> m, std::span<float> v, int64_t step_count,
                     const AdamWConfig& cfg) {
    const int64_t t = step_count + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const size_t n = param.size();
    for (size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grad[i]);
        const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        const double p = static_cast<double>(param[i]);
        param[i] = static_cast<float>(p - cfg.lr * cfg.weight_decay * p -
                                      cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
}

void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state, const AdamWConfig& cfg) {
    if (!param.same_shape(grad) || !param.same_shape(state.first_moment) ||
        !param.same_shape(state.second_moment)) {
        throw DimensionError("adamw_step: parameter/gradient/state shapes disagree");
    }
    require_finite(grad, "adamw_step gradient");
    adamw_step_span(param.values(), grad.values(), state.first_moment.values(),
                    state.second_moment.values(), state.step_count, cfg);
    state.step_count += 1;
}

double frobenius_norm(const Tensor& t) {
    constexpr int L = detail::kDotLanes;
    double lanes[L] = {};
    const float* p = t.data();
    const int64_t n = t.numel();
    int64_t i = 0;
    for (; i + L <= n; i += L) {
        for (int l = 0; l < L; ++l) {
            const double v = static_cast<double>(p[i + l]);
            lanes[l] += v * v;
        }
    }
    for (int l = 0; i + l < n; ++l) {
        const double v = static_cast<double>(p[i + l]);
        lanes[l] += v * v;
    }
    double s = 0;
    for (int l = 0; l < L; ++l) s += lanes[l];
    return std::sqrt(s);
}

}  // namespace layerforge::numkernel
