#include "layerforge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "layerforge/numkernel.hpp"
#include "layerforge/rng.hpp"

namespace layerforge::analysis {

std::vector<LayerSignature> layer_signatures(const SvdSpace& space) {
    std::vector<LayerSignature> sigs;
    sigs.reserve(static_cast<size_t>(space.n_layers));
    for (int64_t l = 0; l < space.n_layers; ++l) {
        LayerSignature s;
        s.layer_index = l;
        s.family = space.family;
        const Tensor& v = space.coeffs[static_cast<size_t>(l)];
        s.vec.assign(v.data(), v.data() + space.d2);  // row 0
        sigs.push_back(std::move(s));
    }
    return sigs;
}

std::vector<std::vector<double>> signature_rows(const std::vector<LayerSignature>& sigs) {
    std::vector<std::vector<double>> rows;
    rows.reserve(sigs.size());
    for (const auto& s : sigs) {
        rows.emplace_back(s.vec.begin(), s.vec.end());
    }
    return rows;
}

namespace {

void check_rows(const std::vector<std::vector<double>>& vectors, size_t min_count) {
    if (vectors.size() < min_count) {
        throw ArgumentError("need at least " + std::to_string(min_count) + " vectors, got " +
                            std::to_string(vectors.size()));
    }
    for (const auto& v : vectors) {
        if (v.size() != vectors.front().size()) {
            throw DimensionError("projection inputs must share one dimension");
        }
    }
}

std::vector<int64_t> default_ids(size_t n, const std::vector<int64_t>& ids) {
    if (!ids.empty()) {
        if (ids.size() != n) throw ArgumentError("ids size does not match vector count");
        return ids;
    }
    std::vector<int64_t> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<int64_t>(i);
    return out;
}

}  // namespace

Projection2D pca2d(const std::vector<std::vector<double>>& vectors,
                   const std::vector<int64_t>& ids_in) {
    check_rows(vectors, 3);
    const int64_t n = static_cast<int64_t>(vectors.size());
    const int64_t d = static_cast<int64_t>(vectors.front().size());
    auto ids = default_ids(vectors.size(), ids_in);

    // Centered data matrix -> thin SVD; scores are U * Sigma.
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (const auto& v : vectors) {
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
    }
    for (double& m : mean) m /= static_cast<double>(n);

    Tensor centered({n, d});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) {
            centered.at(i, j) = static_cast<float>(vectors[static_cast<size_t>(i)][static_cast<size_t>(j)] -
                                                   mean[static_cast<size_t>(j)]);
        }
    }
    numkernel::SvdResult svd = numkernel::svd_thin(centered);

    Projection2D proj;
    proj.method = Projection2D::Method::pca;
    const int64_t r = static_cast<int64_t>(svd.sigma.size());
    for (int64_t i = 0; i < n; ++i) {
        ProjectedPoint p;
        p.id = ids[static_cast<size_t>(i)];
        p.x = static_cast<double>(svd.u.at(i, 0)) * static_cast<double>(svd.sigma[0]);
        p.y = r > 1 ? static_cast<double>(svd.u.at(i, 1)) * static_cast<double>(svd.sigma[1]) : 0.0;
        proj.points.push_back(p);
    }
    return proj;
}

namespace {

// Squared Euclidean distance matrix.
std::vector<double> pairwise_sq(const std::vector<std::vector<double>>& x) {
    const size_t n = x.size();
    std::vector<double> d(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (size_t k = 0; k < x[i].size(); ++k) {
                const double diff = x[i][k] - x[j][k];
                s += diff * diff;
            }
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    return d;
}

// Row-stochastic conditional P with per-point bandwidth beta found by
// bisection so exp(H) matches the requested perplexity within 1e-4.
void gaussian_perplexity_rows(const std::vector<double>& dist, size_t n, double perplexity,
                              std::vector<double>& p) {
    const double target_h = std::log(perplexity);
    p.assign(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double beta = 1.0;
        double beta_lo = -1.0, beta_hi = -1.0;  // <0 marks unbounded
        double h = 0.0;
        for (int iter = 0; iter < 200; ++iter) {
            double sum = 0.0;
            for (size_t j = 0; j < n; ++j) {
                p[i * n + j] = j == i ? 0.0 : std::exp(-beta * dist[i * n + j]);
                sum += p[i * n + j];
            }
            double hsum = 0.0;
            for (size_t j = 0; j < n; ++j) {
                if (j != i) hsum += beta * dist[i * n + j] * p[i * n + j];
            }
            h = hsum / sum + std::log(sum);
            if (std::abs(std::exp(h) - perplexity) < 1e-4) break;
            if (h > target_h) {  // entropy too high -> sharpen
                beta_lo = beta;
                beta = beta_hi < 0.0 ? beta * 2.0 : (beta + beta_hi) / 2.0;
            } else {
                beta_hi = beta;
                beta = beta_lo < 0.0 ? beta / 2.0 : (beta + beta_lo) / 2.0;
            }
        }
        double sum = 0.0;
        for (size_t j = 0; j < n; ++j) sum += p[i * n + j];
        for (size_t j = 0; j < n; ++j) p[i * n + j] /= sum;
    }
}

}  // namespace

Projection2D tsne2d(const std::vector<std::vector<double>>& vectors, double perplexity,
                    int64_t iterations, uint64_t seed, const std::vector<int64_t>& ids_in) {
    check_rows(vectors, 3);
    const size_t n = vectors.size();
    if (!(perplexity >= 1.0) || perplexity >= static_cast<double>(n - 1) / 3.0) {
        throw ArgumentError("t-SNE perplexity must satisfy 1 <= perplexity < (n-1)/3");
    }
    if (iterations < 1) throw ArgumentError("t-SNE iterations must be >= 1");
    auto ids = default_ids(n, ids_in);

    const std::vector<double> dist = pairwise_sq(vectors);
    std::vector<double> pcond;
    gaussian_perplexity_rows(dist, n, perplexity, pcond);

    // Symmetrize: P = (Pc + Pc^T) / (2n), floored away from zero.
    std::vector<double> P(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            P[i * n + j] = (pcond[i * n + j] + pcond[j * n + i]) / (2.0 * static_cast<double>(n));
            if (i != j) P[i * n + j] = std::max(P[i * n + j], 1e-12);
        }
    }

    constexpr double kExaggeration = 12.0;
    constexpr int64_t kExagIters = 250;
    constexpr int64_t kMomentumSwitch = 250;
    // Scale the step with n so the exaggeration phase stays bounded at
    // desk-scale point counts.
    const double kEta = std::max(static_cast<double>(n) / kExaggeration, 2.0);

    Rng rng(seed);
    std::vector<double> y(n * 2), dy(n * 2, 0.0), uy(n * 2, 0.0);
    // Per-coordinate gains keep the fixed step size stable across scales.
    std::vector<double> gains(n * 2, 1.0);
    for (double& v : y) v = rng.normal(0.0, 1e-4);

    Projection2D proj;
    proj.method = Projection2D::Method::tsne;
    proj.perplexity = perplexity;
    proj.iterations = iterations;

    std::vector<double> qnum(n * n, 0.0);
    for (int64_t iter = 0; iter < iterations; ++iter) {
        const double exag = iter < kExagIters ? kExaggeration : 1.0;
        const double momentum = iter < kMomentumSwitch ? 0.5 : 0.8;

        // Student-t numerators and normalizer.
        double qsum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = i + 1; j < n; ++j) {
                const double dx = y[i * 2] - y[j * 2];
                const double dyv = y[i * 2 + 1] - y[j * 2 + 1];
                const double q = 1.0 / (1.0 + dx * dx + dyv * dyv);
                qnum[i * n + j] = q;
                qnum[j * n + i] = q;
                qsum += 2.0 * q;
            }
        }

        // Gradient: 4 * sum_j (exag*P_ij - Q_ij) * qnum_ij * (y_i - y_j).
        for (size_t i = 0; i < n; ++i) {
            double gx = 0.0, gy = 0.0;
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double mult =
                    (exag * P[i * n + j] - qnum[i * n + j] / qsum) * qnum[i * n + j];
                gx += mult * (y[i * 2] - y[j * 2]);
                gy += mult * (y[i * 2 + 1] - y[j * 2 + 1]);
            }
            dy[i * 2] = 4.0 * gx;
            dy[i * 2 + 1] = 4.0 * gy;
        }
        for (size_t k = 0; k < n * 2; ++k) {
            gains[k] = (dy[k] > 0) != (uy[k] > 0) ? gains[k] + 0.2 : gains[k] * 0.8;
            gains[k] = std::max(gains[k], 0.01);
            uy[k] = momentum * uy[k] - kEta * gains[k] * dy[k];
            y[k] += uy[k];
        }
        // Re-center (translation invariance of the objective).
        double mx = 0.0, my = 0.0;
        for (size_t i = 0; i < n; ++i) {
            mx += y[i * 2];
            my += y[i * 2 + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            y[i * 2] -= mx;
            y[i * 2 + 1] -= my;
        }

        // KL(P || Q) against the true P.
        double kl = 0.0;
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double q = std::max(qnum[i * n + j] / qsum, 1e-12);
                kl += P[i * n + j] * std::log(P[i * n + j] / q);
            }
        }
        proj.kl_history.push_back(kl);
    }

    for (size_t i = 0; i < n; ++i) {
        proj.points.push_back({ids[i], y[i * 2], y[i * 2 + 1]});
    }
    return proj;
}

namespace {

// Three-stop color ramp (dark violet -> teal -> yellow) over t in [0, 1].
std::string ramp_color(double t) {
    const double stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
    double rgb[3];
    if (t <= 0.5) {
        const double u = t * 2.0;
        for (int c = 0; c < 3; ++c) rgb[c] = stops[0][c] + (stops[1][c] - stops[0][c]) * u;
    } else {
        const double u = (t - 0.5) * 2.0;
        for (int c = 0; c < 3; ++c) rgb[c] = stops[1][c] + (stops[2][c] - stops[1][c]) * u;
    }
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(rgb[0]),
                  static_cast<int>(rgb[1]), static_cast<int>(rgb[2]));
    return buf;
}

}  // namespace

void export_projection(const Projection2D& proj, const std::filesystem::path& csv_path,
                       const std::filesystem::path& svg_path) {
    if (proj.points.empty()) throw ArgumentError("export_projection: empty projection");
    {
        std::ofstream csv(csv_path);
        if (!csv) throw IoError("cannot open for writing: " + csv_path.string());
        csv << "layer,x,y\n";
        char buf[160];
        for (const auto& p : proj.points) {
            std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", static_cast<long long>(p.id),
                          p.x, p.y);
            csv << buf;
        }
        if (!csv) throw IoError("write failed: " + csv_path.string());
    }

    double xmin = proj.points[0].x, xmax = xmin, ymin = proj.points[0].y, ymax = ymin;
    for (const auto& p : proj.points) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    const double spanx = std::max(xmax - xmin, 1e-9);
    const double spany = std::max(ymax - ymin, 1e-9);
    constexpr double W = 640, H = 480, margin = 48;

    std::ofstream svg(svg_path);
    if (!svg) throw IoError("cannot open for writing: " + svg_path.string());
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    const size_t count = proj.points.size();
    char buf[512];
    for (size_t i = 0; i < count; ++i) {
        const auto& p = proj.points[i];
        const double px = margin + (p.x - xmin) / spanx * (W - 2 * margin);
        const double py = H - margin - (p.y - ymin) / spany * (H - 2 * margin);
        const double t = count > 1 ? static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
        std::snprintf(buf, sizeof(buf),
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"5\" fill=\"%s\"/>\n"
                      "<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" "
                      "font-family=\"sans-serif\">%lld</text>\n",
                      px, py, ramp_color(t).c_str(), px + 7.0, py + 4.0,
                      static_cast<long long>(p.id));
        svg << buf;
    }
    svg << "</svg>\n";
    if (!svg) throw IoError("write failed: " + svg_path.string());
}

}  // namespace layerforge::analysis
