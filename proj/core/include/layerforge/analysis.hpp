#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "layerforge/svdspace.hpp"

namespace layerforge::analysis {

using checkpoint::MatrixFamily;
using svdspace::SvdSpace;

struct LayerSignature {
    int64_t layer_index = 0;
    MatrixFamily family{};
    std::vector<float> vec;  // length d2
};

/// Signature of layer i = row 0 of V_i: the layer's slice of the top
/// right-singular vector under the descending-sigma ordering.
std::vector<LayerSignature> layer_signatures(const SvdSpace& space);

struct ProjectedPoint {
    int64_t id = 0;  // layer index (or input row for ad-hoc data)
    double x = 0, y = 0;
};

struct Projection2D {
    enum class Method { pca, tsne } method = Method::pca;
    std::vector<ProjectedPoint> points;
    double perplexity = 0;  // tsne only
    int64_t iterations = 0;
    std::vector<double> kl_history;  // tsne only, one entry per iteration
};

std::vector<std::vector<double>> signature_rows(const std::vector<LayerSignature>& sigs);

/// Center, project onto the top-2 principal directions (descending
/// eigenvalue, svd sign convention). Needs >= 3 vectors.
Projection2D pca2d(const std::vector<std::vector<double>>& vectors,
                   const std::vector<int64_t>& ids = {});

/// Exact t-SNE: per-point Gaussian bandwidths by bisection (entropy matched
/// to ln(perplexity) within 1e-4 in perplexity units), symmetrized P,
/// Student-t Q, plain momentum gradient descent (0.5 until iteration 250,
/// then 0.8) with x12 early exaggeration for the first 250 iterations.
/// kl_history records KL(P||Q) against the un-exaggerated P each iteration.
Projection2D tsne2d(const std::vector<std::vector<double>>& vectors, double perplexity = 5.0,
                    int64_t iterations = 1000, uint64_t seed = 0,
                    const std::vector<int64_t>& ids = {});

/// CSV "layer,x,y" plus an SVG scatter with one text label per point and a
/// sequential color ramp over point order.
void export_projection(const Projection2D& proj, const std::filesystem::path& csv_path,
                       const std::filesystem::path& svg_path);

}  // namespace layerforge::analysis
