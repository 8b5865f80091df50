#pragma once

#include <filesystem>
#include <vector>

#include "layerforge/checkpoint.hpp"
#include "layerforge/numkernel.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge::svdspace {

using checkpoint::MatrixFamily;
using checkpoint::TransformerCheckpoint;

/// Shared basis for one matrix family across layers: W_i = u * diag(sigma)
/// * coeffs[i], where coeffs[i] is the i-th contiguous column block of vt.
struct SvdSpace {
    MatrixFamily family{};
    int64_t d1 = 0;
    int64_t d2 = 0;
    int64_t n_layers = 0;
    int64_t rank = 0;          // min(d1, n_layers * d2)
    Tensor u;                  // [d1, rank]
    std::vector<float> sigma;  // [rank]
    std::vector<Tensor> coeffs;  // n_layers blocks, each [rank, d2]
};

/// Horizontal concatenation: block i of the result equals mats[i].
/// Requires >= 2 matrices of identical shape.
Tensor concat_layers(const std::vector<Tensor>& mats);

SvdSpace decompose(MatrixFamily family, const std::vector<Tensor>& mats);

/// Decompose one family of a checkpoint across all of its layers.
SvdSpace decompose_family(const TransformerCheckpoint& model, MatrixFamily family);

/// u * diag(sigma) * coeffs -> [d1, d2].
Tensor reconstruct_layer(const SvdSpace& space, const Tensor& coeffs);

/// LFCK container with tensors "u", "sigma", "coeffs.{i}".
void dump_space(const SvdSpace& space, const std::filesystem::path& path);

}  // namespace layerforge::svdspace
