#include "layerforge/svdspace.hpp"

#include <cstring>

#include "layerforge/lfck.hpp"

namespace layerforge::svdspace {

Tensor concat_layers(const std::vector<Tensor>& mats) {
    if (mats.size() < 2) {
        throw ArgumentError("concat_layers needs at least 2 matrices, got " +
                            std::to_string(mats.size()));
    }
    const Tensor& first = mats.front();
    if (first.rank() != 2) {
        throw DimensionError("concat_layers expects 2-D matrices");
    }
    for (const Tensor& m : mats) {
        if (m.shape() != first.shape()) {
            throw DimensionError("concat_layers: heterogeneous shapes " +
                                 shape_string(first.shape()) + " vs " + shape_string(m.shape()));
        }
    }
    const int64_t d1 = first.dim(0), d2 = first.dim(1);
    const int64_t L = static_cast<int64_t>(mats.size());
    Tensor out({d1, L * d2});
    for (int64_t i = 0; i < d1; ++i) {
        float* row = out.data() + i * L * d2;
        for (int64_t b = 0; b < L; ++b) {
            std::memcpy(row + b * d2, mats[static_cast<size_t>(b)].data() + i * d2,
                        static_cast<size_t>(d2) * sizeof(float));
        }
    }
    return out;
}

SvdSpace decompose(MatrixFamily family, const std::vector<Tensor>& mats) {
    Tensor concat = concat_layers(mats);
    numkernel::SvdResult svd = numkernel::svd_thin(concat);

    SvdSpace space;
    space.family = family;
    space.d1 = mats.front().dim(0);
    space.d2 = mats.front().dim(1);
    space.n_layers = static_cast<int64_t>(mats.size());
    space.rank = static_cast<int64_t>(svd.sigma.size());
    space.u = std::move(svd.u);
    space.sigma = std::move(svd.sigma);

    // Slice vt into contiguous per-layer column blocks; bit-exact copies.
    space.coeffs.reserve(static_cast<size_t>(space.n_layers));
    const int64_t r = space.rank, d2 = space.d2, m = space.n_layers * d2;
    for (int64_t b = 0; b < space.n_layers; ++b) {
        Tensor block({r, d2});
        for (int64_t i = 0; i < r; ++i) {
            std::memcpy(block.data() + i * d2, svd.vt.data() + i * m + b * d2,
                        static_cast<size_t>(d2) * sizeof(float));
        }
        space.coeffs.push_back(std::move(block));
    }
    return space;
}

SvdSpace decompose_family(const TransformerCheckpoint& model, MatrixFamily family) {
    std::vector<Tensor> mats;
    mats.reserve(model.layers.size());
    for (int64_t l = 0; l < model.config.n_layers; ++l) {
        mats.push_back(model.family(l, family));
    }
    return decompose(family, mats);
}

Tensor reconstruct_layer(const SvdSpace& space, const Tensor& coeffs) {
    if (coeffs.rank() != 2 || coeffs.dim(0) != space.rank || coeffs.dim(1) != space.d2) {
        throw DimensionError("reconstruct_layer: coefficient shape " +
                             shape_string(coeffs.shape()) + " does not match space [" +
                             std::to_string(space.rank) + ", " + std::to_string(space.d2) + "]");
    }
    // u * diag(sigma) * coeffs, scaling the coefficient rows first.
    Tensor scaled({space.rank, space.d2});
    for (int64_t i = 0; i < space.rank; ++i) {
        const float s = space.sigma[static_cast<size_t>(i)];
        const float* src = coeffs.data() + i * space.d2;
        float* dst = scaled.data() + i * space.d2;
        for (int64_t j = 0; j < space.d2; ++j) dst[j] = s * src[j];
    }
    return numkernel::matmul(space.u, scaled);
}

void dump_space(const SvdSpace& space, const std::filesystem::path& path) {
    lfck::Container c;
    c.config_json = std::string("{\"family\":\"") +
                    std::string(checkpoint::family_name(space.family)) +
                    "\",\"d1\":" + std::to_string(space.d1) +
                    ",\"d2\":" + std::to_string(space.d2) +
                    ",\"n_layers\":" + std::to_string(space.n_layers) +
                    ",\"rank\":" + std::to_string(space.rank) + "}";
    c.tensors.push_back({"u", space.u});
    Tensor sig({space.rank});
    std::memcpy(sig.data(), space.sigma.data(), static_cast<size_t>(space.rank) * sizeof(float));
    c.tensors.push_back({"sigma", std::move(sig)});
    for (int64_t i = 0; i < space.n_layers; ++i) {
        c.tensors.push_back({"coeffs." + std::to_string(i), space.coeffs[static_cast<size_t>(i)]});
    }
    lfck::write_container(path, c);
}

}  // namespace layerforge::svdspace
