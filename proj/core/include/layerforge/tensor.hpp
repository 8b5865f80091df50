#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "layerforge/errors.hpp"

namespace layerforge {

/// Dense row-major float32 array with shape metadata. The universal carrier
/// for weights, activations and gradients. Reductions inside kernels may
/// accumulate in float64; storage is always float32.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<int64_t> shape);

    static Tensor full(std::vector<int64_t> shape, float value);
    static Tensor from_data(std::vector<int64_t> shape, std::vector<float> data);

    const std::vector<int64_t>& shape() const noexcept { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t rank() const noexcept { return shape_.size(); }
    int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }

    // 2-D accessors (rank checked only by assert-level logic in debug use).
    float& at(int64_t i, int64_t j) { return data_[i * shape_[1] + j]; }
    float at(int64_t i, int64_t j) const { return data_[i * shape_[1] + j]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    /// Bitwise equality of shape and payload (for determinism tests).
    bool bit_equal(const Tensor& other) const noexcept;

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

/// Checked product of dimension sizes; rejects non-positive dims.
int64_t shape_numel(const std::vector<int64_t>& shape);

std::string shape_string(const std::vector<int64_t>& shape);

}  // namespace layerforge
