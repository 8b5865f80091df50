#pragma once

#include <cstdint>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge {

/// Deterministic xoshiro256++ generator, seeded through splitmix64.
/// The raw 64-bit stream is bit-identical on every platform for a given
/// seed and call sequence. normal() additionally goes through libm
/// (log/cos), which is bit-stable across runs on one platform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed);

    uint64_t next_u64();

    /// Uniform double in [0, 1), 53-bit resolution.
    double uniform();

    /// Unbiased integer in [0, n), n >= 1, by rejection sampling.
    uint64_t bounded(uint64_t n);

    /// One Gaussian sample via Box-Muller; consumes exactly two uniforms.
    double normal(double mean = 0.0, double stddev = 1.0);

    /// Fisher-Yates shuffle with bounded draws.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t seed() const noexcept { return seed_; }

private:
    uint64_t state_[4] = {};
    uint64_t seed_ = 0;
};

/// Tensor of i.i.d. Normal(mean, stddev) samples; stddev == 0 yields a
/// constant tensor. Deterministic given the generator state.
Tensor rng_normal(Rng& rng, std::vector<int64_t> shape, double mean, double stddev);

}  // namespace layerforge
