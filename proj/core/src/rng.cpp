#include "layerforge/rng.hpp"

#include <cmath>
#include <numbers>

#include "layerforge/errors.hpp"

namespace layerforge {

namespace {

inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

void Rng::reseed(uint64_t seed) {
    seed_ = seed;
    uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::bounded(uint64_t n) {
    if (n == 0) throw ArgumentError("Rng::bounded requires n >= 1");
    if (n == 1) return 0;
    const uint64_t threshold = (0 - n) % n;  // rejection zone for unbiased draw
    for (;;) {
        uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

double Rng::normal(double mean, double stddev) {
    // u1 in (0, 1] so log() is finite; u2 in [0, 1).
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * mag * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor rng_normal(Rng& rng, std::vector<int64_t> shape, double mean, double stddev) {
    if (stddev < 0.0) throw ArgumentError("rng_normal requires stddev >= 0");
    Tensor t(std::move(shape));
    float* p = t.data();
    const int64_t n = t.numel();
    if (stddev == 0.0) {
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(mean);
        return t;
    }
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.normal(mean, stddev));
    return t;
}

}  // namespace layerforge
