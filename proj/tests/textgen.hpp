#pragma once

// Deterministic synthetic English-like text for toy-scale experiments:
// templated sentences over small word lists with Zipf-leaning draws. Byte
// patterns are regular enough for a small decoder to learn quickly.

#include <cstdint>
#include <string>
#include <vector>

#include "layerforge/rng.hpp"

namespace testsupport {

inline std::string synth_text(uint64_t seed, size_t target_bytes) {
    using layerforge::Rng;
    static const std::vector<std::string> subjects = {
        "the cat",   "a dog",     "the old sailor", "the child", "a quiet farmer",
        "the moon",  "the river", "an engineer",    "the baker", "a small bird",
        "the tower", "the wind",  "a traveler",     "the clock", "the gardener"};
    static const std::vector<std::string> verbs = {
        "watches", "follows", "remembers", "builds",  "crosses", "paints",
        "carries", "repairs", "discovers", "guards",  "visits",  "measures",
        "ignores", "studies", "welcomes"};
    static const std::vector<std::string> objects = {
        "the bridge",  "a letter",      "the harbor",  "the garden", "an old map",
        "the lantern", "a wooden boat", "the orchard", "the valley", "a stone wall",
        "the market",  "a silver key",  "the meadow",  "the engine", "a long road"};
    static const std::vector<std::string> tails = {
        "at dawn",          "every winter",    "without a sound", "in the rain",
        "before breakfast", "under the stars", "after the storm", "by candlelight",
        "on sundays",       "with great care"};

    Rng rng(seed);
    auto zipf_pick = [&](const std::vector<std::string>& words) -> const std::string& {
        // Favor early entries: index ~ floor(n * u^2).
        const double u = rng.uniform();
        size_t idx = static_cast<size_t>(u * u * static_cast<double>(words.size()));
        if (idx >= words.size()) idx = words.size() - 1;
        return words[idx];
    };

    std::string out;
    out.reserve(target_bytes + 80);
    while (out.size() < target_bytes) {
        out += zipf_pick(subjects);
        out += ' ';
        out += zipf_pick(verbs);
        out += ' ';
        out += zipf_pick(objects);
        if (rng.uniform() < 0.6) {
            out += ' ';
            out += zipf_pick(tails);
        }
        out += rng.uniform() < 0.15 ? ";\n" : ".\n";
    }
    out.resize(target_bytes);
    return out;
}

}  // namespace testsupport
