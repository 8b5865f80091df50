#pragma once

#include <cstdint>
#include <functional>

namespace layerforge {

/// Worker count: hardware concurrency, optionally capped by the
/// LAYERFORGE_THREADS environment variable (read once at first use).
int max_threads();

/// Runs fn over [0, n) split into contiguous chunks, one per worker.
/// Results must not depend on the partition: callers only use this where
/// each index writes its own disjoint output.
void parallel_for(int64_t n, const std::function<void(int64_t begin, int64_t end)>& fn);

}  // namespace layerforge
