#pragma once

#include <cstdint>
#include <functional>

namespace idol {

// Global worker count used by parallel_for. Defaults to the hardware
// concurrency; can be lowered (e.g. from a config or environment variable).
// Work is always split into ranges deterministically, so results do not
// depend on the worker count.
int num_threads();
void set_num_threads(int n);

// Runs fn(begin, end) over disjoint sub-ranges of [0, n) on the worker pool.
// Falls back to a single inline call when n is small or only one worker is
// configured. fn must not throw.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn,
                  int64_t grain = 1);

}  // namespace idol
