#pragma once

#include <cstdint>
#include <functional>

namespace ecvit {

/// Worker threads allowed by ECVIT_THREADS (default 1). With one thread every
/// computation is bitwise reproducible run to run.
int worker_threads();

/// Overrides the worker count for this process; 0 returns to ECVIT_THREADS.
void set_worker_threads(int n);

/// Splits [0, n) into contiguous chunks, one per worker. `fn` must only write
/// to locations owned by its chunk.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace ecvit
