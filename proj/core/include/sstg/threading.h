#pragma once

#include <cstdint>
#include <functional>

namespace sstg {

// Worker cap: min(hardware_concurrency, SSTG_THREADS env var if set).
int max_worker_threads();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker. Results must be written to per-index slots so the caller can reduce
// in a fixed order; this keeps floating-point results independent of the
// thread count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

} // namespace sstg
