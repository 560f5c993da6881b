#pragma once

#include <cstddef>
#include <functional>

namespace gavatar {

// Worker count: GAVATAR_THREADS if set and positive, otherwise the hardware
// concurrency (at least 1).
size_t worker_count();

// Overrides the worker count for the current process (0 restores the default).
void set_worker_count(size_t n);

// Static partition of [0, n) into at most worker_count() contiguous chunks.
// fn(begin, end, worker) runs once per chunk; chunk boundaries depend only on
// n and the worker count, so per-worker partial results reduce
// deterministically.
void parallel_for(size_t n, const std::function<void(size_t, size_t, size_t)>& fn);

} // namespace gavatar
