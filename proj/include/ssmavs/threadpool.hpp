#pragma once

#include <functional>

#include "ssmavs/common.hpp"

namespace ssmavs {

// Number of worker threads the library may use. Resolved once from
// SSMAVS_THREADS (clamped to [1, hardware_concurrency]); defaults to the
// hardware count when the variable is unset or unparsable.
int max_threads();

// Override the worker count at runtime (used by the benchmark harness to
// time single-threaded kernels). n < 1 resets to the environment default.
void set_max_threads(int n);

// Runs fn(begin, end) over [0, n) split into fixed-size chunks. Chunk
// boundaries depend only on n and chunk_size, never on the worker count, so
// any per-chunk accumulation merged in chunk order is bitwise reproducible
// for every thread configuration. Chunks are claimed by an atomic counter;
// each index is processed exactly once and writes must stay disjoint.
void parallel_chunks(i64 n, i64 chunk_size,
                     const std::function<void(i64, i64)>& fn);

}  // namespace ssmavs
