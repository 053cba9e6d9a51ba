#ifndef CAMH_PARALLEL_HPP_
#define CAMH_PARALLEL_HPP_

#include <cstdint>
#include <functional>

namespace camh {

// Static-partition parallel_for over [0, n). Every index is owned by exactly
// one chunk, so results are bit-identical for any thread count. Falls back to
// inline execution for small n or when called from inside a worker.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn);

int parallel_threads();           // effective worker count (>= 1)
void set_parallel_threads(int n); // 0 = hardware default; also CAMH_THREADS env

}  // namespace camh

#endif
