#pragma once

#include <cstddef>
#include <functional>

namespace mshift {

/// Worker count allowed for internal parallelism: the value of the
/// MSHIFT_THREADS environment variable when it parses as a positive integer,
/// otherwise the hardware concurrency (at least 1).
std::size_t thread_budget();

/// Runs fn(0) .. fn(n-1), possibly on several threads. Each index must write
/// only to its own output slot; callers reduce the slots in index order so
/// the result does not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t max_threads = 0);

}  // namespace mshift
