#pragma once

#include <cstddef>
#include <functional>

namespace osl {

// 0 selects the hardware concurrency (at least 1).
int resolve_threads(int requested);

// Calls fn(i) for i in [0, n) on up to `threads` workers. Callers write
// results by index, so the output never depends on the schedule. The
// exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace osl
