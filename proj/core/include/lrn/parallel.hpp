#pragma once

#include <cstdint>
#include <functional>

namespace lrn {

// Worker count used by parallel_for. 0 (the default) means "use the
// hardware concurrency". Results never depend on this value: every output
// element is computed by exactly one worker with a fixed summation order.
int worker_count();
void set_worker_count(int n);

// Partitions [0, n) into contiguous chunks and runs fn(begin, end) on each,
// possibly concurrently. fn must only write to locations derived from its
// own index range. Exceptions thrown inside fn are rethrown on the caller.
void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace lrn
