#pragma once

#include <cstdint>
#include <functional>

namespace nlcnn {

// Worker-thread cap, from NLCNN_THREADS (0 or unset = hardware concurrency).
// Read once per process; also applied to the BLAS backend.
int num_threads();

// Runs fn(i) for i in [begin, end). Work is split into contiguous index
// ranges, so each iteration writes only its own outputs and the result is
// identical for any thread count. Falls back to a plain loop when the range
// is small or only one thread is available.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn);

}  // namespace nlcnn
