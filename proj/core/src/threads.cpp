#include "nlcnn/threads.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace nlcnn {

namespace {

int resolve_num_threads() {
  int n = 0;
  if (const char* env = std::getenv("NLCNN_THREADS")) {
    n = std::atoi(env);
  }
  if (n <= 0) {
    n = static_cast<int>(std::thread::hardware_concurrency());
  }
  n = std::max(1, n);
  // Inner GEMMs run on the BLAS pool; outer parallel_for loops are used only
  // around BLAS-free work (feature extraction), so both get the full cap.
  openblas_set_num_threads(n);
  return n;
}

}  // namespace

int num_threads() {
  static const int n = resolve_num_threads();
  return n;
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn) {
  const std::int64_t count = end - begin;
  if (count <= 0) return;
  const int workers = std::min<std::int64_t>(num_threads(), count);
  if (workers <= 1 || count < 2) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (count + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = begin + w * chunk;
    const std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace nlcnn
