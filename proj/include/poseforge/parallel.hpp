#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace poseforge {

/// Splits [0, n) into one contiguous chunk per worker and runs fn(begin, end)
/// on each. Chunk boundaries depend only on (n, workers), so any result a
/// caller indexes by position is reproducible. workers <= 1 runs inline.
inline void parallel_chunks(std::int64_t n, int workers,
                            const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  workers = std::max(1, workers);
  const std::int64_t w = std::min<std::int64_t>(workers, n);
  if (w == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(size_t(w));
  const std::int64_t base = n / w, extra = n % w;
  std::int64_t begin = 0;
  for (std::int64_t i = 0; i < w; ++i) {
    const std::int64_t end = begin + base + (i < extra ? 1 : 0);
    pool.emplace_back(fn, begin, end);
    begin = end;
  }
  for (auto& t : pool) t.join();
}

}  // namespace poseforge
