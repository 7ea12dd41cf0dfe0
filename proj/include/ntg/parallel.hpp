#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace ntg::parallel {

namespace detail {
inline std::atomic<std::size_t>& configured_threads() {
  static std::atomic<std::size_t> value{0};
  return value;
}
}  // namespace detail

/// Thread count used when nothing was configured: NTG_THREADS if set and
/// positive, otherwise the hardware concurrency.
inline std::size_t default_threads() {
  if (const char* env = std::getenv("NTG_THREADS")) {
    try {
      long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

inline void set_threads(std::size_t n) { detail::configured_threads() = n; }

inline std::size_t threads() {
  std::size_t n = detail::configured_threads();
  return n == 0 ? default_threads() : n;
}

/// Splits [begin, end) into contiguous chunks, one per worker, and calls
/// fn(lo, hi) on each. Chunk boundaries depend only on the thread count.
/// Runs inline when one thread is configured or the range is below `grain`.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, std::size_t grain = 1) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers = std::min(threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(grain, 1)));
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t lo = begin + w * chunk;
    std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(begin, std::min(end, begin + chunk));
}

}  // namespace ntg::parallel
