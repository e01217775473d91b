#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <thread>
#include <utility>
#include <vector>

namespace voxseg {

namespace detail {
inline std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{0};  // 0 = use hardware concurrency
  return cap;
}
}  // namespace detail

inline void set_max_threads(int n) { detail::thread_cap().store(n < 0 ? 0 : n); }

inline int max_threads() {
  const int cap = detail::thread_cap().load();
  if (cap > 0) return cap;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs f(i) for i in [0, n). Each index is computed by exactly one worker
/// and indices never share output, so results are identical at any thread
/// count. Workers take contiguous chunks; `grain` is the minimum work per
/// worker before threads are spawned at all.
template <class F>
void parallel_for(std::int64_t n, F&& f, std::int64_t grain = 1) {
  if (n <= 0) return;
  const int cap = max_threads();
  std::int64_t workers = cap;
  if (workers > n / grain) workers = n / grain;
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::int64_t> failed{-1};
  std::exception_ptr error;
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  const std::int64_t chunk = (n + workers - 1) / workers;
  auto run = [&](std::int64_t lo, std::int64_t hi) {
    try {
      for (std::int64_t i = lo; i < hi && failed.load(std::memory_order_relaxed) < 0; ++i) f(i);
    } catch (...) {
      std::int64_t expected = -1;
      if (failed.compare_exchange_strong(expected, lo)) error = std::current_exception();
    }
  };
  for (std::int64_t w = 1; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back(run, lo, hi);
  }
  run(0, std::min(n, chunk));
  pool.clear();  // joins
  if (error) std::rethrow_exception(error);
}

}  // namespace voxseg
