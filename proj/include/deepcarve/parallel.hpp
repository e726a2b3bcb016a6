#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace deepcarve {

namespace detail {
inline std::atomic<std::size_t>& thread_limit() {
  static std::atomic<std::size_t> limit{1};
  return limit;
}
}  // namespace detail

/// Process-wide cap on worker threads used by parallel_for.
inline void set_num_threads(std::size_t n) { detail::thread_limit() = std::max<std::size_t>(n, 1); }
inline std::size_t num_threads() { return detail::thread_limit(); }

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs;
/// callers reduce afterwards in index order, so results do not depend on the
/// thread count.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(num_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(body);
  body();
  pool.clear();
  if (error) std::rethrow_exception(error);
}

}  // namespace deepcarve
