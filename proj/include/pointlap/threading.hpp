#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace pointlap {

namespace detail {
inline std::size_t& thread_count_ref() {
  static std::size_t count = 1;
  return count;
}
}  // namespace detail

// Worker count for row-parallel kernels. Results are bitwise identical for
// any setting: each worker owns a contiguous row range and no accumulation
// crosses workers.
inline void set_thread_count(std::size_t n) {
  detail::thread_count_ref() = std::max<std::size_t>(1, n);
}

inline std::size_t thread_count() { return detail::thread_count_ref(); }

template <typename Fn>
void parallel_for_rows(std::size_t n, std::size_t min_rows_per_worker, Fn&& fn) {
  std::size_t workers = std::min(thread_count(), n / std::max<std::size_t>(1, min_rows_per_worker));
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace pointlap
