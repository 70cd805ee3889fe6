#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace gigaseg {

// Execution knobs passed explicitly to every kernel; there is no global state.
// In deterministic mode every reduction runs in a fixed order that does not
// depend on the thread count.
struct ExecPolicy {
  unsigned threads = 1;
  bool deterministic = true;
};

// Splits [0, n) into contiguous chunks, one per worker. fn(begin, end, worker).
// Runs inline when one worker suffices.
template <typename Fn>
void parallel_for(std::size_t n, const ExecPolicy& policy, Fn&& fn,
                  std::size_t min_chunk = 1) {
  if (n == 0) return;
  std::size_t workers = std::max<std::size_t>(1, policy.threads);
  workers = std::min(workers, std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (workers == 1) {
    fn(std::size_t{0}, n, std::size_t{0});
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, b, e, w] {
      try {
        fn(b, e, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  try {
    fn(std::size_t{0}, std::min(n, chunk), std::size_t{0});
  } catch (...) {
    errors[0] = std::current_exception();
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Number of chunks parallel_for will actually use for n items.
inline std::size_t worker_count(std::size_t n, const ExecPolicy& policy,
                                std::size_t min_chunk = 1) {
  if (n == 0) return 0;
  std::size_t workers = std::max<std::size_t>(1, policy.threads);
  return std::min(workers, std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
}

}  // namespace gigaseg
