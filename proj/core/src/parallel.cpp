#include "lrn/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace lrn {

namespace {
std::atomic<int> g_workers{0};
}

int worker_count() {
  int n = g_workers.load(std::memory_order_relaxed);
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void set_worker_count(int n) {
  g_workers.store(n < 0 ? 0 : n, std::memory_order_relaxed);
}

void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = std::min<std::int64_t>(worker_count(), n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }

  const std::int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers) - 1);
  std::exception_ptr err;
  std::atomic<bool> has_err{false};

  auto run = [&](std::int64_t begin, std::int64_t end) {
    try {
      fn(begin, end);
    } catch (...) {
      if (!has_err.exchange(true)) err = std::current_exception();
    }
  };

  for (int t = 1; t < workers; ++t) {
    std::int64_t begin = t * chunk;
    std::int64_t end = std::min<std::int64_t>(begin + chunk, n);
    if (begin >= end) break;
    threads.emplace_back(run, begin, end);
  }
  run(0, std::min<std::int64_t>(chunk, n));
  for (auto& th : threads) th.join();

  if (has_err.load()) std::rethrow_exception(err);
}

}  // namespace lrn
