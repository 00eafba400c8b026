#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace zogp {

/// Resolves a worker count: `requested <= 0` means "all hardware threads".
/// The environment variable ZOGP_WORKERS, when set, overrides both.
inline int resolve_workers(int requested) {
  if (const char* env = std::getenv("ZOGP_WORKERS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Fork-join parallel map over [0, n). Each index is processed exactly once;
/// callers write results into pre-sized slots so the output is deterministic
/// regardless of worker count. The first exception thrown by any worker is
/// rethrown on the calling thread.
inline void parallel_for(int n, int workers,
                         const std::function<void(int)>& body) {
  workers = std::min(std::max(workers, 1), n);
  if (n <= 0) return;
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (int i = w; i < n; i += workers) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace zogp
