#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace latent_inpaint {

/// Worker cap: LATENT_INPAINT_THREADS if set to a positive integer,
/// otherwise the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("LATENT_INPAINT_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs task(i) for i in [0, count) on up to worker_threads() threads. Tasks
/// must be independent; the first exception is rethrown after all joins.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& task) {
  const auto threads = std::min(count, worker_threads());
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) task(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace latent_inpaint
