#ifndef CAASR_PARALLEL_HPP
#define CAASR_PARALLEL_HPP

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace caasr {

/// Runs fn(0..n_chunks-1) across worker threads. Callers keep per-chunk
/// outputs and reduce them in chunk order afterwards, so results never
/// depend on scheduling or on how many workers actually ran.
inline void parallel_for_chunks(int n_chunks, const std::function<void(int)>& fn) {
  if (n_chunks <= 0) return;
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int workers = static_cast<int>(std::min<unsigned>(hw, n_chunks));
  if (workers <= 1) {
    for (int i = 0; i < n_chunks; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> threads;
  threads.reserve(workers);
  std::exception_ptr error;
  std::mutex error_mu;
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n_chunks; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace caasr

#endif  // CAASR_PARALLEL_HPP
