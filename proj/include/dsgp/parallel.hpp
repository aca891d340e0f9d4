#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dsgp {

/// Worker count used by batch-parallel loops. Results never depend on it:
/// work is split into fixed-size chunks whose partial results are reduced
/// in chunk order.
inline std::size_t &num_threads() {
  static std::size_t n = 1;
  return n;
}

inline constexpr std::size_t kChunkSize = 256;

inline std::size_t num_chunks(std::size_t n_items) { return (n_items + kChunkSize - 1) / kChunkSize; }

/// Calls fn(chunk, begin, end) for every chunk, possibly concurrently.
template <class Fn> void for_each_chunk(std::size_t n_items, Fn &&fn) {
  const std::size_t chunks = num_chunks(n_items);
  const std::size_t workers = std::min(num_threads(), chunks);
  auto run = [&](std::size_t c) {
    const std::size_t begin = c * kChunkSize;
    fn(c, begin, std::min(n_items, begin + kChunkSize));
  };
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      run(c);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t c = next++; c < chunks; c = next++) {
        try {
          run(c);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) {
            error = std::current_exception();
          }
        }
      }
    });
  }
  pool.clear();
  if (error) {
    std::rethrow_exception(error);
  }
}

} // namespace dsgp
