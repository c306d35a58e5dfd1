// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_PARALLEL_HPP_
#define S2VGP_PARALLEL_HPP_

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace s2vgp {

/// Worker count from S2VGP_THREADS (default 1).
inline int thread_count() {
  const char* env = std::getenv("S2VGP_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  try {
    const int n = std::stoi(env);
    if (n <= 0) return std::max(1u, std::thread::hardware_concurrency());
    return n;
  } catch (...) {
    return 1;
  }
}

/// Runs body(chunk, begin, end) over fixed-size chunks of [0, n).
///
/// Chunk boundaries depend only on n and chunk_size, so callers that reduce
/// per-chunk results in chunk order get bitwise identical answers for any
/// thread count.
template <class Body>
void parallel_chunks(long n, long chunk_size, Body&& body, int threads = thread_count()) {
  const long chunks = n <= 0 ? 0 : (n + chunk_size - 1) / chunk_size;
  auto run = [&](long c) { body(c, c * chunk_size, std::min(n, (c + 1) * chunk_size)); };
  if (threads <= 1 || chunks <= 1) {
    for (long c = 0; c < chunks; ++c) run(c);
    return;
  }
  const int workers = static_cast<int>(std::min<long>(threads, chunks));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (long c = w; c < chunks; c += workers) run(c);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline long num_chunks(long n, long chunk_size) { return n <= 0 ? 0 : (n + chunk_size - 1) / chunk_size; }

}  // namespace s2vgp

#endif  // S2VGP_PARALLEL_HPP_
