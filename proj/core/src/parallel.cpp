// SPDX-License-Identifier: Apache-2.0
#include "voxformer/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "voxformer/error.hpp"

namespace voxformer {

namespace {
std::atomic<int> g_threads{1};
}

void set_num_threads(int n) {
  if (n < 1) throw ConfigError("thread count must be >= 1");
  g_threads.store(n);
}

int num_threads() noexcept { return g_threads.load(); }

void retain_freed_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int t = static_cast<int>(std::min<std::int64_t>(num_threads(), n));
  if (t <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(t - 1));
  const std::int64_t chunk = (n + t - 1) / t;
  for (int i = 1; i < t; ++i) {
    const std::int64_t b = i * chunk;
    const std::int64_t e = std::min(n, b + chunk);
    if (b < e) workers.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
  for (auto& w : workers) w.join();
}

}  // namespace voxformer
