// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>

namespace voxformer {

/// Worker count for intra-kernel parallelism. Work is split into fixed
/// contiguous ranges, so results are reproducible for a given count.
/// The default (and the reference configuration) is 1.
void set_num_threads(int n);
[[nodiscard]] int num_threads() noexcept;

/// Keeps large, short-lived activation buffers in the heap instead of
/// returning them to the OS after every free. No-op outside glibc.
void retain_freed_memory();

/// Runs fn(begin, end) over a static partition of [0, n).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace voxformer
