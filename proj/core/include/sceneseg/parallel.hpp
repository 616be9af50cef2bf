#pragma once

#include <cstddef>
#include <functional>

namespace sceneseg {

/// Number of worker threads used by parallel_for_blocks. Resolved once from
/// SCENESEG_THREADS (falling back to hardware concurrency) and overridable
/// programmatically.
size_t max_threads();
void set_max_threads(size_t n);

/// Runs fn(begin, end) over a fixed block partition of [0, n).
/// The partition depends only on n and the configured thread count, and every
/// block writes disjoint outputs, so callers get identical results no matter
/// how the blocks are scheduled.
void parallel_for_blocks(size_t n, const std::function<void(size_t, size_t)>& fn);

}  // namespace sceneseg
