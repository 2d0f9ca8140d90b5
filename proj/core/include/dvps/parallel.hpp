#pragma once

#include <functional>

namespace dvps {

/// Runs fn(0..count-1), fanning out over up to `threads` workers when
/// threads > 1. Work items must be independent; the first exception thrown
/// by any item is rethrown after all workers join. With threads <= 1 this
/// is a plain loop.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

/// Worker count from the DVPS_THREADS environment variable (default 1).
int env_thread_count();

}  // namespace dvps
