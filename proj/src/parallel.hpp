#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace martpost {

// Worker count: explicit set_thread_count() wins, then MARTPOST_THREADS,
// then hardware concurrency.
int thread_count();
void set_thread_count(int n); // n <= 0 restores automatic selection

// Runs fn(i) for i in [0, n). Work is assigned by index (static interleaved
// partition), so results written to slot i are identical for any worker count.
// The first exception thrown by any worker is rethrown on the caller.
void parallel_for(long n, const std::function<void(long)>& fn);

} // namespace martpost
