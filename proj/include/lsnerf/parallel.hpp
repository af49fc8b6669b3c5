#pragma once

// Block-partitioned parallel loop. Workers write disjoint output ranges,
// so results are identical for any thread count.

#include <algorithm>
#include <thread>
#include <vector>

namespace lsnerf {

template <typename F>
void parallel_for(int begin, int end, int threads, F&& fn) {
  const int n = end - begin;
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = begin; i < end; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int lo = begin + t * chunk;
    const int hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace lsnerf
