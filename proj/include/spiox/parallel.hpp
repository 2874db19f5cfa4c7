#pragma once

#include <cstddef>
#include <functional>

namespace spiox {

// Process-wide worker count for data-parallel loops; 1 runs inline.
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for i in [begin, end), split into contiguous chunks across the
// worker count. Iterations must be independent. The first exception thrown
// by any chunk is rethrown after all chunks finish.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn,
                  std::size_t min_chunk = 64);

}  // namespace spiox
