#pragma once

#include <cstddef>
#include <functional>

namespace bimtdp {

/// Worker count used by kernels that partition their output. Defaults to 1,
/// which keeps every run bit-deterministic.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Splits [begin, end) into contiguous chunks, one per worker, and runs
/// fn(chunk_begin, chunk_end) on each. Runs inline when one worker is set.
void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t, std::size_t)>& fn);

/// Keeps large tensor buffers on the heap instead of fresh mmap pages; training
/// allocates and frees the same sizes every step.
void tune_allocator();

}  // namespace bimtdp
