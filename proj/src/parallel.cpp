#include "bimtdp/parallel.hpp"

#include <malloc.h>

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace bimtdp {

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }

std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (end <= begin) return;
  const std::size_t total = end - begin;
  const std::size_t workers = std::min(num_threads(), total);
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  const std::size_t chunk = (total + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = begin + w * chunk;
    const std::size_t e = std::min(end, b + chunk);
    if (b < e) pool.emplace_back(fn, b, e);
  }
  fn(begin, std::min(end, begin + chunk));
  for (auto& t : pool) t.join();
}

void tune_allocator() {
#ifdef M_MMAP_THRESHOLD
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace bimtdp
