#include "bimtdp/bench.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "bimtdp/bitcore.hpp"

namespace bimtdp {

#if defined(__GNUC__) && !defined(__clang__)
__attribute__((optimize("no-tree-vectorize")))
#endif
void scalar_gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* row = c + i * n;
    std::fill(row, row + n, 0.0f);
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

namespace {

template <class F>
double median_ms(std::size_t reps, F&& fn) {
  std::vector<double> t;
  for (std::size_t r = 0; r < std::max<std::size_t>(reps, 1); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    t.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

}  // namespace

BenchRow bench_gemm(std::size_t size, std::size_t repetitions, std::uint64_t seed) {
  const std::size_t n = size;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  Tensor a({n, n}), bt({n, n});
  std::vector<float> af(n * n), bf(n * n), cf(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    a[i] = coin(rng) ? 1.0 : -1.0;
    af[i] = static_cast<float>(a[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      bt[j * n + i] = coin(rng) ? 1.0 : -1.0;
      bf[i * n + j] = static_cast<float>(bt[j * n + i]);
    }
  }
  const BitTensor pa = sign_quantize(a), pb = sign_quantize(bt);
  IntTensor out;
  BenchRow r;
  r.size = n;
  r.fp_ms = median_ms(repetitions, [&] { scalar_gemm(af.data(), bf.data(), cf.data(), n, n, n); });
  r.binary_ms = median_ms(repetitions, [&] { out = binary_gemm_nt(pa, pb); });
  r.speedup = r.fp_ms / r.binary_ms;
  r.exact = true;
  for (std::size_t i = 0; i < n * n; ++i) r.exact = r.exact && static_cast<float>(out.values[i]) == cf[i];
  r.memory_ratio = 4.0 * static_cast<double>(n) / static_cast<double>(sign_quantize(Tensor({n}, 1.0)).payload_bytes());
  const double macs = static_cast<double>(n) * n * n;
  r.op_count_ratio = ops_estimate(2.0 * macs, 0.0) / ops_estimate(0.0, 2.0 * macs);
  return r;
}

std::string bench_csv_header() {
  return "size,fp_scalar_ms,binary_ms,speedup,memory_ratio,op_count_ratio_convention,exact";
}

std::string bench_csv_row(const BenchRow& r) {
  std::ostringstream os;
  os << r.size << "," << r.fp_ms << "," << r.binary_ms << "," << r.speedup << "," << r.memory_ratio
     << "," << r.op_count_ratio << "," << (r.exact ? 1 : 0);
  return os.str();
}

}  // namespace bimtdp
