#pragma once

// Binary GEMM versus a scalar single-precision GEMM.

#include <cstdint>
#include <string>
#include <vector>

namespace bimtdp {

/// C = A B for row-major float matrices, one multiply-add at a time. Compiled
/// without auto-vectorization so it stays a scalar reference.
void scalar_gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n);

struct BenchRow {
  std::size_t size = 0;  // M = K = N
  double fp_ms = 0.0;    // median
  double binary_ms = 0.0;
  double speedup = 0.0;
  /// fp32 bytes of one length-`size` operand row over its packed payload bytes.
  double memory_ratio = 0.0;
  /// ops_estimate(2 M N K FP ops) / ops_estimate(M N K binary ops): the 64x
  /// op-count convention, not a measurement.
  double op_count_ratio = 0.0;
  bool exact = false;
};

BenchRow bench_gemm(std::size_t size, std::size_t repetitions, std::uint64_t seed = 1);

std::string bench_csv_header();
std::string bench_csv_row(const BenchRow& r);

}  // namespace bimtdp
