#pragma once

// Bit-packed +/-1 tensors and exact xnor-popcount linear algebra.
//
// Encoding: bit 1 <-> +1, bit 0 <-> -1. Elements are packed row-major along the
// innermost dimension into 64-bit words; every innermost row starts on a fresh
// word and unused high bits of the last word stay zero.

#include <cstdint>
#include <span>
#include <vector>

#include "bimtdp/tensor.hpp"

namespace bimtdp {

class BitTensor {
 public:
  BitTensor() = default;
  /// All elements -1.
  explicit BitTensor(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return numel_; }
  std::size_t rows() const { return rows_; }
  std::size_t row_length() const { return row_length_; }
  std::size_t words_per_row() const { return words_per_row_; }

  std::span<const std::uint64_t> words() const { return words_; }
  std::span<const std::uint64_t> row(std::size_t r) const {
    return {words_.data() + r * words_per_row_, words_per_row_};
  }
  std::uint64_t* row_data(std::size_t r) { return words_.data() + r * words_per_row_; }

  /// +1 or -1 at a row-major flat index.
  int get(std::size_t flat) const {
    const std::size_t r = flat / row_length_, c = flat % row_length_;
    return (words_[r * words_per_row_ + (c >> 6)] >> (c & 63)) & 1u ? 1 : -1;
  }
  bool bit(std::size_t r, std::size_t c) const {
    return (words_[r * words_per_row_ + (c >> 6)] >> (c & 63)) & 1u;
  }
  void set(std::size_t flat, bool positive);
  void set_bit(std::size_t r, std::size_t c, bool positive) {
    const std::uint64_t m = std::uint64_t{1} << (c & 63);
    auto& w = words_[r * words_per_row_ + (c >> 6)];
    w = positive ? (w | m) : (w & ~m);
  }

  /// Bytes needed to hold the packed rows (ceil(row_length/8) per row).
  std::size_t payload_bytes() const;

  /// Count of padding bits that are set. Always zero for a well-formed tensor.
  std::size_t dirty_padding_bits() const;

  bool operator==(const BitTensor& other) const = default;

 private:
  Shape shape_;
  std::size_t numel_ = 0;
  std::size_t rows_ = 0;
  std::size_t row_length_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

/// Signed integer accumulator produced by the binary kernels.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> values;

  std::size_t size() const { return values.size(); }
  std::int32_t operator[](std::size_t i) const { return values[i]; }
  Tensor to_tensor() const;
};

/// +1 where t >= 0, -1 otherwise. Throws on NaN.
BitTensor sign_quantize(const Tensor& t);

/// Expands to a tensor of +/-1 doubles.
Tensor unpack(const BitTensor& b);

/// 2 * popcount(xnor(a, b)) - n for two rank-1 operands of equal length.
std::int64_t xnor_popcount_dot(const BitTensor& a, const BitTensor& b);

/// A (M x K) times B (K x N).
IntTensor binary_gemm(const BitTensor& a, const BitTensor& b);

/// A (M x K) times transpose(Bt) with Bt given as N x K. The building block
/// for both binary_gemm and binary_conv2d.
IntTensor binary_gemm_nt(const BitTensor& a, const BitTensor& bt);

/// Transposes a rank-2 bit matrix.
BitTensor transpose_bits(const BitTensor& m);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding);

/// Patch matrix [N*OH*OW, C*KH*KW]; out-of-bounds taps read as -1.
BitTensor extract_patches(const BitTensor& input, std::size_t kh, std::size_t kw,
                          ConvGeometry geom);

/// Cross-correlation of +/-1 operands with -1 padding. Output N x O x OH x OW.
IntTensor binary_conv2d(const BitTensor& input, const BitTensor& weight, ConvGeometry geom);

/// Bytes to store fp_count float32 parameters and binary_count 1-bit parameters.
std::uint64_t memory_footprint(std::uint64_t fp_param_count, std::uint64_t binary_param_count);

/// Effective FLOPs when binary operations are weighted 1/64.
double ops_estimate(double fp_flops, double binary_ops);

}  // namespace bimtdp
