#include "bimtdp/bitcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "bimtdp/parallel.hpp"

namespace bimtdp {

BitTensor::BitTensor(Shape shape) : shape_(std::move(shape)) {
  if (shape_.empty()) throw ShapeError("BitTensor: rank-0 shape");
  numel_ = shape_numel(shape_);
  row_length_ = shape_.back();
  rows_ = row_length_ == 0 ? 0 : numel_ / row_length_;
  words_per_row_ = (row_length_ + 63) / 64;
  words_.assign(rows_ * words_per_row_, 0);
}

void BitTensor::set(std::size_t flat, bool positive) {
  set_bit(flat / row_length_, flat % row_length_, positive);
}

std::size_t BitTensor::payload_bytes() const { return rows_ * ((row_length_ + 7) / 8); }

std::size_t BitTensor::dirty_padding_bits() const {
  const std::size_t tail = row_length_ & 63;
  if (tail == 0 || words_per_row_ == 0) return 0;
  const std::uint64_t pad_mask = ~((std::uint64_t{1} << tail) - 1);
  std::size_t dirty = 0;
  for (std::size_t r = 0; r < rows_; ++r) {
    dirty += std::popcount(words_[r * words_per_row_ + words_per_row_ - 1] & pad_mask);
  }
  return dirty;
}

Tensor IntTensor::to_tensor() const {
  Tensor t(shape);
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = values[i];
  return t;
}

BitTensor sign_quantize(const Tensor& t) {
  BitTensor out(t.shape());
  const std::size_t len = out.row_length();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double* src = t.data() + r * len;
    std::uint64_t* dst = out.row_data(r);
    for (std::size_t w = 0; w * 64 < len; ++w) {
      const std::size_t base = w * 64, stop = std::min<std::size_t>(64, len - base);
      std::uint64_t acc = 0;
      bool nan = false;
      for (std::size_t b = 0; b < stop; ++b) {
        const double v = src[base + b];
        nan |= v != v;
        acc |= static_cast<std::uint64_t>(v >= 0.0) << b;
      }
      if (nan) {
        std::size_t b = 0;
        while (!std::isnan(src[base + b])) ++b;
        throw std::domain_error("sign_quantize: NaN at flat index " + std::to_string(r * len + base + b));
      }
      dst[w] = acc;
    }
  }
  return out;
}

Tensor unpack(const BitTensor& b) {
  Tensor out(b.shape());
  const std::size_t len = b.row_length();
  for (std::size_t r = 0; r < b.rows(); ++r) {
    for (std::size_t c = 0; c < len; ++c) out[r * len + c] = b.bit(r, c) ? 1.0 : -1.0;
  }
  return out;
}

namespace {

// Padding bits are zero in both operands, so xor leaves them zero and only
// real mismatches are counted.
inline std::int32_t dot_words(const std::uint64_t* a, const std::uint64_t* b, std::size_t words,
                              std::size_t n) {
  std::size_t mismatches = 0;
  for (std::size_t w = 0; w < words; ++w) mismatches += std::popcount(a[w] ^ b[w]);
  return static_cast<std::int32_t>(n) - 2 * static_cast<std::int32_t>(mismatches);
}

// ORs `nbits` bits from src (zero-padded past nbits) into dst starting at bit `off`.
inline void or_bits(std::uint64_t* dst, std::size_t off, const std::uint64_t* src, std::size_t nbits) {
  for (std::size_t i = 0; i * 64 < nbits; ++i, off += 64) {
    const std::uint64_t v = src[i];
    const std::size_t shift = off & 63;
    dst[off >> 6] |= v << shift;
    if (shift != 0) {
      const std::uint64_t hi = v >> (64 - shift);
      if (hi) dst[(off >> 6) + 1] |= hi;
    }
  }
}

}  // namespace

std::int64_t xnor_popcount_dot(const BitTensor& a, const BitTensor& b) {
  if (a.shape().size() != 1 || b.shape().size() != 1) {
    throw ShapeError("xnor_popcount_dot: operands must be rank 1");
  }
  if (a.numel() != b.numel()) {
    throw ShapeError("xnor_popcount_dot: length mismatch " + std::to_string(a.numel()) + " vs " +
                     std::to_string(b.numel()));
  }
  if (a.numel() == 0) return 0;
  return dot_words(a.row(0).data(), b.row(0).data(), a.words_per_row(), a.numel());
}

BitTensor transpose_bits(const BitTensor& m) {
  if (m.shape().size() != 2) throw ShapeError("transpose_bits: rank-2 operand required");
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  BitTensor t({cols, rows});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (m.bit(r, c)) t.set_bit(c, r, true);
    }
  }
  return t;
}

IntTensor binary_gemm_nt(const BitTensor& a, const BitTensor& bt) {
  if (a.shape().size() != 2 || bt.shape().size() != 2) {
    throw ShapeError("binary_gemm: rank-2 operands required");
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = bt.shape()[0];
  if (bt.shape()[1] != k) {
    throw ShapeError("binary_gemm: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(bt.shape()) + "^T");
  }
  IntTensor out{{m, n}, std::vector<std::int32_t>(m * n)};
  const std::size_t words = a.words_per_row();
  if (k == 0) return out;

  // Column blocks keep a slab of Bt hot while rows of A stream past it.
  constexpr std::size_t kColBlock = 64;
  parallel_for(0, m, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t j1 = std::min(n, j0 + kColBlock);
      for (std::size_t i = r0; i < r1; ++i) {
        const std::uint64_t* arow = a.row(i).data();
        std::int32_t* orow = out.values.data() + i * n;
        std::size_t j = j0;
        for (; j + 4 <= j1; j += 4) {
          const std::uint64_t* b0 = bt.row(j).data();
          const std::uint64_t* b1 = bt.row(j + 1).data();
          const std::uint64_t* b2 = bt.row(j + 2).data();
          const std::uint64_t* b3 = bt.row(j + 3).data();
          std::size_t c0 = 0, c1 = 0, c2 = 0, c3 = 0;
          for (std::size_t w = 0; w < words; ++w) {
            const std::uint64_t av = arow[w];
            c0 += std::popcount(av ^ b0[w]);
            c1 += std::popcount(av ^ b1[w]);
            c2 += std::popcount(av ^ b2[w]);
            c3 += std::popcount(av ^ b3[w]);
          }
          const auto kk = static_cast<std::int32_t>(k);
          orow[j] = kk - 2 * static_cast<std::int32_t>(c0);
          orow[j + 1] = kk - 2 * static_cast<std::int32_t>(c1);
          orow[j + 2] = kk - 2 * static_cast<std::int32_t>(c2);
          orow[j + 3] = kk - 2 * static_cast<std::int32_t>(c3);
        }
        for (; j < j1; ++j) orow[j] = dot_words(arow, bt.row(j).data(), words, k);
      }
    }
  });
  return out;
}

IntTensor binary_gemm(const BitTensor& a, const BitTensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw ShapeError("binary_gemm: rank-2 operands required");
  }
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("binary_gemm: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  return binary_gemm_nt(a, transpose_bits(b));
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t padding) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv: kernel " + std::to_string(kernel) + " does not fit padded input " +
                     std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

BitTensor extract_patches(const BitTensor& input, std::size_t kh, std::size_t kw,
                          ConvGeometry geom) {
  if (input.shape().size() != 4) throw ShapeError("extract_patches: input must be N x C x H x W");
  const std::size_t n = input.shape()[0], c = input.shape()[1], h = input.shape()[2],
                    w = input.shape()[3];
  const std::size_t oh = conv_out_extent(h, kh, geom.stride, geom.padding);
  const std::size_t ow = conv_out_extent(w, kw, geom.stride, geom.padding);
  const std::size_t k = c * kh * kw;
  BitTensor patches({n * oh * ow, k});
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  parallel_for(0, n * oh, [&](std::size_t b, std::size_t e) {
    for (std::size_t noy = b; noy < e; ++noy) {
      const std::size_t img = noy / oh, oy = noy % oh;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::uint64_t* dst = patches.row_data(noy * ow + ox);
        std::size_t col = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t plane_row = (img * c + ch) * h;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
            const bool row_in = iy >= 0 && iy < static_cast<std::ptrdiff_t>(h);
            for (std::size_t kx = 0; kx < kw; ++kx, ++col) {
              if (!row_in) continue;
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              if (input.bit(plane_row + static_cast<std::size_t>(iy), static_cast<std::size_t>(ix))) {
                dst[col >> 6] |= std::uint64_t{1} << (col & 63);
              }
            }
          }
        }
      }
    }
  });
  return patches;
}

IntTensor binary_conv2d(const BitTensor& input, const BitTensor& weight, ConvGeometry geom) {
  if (input.shape().size() != 4 || weight.shape().size() != 4) {
    throw ShapeError("binary_conv2d: input and weight must be rank 4");
  }
  const std::size_t n = input.shape()[0], c = input.shape()[1];
  const std::size_t o = weight.shape()[0], kh = weight.shape()[2], kw = weight.shape()[3];
  if (weight.shape()[1] != c) {
    throw ShapeError("binary_conv2d: weight expects " + std::to_string(weight.shape()[1]) +
                     " channels, input has " + std::to_string(c));
  }
  const std::size_t oh = conv_out_extent(input.shape()[2], kh, geom.stride, geom.padding);
  const std::size_t ow = conv_out_extent(input.shape()[3], kw, geom.stride, geom.padding);
  const std::size_t k = c * kh * kw;

  // Internally K is ordered (ky, kx, channel) so that each tap copies a whole
  // run of channel bits instead of single bits. Both operands use the same
  // order, which leaves every dot product unchanged.
  const std::size_t h = input.shape()[2], w = input.shape()[3];
  BitTensor pixels({n * h * w, c});
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        const std::size_t src_row = (img * c + ch) * h + y;
        for (std::size_t x = 0; x < w; ++x) {
          if (input.bit(src_row, x)) pixels.set_bit((img * h + y) * w + x, ch, true);
        }
      }
    }
  }
  BitTensor wrows({o, k});
  for (std::size_t r = 0; r < o; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          if (weight.bit((r * c + ch) * kh + ky, kx)) wrows.set_bit(r, (ky * kw + kx) * c + ch, true);
        }
      }
    }
  }
  BitTensor patches({n * oh * ow, k});
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  parallel_for(0, n * oh, [&](std::size_t b, std::size_t e) {
    for (std::size_t noy = b; noy < e; ++noy) {
      const std::size_t img = noy / oh, oy = noy % oh;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::uint64_t* dst = patches.row_data(noy * ow + ox);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t src = (img * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            or_bits(dst, (ky * kw + kx) * c, pixels.row_data(src), c);
          }
        }
      }
    }
  });
  const IntTensor flat = binary_gemm_nt(patches, wrows);

  IntTensor out{{n, o, oh, ow}, std::vector<std::int32_t>(n * o * oh * ow)};
  const std::size_t plane = oh * ow;
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::int32_t* src = flat.values.data() + (img * plane + p) * o;
      for (std::size_t ch = 0; ch < o; ++ch) out.values[(img * o + ch) * plane + p] = src[ch];
    }
  }
  return out;
}

std::uint64_t memory_footprint(std::uint64_t fp_param_count, std::uint64_t binary_param_count) {
  return 4 * fp_param_count + (binary_param_count + 7) / 8;
}

double ops_estimate(double fp_flops, double binary_ops) { return fp_flops + binary_ops / 64.0; }

}  // namespace bimtdp
