#include "bimtdp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace bimtdp::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.data();
  double* dst = out.data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] = f(src[i]);
  return out;
}

// Backward for y = f(x) elementwise, with dy/dx computed from (x, y).
template <typename D>
Var unary(Tape& t, OpId op, const Var& a, Tensor value, D deriv) {
  return t.record(op, std::move(value), {a}, [deriv](Node& self) {
    const Var& in = self.inputs[0];
    if (!in->requires_grad) return;
    double* g = in->grad_buffer().data();
    const double* x = in->value.data();
    const double* y = self.value.data();
    const double* gy = self.grad.data();
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += gy[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

Var add(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return t.record(OpId::Add, std::move(out), {a, b}, [](Node& self) {
    accumulate_grad(self.inputs[0], self.grad);
    accumulate_grad(self.inputs[1], self.grad);
  });
}

Var sub(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return t.record(OpId::Sub, std::move(out), {a, b}, [](Node& self) {
    accumulate_grad(self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(Tape& t, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return t.record(OpId::Mul, std::move(out), {a, b}, [](Node& self) {
    const Var& x = self.inputs[0];
    const Var& y = self.inputs[1];
    if (x->requires_grad) {
      Tensor& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y->value[i];
    }
    if (y->requires_grad) {
      Tensor& g = y->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x->value[i];
    }
  });
}

Var scale(Tape& t, const Var& a, double s) {
  return unary(t, OpId::Scale, a, map_unary(a->value, [s](double v) { return v * s; }),
               [s](double, double) { return s; });
}

Var add_scalar(Tape& t, const Var& a, double s) {
  return unary(t, OpId::AddScalar, a, map_unary(a->value, [s](double v) { return v + s; }),
               [](double, double) { return 1.0; });
}

Var sum(Tape& t, const Var& a) {
  double acc = 0.0;
  for (double v : a->value.values()) acc += v;
  return t.record(OpId::Sum, Tensor::scalar(acc), {a}, [](Node& self) {
    const Var& in = self.inputs[0];
    if (!in->requires_grad) return;
    const double g0 = self.grad[0];
    for (double& g : in->grad_buffer().values()) g += g0;
  });
}

Var mean(Tape& t, const Var& a) {
  if (a->value.size() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (double v : a->value.values()) acc += v;
  const double n = static_cast<double>(a->value.size());
  return t.record(OpId::Mean, Tensor::scalar(acc / n), {a}, [n](Node& self) {
    const Var& in = self.inputs[0];
    if (!in->requires_grad) return;
    const double g0 = self.grad[0] / n;
    for (double& g : in->grad_buffer().values()) g += g0;
  });
}

Var square(Tape& t, const Var& a) {
  return unary(t, OpId::Square, a, map_unary(a->value, [](double v) { return v * v; }),
               [](double x, double) { return 2.0 * x; });
}

Var exp(Tape& t, const Var& a) {
  return unary(t, OpId::Exp, a, map_unary(a->value, [](double v) { return std::exp(v); }),
               [](double, double y) { return y; });
}

Var sigmoid(Tape& t, const Var& a) {
  return unary(t, OpId::Sigmoid, a,
               map_unary(a->value, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }),
               [](double, double y) { return y * (1.0 - y); });
}

Var hardtanh(Tape& t, const Var& a) {
  return unary(t, OpId::HardTanh, a,
               map_unary(a->value, [](double v) { return std::clamp(v, -1.0, 1.0); }),
               [](double x, double) { return std::abs(x) <= 1.0 ? 1.0 : 0.0; });
}

Var clamp(Tape& t, const Var& a, double lo, double hi) {
  return unary(t, OpId::Clamp, a,
               map_unary(a->value, [lo, hi](double v) { return std::clamp(v, lo, hi); }),
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

namespace {
Tensor sign_values(const Tensor& x) {
  if (std::any_of(x.values().begin(), x.values().end(), [](double v) { return std::isnan(v); })) {
    throw std::domain_error("sign: NaN input");
  }
  return map_unary(x, [](double v) { return v >= 0.0 ? 1.0 : -1.0; });
}
}  // namespace

Var ste_sign(Tape& t, const Var& x) {
  return unary(t, OpId::SteSign, x, sign_values(x->value),
               [](double v, double) { return std::abs(v) <= 1.0 ? 1.0 : 0.0; });
}

double approx_sign_derivative(double x) {
  if (x >= -1.0 && x < 0.0) return 2.0 + 2.0 * x;
  if (x >= 0.0 && x < 1.0) return 2.0 - 2.0 * x;
  return 0.0;
}

Var approx_sign(Tape& t, const Var& x) {
  return unary(t, OpId::ApproxSign, x, sign_values(x->value),
               [](double v, double) { return approx_sign_derivative(v); });
}

Var sign(Tape& t, const Var& x, Estimator est) {
  return est == Estimator::Ste ? ste_sign(t, x) : approx_sign(t, x);
}

Var bool_gate(Tape& t, const Var& x, Estimator est) {
  return add_scalar(t, scale(t, sign(t, x, est), 0.5), 0.5);
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, o, kh, kw, oh, ow;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, ConvGeometry geom, const char* what) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError(std::string(what) + ": input " + shape_str(x.shape()) + " and weight " +
                     shape_str(w.shape()) + " must be rank 4");
  }
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError(std::string(what) + ": weight expects " + std::to_string(w.dim(1)) +
                     " channels, input has " + std::to_string(x.dim(1)));
  }
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0};
  d.oh = conv_out_extent(d.h, d.kh, geom.stride, geom.padding);
  d.ow = conv_out_extent(d.w, d.kw, geom.stride, geom.padding);
  return d;
}

// First output column whose tap kx lands at input column >= 0.
std::size_t span_begin(std::size_t kx, std::ptrdiff_t pad, std::size_t stride) {
  const std::ptrdiff_t need = pad - static_cast<std::ptrdiff_t>(kx);
  if (need <= 0) return 0;
  return (static_cast<std::size_t>(need) + stride - 1) / stride;
}

// One past the last output column whose tap kx lands at input column < w.
std::size_t span_end(std::size_t kx, std::ptrdiff_t pad, std::size_t stride, std::size_t w,
                     std::size_t ow) {
  const std::ptrdiff_t limit = static_cast<std::ptrdiff_t>(w) + pad - static_cast<std::ptrdiff_t>(kx);
  if (limit <= 0) return 0;
  return std::min(ow, (static_cast<std::size_t>(limit) + stride - 1) / stride);
}

// K x (N*P) patch matrix; taps falling outside the input read pad_value.
AlignedVector im2col(const Tensor& x, const ConvDims& d, ConvGeometry geom,
                           double pad_value) {
  const std::size_t np = d.n * d.p();
  AlignedVector cols(d.k() * np);
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  for (std::size_t ch = 0; ch < d.c; ++ch) {
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        double* row = cols.data() + ((ch * d.kh + ky) * d.kw + kx) * np;
        for (std::size_t img = 0; img < d.n; ++img) {
          const double* plane = x.data() + (img * d.c + ch) * d.h * d.w;
          double* dst = row + img * d.p();
          for (std::size_t oy = 0; oy < d.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
              std::fill(dst + oy * d.ow, dst + (oy + 1) * d.ow, pad_value);
              continue;
            }
            const double* src = plane + static_cast<std::size_t>(iy) * d.w;
            double* out = dst + oy * d.ow;
            // Output columns [lo, hi) read inside the row; the rest are padding.
            const std::size_t lo = std::min(d.ow, span_begin(kx, pad, geom.stride));
            const std::size_t hi = std::max(lo, span_end(kx, pad, geom.stride, d.w, d.ow));
            std::fill(out, out + lo, pad_value);
            if (hi > lo) {
              const double* in = src + (lo * geom.stride + kx - static_cast<std::size_t>(pad));
              if (geom.stride == 1) {
                std::copy(in, in + (hi - lo), out + lo);
              } else {
                for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = in[(ox - lo) * geom.stride];
              }
            }
            std::fill(out + hi, out + d.ow, pad_value);
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const AlignedVector& cols, const ConvDims& d, ConvGeometry geom,
                Tensor& dx) {
  const std::size_t np = d.n * d.p();
  const auto pad = static_cast<std::ptrdiff_t>(geom.padding);
  for (std::size_t ch = 0; ch < d.c; ++ch) {
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        const double* row = cols.data() + ((ch * d.kh + ky) * d.kw + kx) * np;
        for (std::size_t img = 0; img < d.n; ++img) {
          double* plane = dx.data() + (img * d.c + ch) * d.h * d.w;
          const double* src = row + img * d.p();
          for (std::size_t oy = 0; oy < d.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
            double* dst = plane + static_cast<std::size_t>(iy) * d.w;
            for (std::size_t ox = 0; ox < d.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) continue;
              dst[static_cast<std::size_t>(ix)] += src[oy * d.ow + ox];
            }
          }
        }
      }
    }
  }
}

// N x O x P  <->  O x (N*P)
AlignedVector to_channel_major(const Tensor& g, const ConvDims& d) {
  AlignedVector m(d.o * d.n * d.p());
  for (std::size_t img = 0; img < d.n; ++img) {
    for (std::size_t oc = 0; oc < d.o; ++oc) {
      const double* src = g.data() + (img * d.o + oc) * d.p();
      std::copy(src, src + d.p(), m.data() + oc * d.n * d.p() + img * d.p());
    }
  }
  return m;
}

void conv_backward(Node& self, const ConvDims& d, ConvGeometry geom, double pad_value,
                   bool has_bias) {
  const Var& x = self.inputs[0];
  const Var& w = self.inputs[1];
  const std::size_t np = d.n * d.p();
  const AlignedVector gm = to_channel_major(self.grad, d);
  ConstMatMap gmat(gm.data(), static_cast<Eigen::Index>(d.o), static_cast<Eigen::Index>(np));
  if (w->requires_grad) {
    const AlignedVector cols = im2col(x->value, d, geom, pad_value);
    ConstMatMap cmat(cols.data(), static_cast<Eigen::Index>(d.k()), static_cast<Eigen::Index>(np));
    MatMap dw(w->grad_buffer().data(), static_cast<Eigen::Index>(d.o),
              static_cast<Eigen::Index>(d.k()));
    dw.noalias() += gmat * cmat.transpose();
  }
  if (x->requires_grad) {
    ConstMatMap wmat(w->value.data(), static_cast<Eigen::Index>(d.o),
                     static_cast<Eigen::Index>(d.k()));
    AlignedVector dcols(d.k() * np);
    MatMap dc(dcols.data(), static_cast<Eigen::Index>(d.k()), static_cast<Eigen::Index>(np));
    dc.noalias() = wmat.transpose() * gmat;
    col2im_add(dcols, d, geom, x->grad_buffer());
  }
  if (has_bias && self.inputs[2]->requires_grad) {
    Tensor& db = self.inputs[2]->grad_buffer();
    for (std::size_t oc = 0; oc < d.o; ++oc) {
      db[oc] += gmat.row(static_cast<Eigen::Index>(oc)).sum();
    }
  }
}

}  // namespace

Var conv2d(Tape& t, const Var& x, const Var& w, const Var& bias, ConvGeometry geom) {
  const ConvDims d = conv_dims(x->value, w->value, geom, "conv2d");
  if (bias && bias->value.size() != d.o) throw ShapeError("conv2d: bias length mismatch");
  const std::size_t np = d.n * d.p();
  const AlignedVector cols = im2col(x->value, d, geom, 0.0);
  AlignedVector om(d.o * np);
  {
    ConstMatMap wmat(w->value.data(), static_cast<Eigen::Index>(d.o),
                     static_cast<Eigen::Index>(d.k()));
    ConstMatMap cmat(cols.data(), static_cast<Eigen::Index>(d.k()), static_cast<Eigen::Index>(np));
    MatMap out(om.data(), static_cast<Eigen::Index>(d.o), static_cast<Eigen::Index>(np));
    out.noalias() = wmat * cmat;
  }
  Tensor y({d.n, d.o, d.oh, d.ow});
  for (std::size_t img = 0; img < d.n; ++img) {
    for (std::size_t oc = 0; oc < d.o; ++oc) {
      const double b = bias ? bias->value[oc] : 0.0;
      const double* src = om.data() + oc * np + img * d.p();
      double* dst = y.data() + (img * d.o + oc) * d.p();
      for (std::size_t p = 0; p < d.p(); ++p) dst[p] = src[p] + b;
    }
  }
  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(bias);
  const bool has_bias = static_cast<bool>(bias);
  return t.record(OpId::Conv2d, std::move(y), std::move(inputs),
                  [d, geom, has_bias](Node& self) { conv_backward(self, d, geom, 0.0, has_bias); });
}

namespace {
void require_pm_one(const Tensor& v, const char* what) {
  bool bad = false;
  for (double e : v.values()) bad |= (e != 1.0) & (e != -1.0);
  if (!bad) return;
  for (double e : v.values()) {
    if (e != 1.0 && e != -1.0) {
      throw std::domain_error(std::string("binary_conv2d: ") + what + " holds non-binary value " +
                              std::to_string(e));
    }
  }
}
}  // namespace

Var binary_conv2d(Tape& t, const Var& xb, const Var& wb, ConvGeometry geom) {
  const ConvDims d = conv_dims(xb->value, wb->value, geom, "binary_conv2d");
  require_pm_one(xb->value, "input");
  require_pm_one(wb->value, "weight");
  Tensor y = bimtdp::binary_conv2d(sign_quantize(xb->value), sign_quantize(wb->value), geom)
                 .to_tensor();
  return t.record(OpId::BinaryConv2d, std::move(y), {xb, wb},
                  [d, geom](Node& self) { conv_backward(self, d, geom, -1.0, false); });
}

Var batch_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
               Mode mode, double momentum, double eps) {
  require_rank(x->value, 4, "batch_norm");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1);
  const std::size_t plane = x->value.dim(2) * x->value.dim(3);
  if (gamma->value.size() != c || beta->value.size() != c || stats.running_mean.size() != c) {
    throw ShapeError("batch_norm: " + std::to_string(c) + " channels, parameters sized " +
                     std::to_string(gamma->value.size()));
  }
  const std::size_t m = n * plane;
  if (mode == Mode::Train && m == 0) throw ShapeError("batch_norm: empty batch in train mode");

  std::vector<double> mu(c), inv_std(c);
  if (mode == Mode::Train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t img = 0; img < n; ++img) {
        const double* p = x->value.data() + (img * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mean_c = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t img = 0; img < n; ++img) {
        const double* p = x->value.data() + (img * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean_c) * (p[i] - mean_c);
      }
      const double var_c = ss / static_cast<double>(m);
      mu[ch] = mean_c;
      inv_std[ch] = 1.0 / std::sqrt(var_c + eps);
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var_c;
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * mean_c;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }

  Tensor xhat(x->value.shape());
  Tensor y(x->value.shape());
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (img * c + ch) * plane;
      const double g = gamma->value[ch], b = beta->value[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x->value[off + i] - mu[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        y[off + i] = g * xh + b;
      }
    }
  }
  const bool train = mode == Mode::Train;
  return t.record(
      OpId::BatchNorm, std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, n, c, plane, m, train](Node& self) {
        const Var& in = self.inputs[0];
        const Var& gam = self.inputs[1];
        const Var& bet = self.inputs[2];
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t img = 0; img < n; ++img) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (img * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g[ch] += self.grad[off + i];
              sum_gx[ch] += self.grad[off + i] * xhat[off + i];
            }
          }
        }
        if (gam->requires_grad) {
          Tensor& gg = gam->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (bet->requires_grad) {
          Tensor& gb = bet->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (!in->requires_grad) return;
        Tensor& gx = in->grad_buffer();
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::size_t img = 0; img < n; ++img) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (img * c + ch) * plane;
            const double k = gam->value[ch] * inv_std[ch];
            for (std::size_t i = 0; i < plane; ++i) {
              const double g = self.grad[off + i];
              gx[off + i] += train ? k * (g - inv_m * sum_g[ch] - xhat[off + i] * inv_m * sum_gx[ch])
                                   : k * g;
            }
          }
        }
      });
}

namespace {
struct Interp {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Interp interp_table(std::size_t in, std::size_t out) {
  Interp t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t l = static_cast<std::size_t>(src);
    if (l > in - 1) l = in - 1;
    t.lo[i] = l;
    t.hi[i] = std::min(l + 1, in - 1);
    t.frac[i] = src - static_cast<double>(l);
  }
  return t;
}
}  // namespace

Var upsample_bilinear(Tape& t, const Var& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x->value, 4, "upsample_bilinear");
  const std::size_t n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2),
                    w = x->value.dim(3);
  if (h == out_h && w == out_w) return x;
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0) throw ShapeError("upsample_bilinear: empty extent");
  Interp ty = interp_table(h, out_h), tx = interp_table(w, out_w);
  Tensor y({n, c, out_h, out_w});
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const double* src = x->value.data() + nc * h * w;
    double* dst = y.data() + nc * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double fy = ty.frac[oy];
      const double* r0 = src + ty.lo[oy] * w;
      const double* r1 = src + ty.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double fx = tx.frac[ox];
        const double top = r0[tx.lo[ox]] * (1.0 - fx) + r0[tx.hi[ox]] * fx;
        const double bot = r1[tx.lo[ox]] * (1.0 - fx) + r1[tx.hi[ox]] * fx;
        dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
      }
    }
  }
  return t.record(OpId::Upsample, std::move(y), {x},
                  [ty = std::move(ty), tx = std::move(tx), n, c, h, w, out_h, out_w](Node& self) {
                    const Var& in = self.inputs[0];
                    if (!in->requires_grad) return;
                    Tensor& gx = in->grad_buffer();
                    for (std::size_t nc = 0; nc < n * c; ++nc) {
                      double* dst = gx.data() + nc * h * w;
                      const double* g = self.grad.data() + nc * out_h * out_w;
                      for (std::size_t oy = 0; oy < out_h; ++oy) {
                        const double fy = ty.frac[oy];
                        double* r0 = dst + ty.lo[oy] * w;
                        double* r1 = dst + ty.hi[oy] * w;
                        for (std::size_t ox = 0; ox < out_w; ++ox) {
                          const double fx = tx.frac[ox];
                          const double gv = g[oy * out_w + ox];
                          r0[tx.lo[ox]] += gv * (1.0 - fy) * (1.0 - fx);
                          r0[tx.hi[ox]] += gv * (1.0 - fy) * fx;
                          r1[tx.lo[ox]] += gv * fy * (1.0 - fx);
                          r1[tx.hi[ox]] += gv * fy * fx;
                        }
                      }
                    }
                  });
}

Var concat_channels(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = parts.front()->value;
  require_rank(first, 4, "concat_channels");
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p->value, 4, "concat_channels");
    if (p->value.dim(0) != n || p->value.dim(2) != h || p->value.dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_str(p->value.shape()) + " vs " +
                       shape_str(first.shape()));
    }
    chans.push_back(p->value.dim(1));
    total += p->value.dim(1);
  }
  const std::size_t plane = h * w;
  Tensor y({n, total, h, w});
  for (std::size_t img = 0; img < n; ++img) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k]->value.data() + img * chans[k] * plane;
      std::copy(src, src + chans[k] * plane, y.data() + (img * total + offset) * plane);
      offset += chans[k];
    }
  }
  return t.record(OpId::Concat, std::move(y), parts, [chans, n, total, plane](Node& self) {
    for (std::size_t img = 0; img < n; ++img) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        const Var& in = self.inputs[k];
        if (in->requires_grad) {
          double* dst = in->grad_buffer().data() + img * chans[k] * plane;
          const double* src = self.grad.data() + (img * total + offset) * plane;
          for (std::size_t i = 0; i < chans[k] * plane; ++i) dst[i] += src[i];
        }
        offset += chans[k];
      }
    }
  });
}

Var mse(Tape& t, const Var& a, const Var& b) { return mean(t, square(t, sub(t, a, b))); }

}  // namespace bimtdp::ops
