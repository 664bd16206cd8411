// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cellprompt/errors.hpp"

namespace cellprompt {

namespace kernels {

namespace {
// Cache blocks over k and n with a 4×8 register tile. Every output element
// still accumulates p = 0..k-1 in order, starting from its incoming value.
constexpr std::size_t kDepthBlock = 128;
constexpr std::size_t kColBlock = 256;
constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

// a(i, p) = a[i * rs + p * cs]; b is row-major k×n.
void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t rs, std::size_t cs,
                  const double* b, double* c) {
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t p1 = std::min(k, p0 + kDepthBlock);
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t j1 = std::min(n, j0 + kColBlock);
      for (std::size_t i0 = 0; i0 < m; i0 += kTileRows) {
        const std::size_t mr = std::min(kTileRows, m - i0);
        double pack[kDepthBlock][kTileRows] = {};
        for (std::size_t p = p0; p < p1; ++p) {
          for (std::size_t r = 0; r < mr; ++r) pack[p - p0][r] = a[(i0 + r) * rs + p * cs];
        }
        for (std::size_t jt = j0; jt < j1; jt += kTileCols) {
          const std::size_t nr = std::min(kTileCols, j1 - jt);
          if (mr == kTileRows && nr == kTileCols) {
            double acc[kTileRows][kTileCols];
            for (std::size_t r = 0; r < kTileRows; ++r) {
              for (std::size_t q = 0; q < kTileCols; ++q) acc[r][q] = c[(i0 + r) * n + jt + q];
            }
            for (std::size_t p = p0; p < p1; ++p) {
              const double* bp = b + p * n + jt;
              const double* ap = pack[p - p0];
              for (std::size_t r = 0; r < kTileRows; ++r) {
                for (std::size_t q = 0; q < kTileCols; ++q) acc[r][q] += ap[r] * bp[q];
              }
            }
            for (std::size_t r = 0; r < kTileRows; ++r) {
              for (std::size_t q = 0; q < kTileCols; ++q) c[(i0 + r) * n + jt + q] = acc[r][q];
            }
          } else {
            for (std::size_t r = 0; r < mr; ++r) {
              double* ci = c + (i0 + r) * n;
              for (std::size_t p = p0; p < p1; ++p) {
                const double av = pack[p - p0][r];
                const double* bp = b + p * n;
                for (std::size_t q = jt; q < jt + nr; ++q) ci[q] += av * bp[q];
              }
            }
          }
        }
      }
    }
  }
}
}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, k, 1, b, c);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  gemm_strided(m, n, k, a, 1, m, b, c);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  constexpr std::size_t kTile = 32;
  std::vector<double> bt(k * n);
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t j1 = std::min(n, j0 + kTile);
    for (std::size_t p0 = 0; p0 < k; p0 += kTile) {
      const std::size_t p1 = std::min(k, p0 + kTile);
      for (std::size_t j = j0; j < j1; ++j) {
        for (std::size_t p = p0; p < p1; ++p) bt[p * n + j] = b[j * k + p];
      }
    }
  }
  gemm_nn(m, n, k, a, bt.data(), c);
}

}  // namespace kernels

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_chw(const Tensor& t, const char* op) {
  if (t.ndim() != 3) {
    throw DimensionError(std::string(op) + ": expected C×H×W, got " + shape_str(t.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.size() == 1; }

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor y = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  if (a.shape() == b.shape()) {
    Tensor y = Tensor::zeros_like(a);
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = f(a[i], b[i]);
    return y;
  }
  if (is_scalar(b)) {
    const double s = b[0];
    return map(a, [&](double v) { return f(v, s); });
  }
  if (is_scalar(a)) {
    const double s = a[0];
    return map(b, [&](double v) { return f(s, v); });
  }
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

// Reduces dy to the operand's shape (sums when the operand was broadcast).
Tensor reduce_to(const Tensor& operand, const Tensor& dy) {
  if (operand.shape() == dy.shape()) return dy;
  return Tensor::scalar(dy.sum());
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::gemm_nn(a.dim(0), b.dim(1), a.dim(1), a.ptr(), b.ptr(), c.ptr());
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()) + "ᵀ");
  }
  Tensor c({a.dim(0), b.dim(0)});
  kernels::gemm_nt(a.dim(0), b.dim(0), a.dim(1), a.ptr(), b.ptr(), c.ptr());
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: inner dimensions differ, " + shape_str(a.shape()) + "ᵀ · " +
                         shape_str(b.shape()));
  }
  Tensor c({a.dim(1), b.dim(1)});
  kernels::gemm_tn(a.dim(1), b.dim(1), a.dim(0), a.ptr(), b.ptr(), c.ptr());
  return c;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc) {
  if (dc.ndim() != 2 || dc.dim(0) != a.dim(0) || dc.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_backward: upstream gradient " + shape_str(dc.shape()) +
                         " does not match product of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor neg(const Tensor& x) {
  return map(x, [](double v) { return -v; });
}

Tensor scale(const Tensor& x, double s) {
  return map(x, [s](double v) { return v * s; });
}

void add_inplace(Tensor& acc, const Tensor& x) {
  check_same_shape(acc, x, "add_inplace");
  double* p = acc.ptr();
  const double* q = x.ptr();
  for (std::size_t i = 0; i < acc.size(); ++i) p[i] += q[i];
}

void axpy_inplace(Tensor& acc, double alpha, const Tensor& x) {
  check_same_shape(acc, x, "axpy_inplace");
  double* p = acc.ptr();
  const double* q = x.ptr();
  for (std::size_t i = 0; i < acc.size(); ++i) p[i] += alpha * q[i];
}

BinaryGrads add_backward(const Tensor& a, const Tensor& b, const Tensor& dy) {
  return {reduce_to(a, dy), reduce_to(b, dy)};
}

BinaryGrads mul_backward(const Tensor& a, const Tensor& b, const Tensor& dy) {
  return {reduce_to(a, mul(dy, b)), reduce_to(b, mul(dy, a))};
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  return map(x, [](double v) { return sigmoid(v); });
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
  check_same_shape(y, dy, "sigmoid_backward");
  Tensor dx = Tensor::zeros_like(y);
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
  return dx;
}

Tensor relu(const Tensor& x) {
  return map(x, [](double v) { return v < 0.0 ? 0.0 : v; });  // NaN passes through
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  check_same_shape(x, dy, "relu_backward");
  Tensor dx = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

Tensor log(const Tensor& x) {
  return map(x, [](double v) {
    if (!(v > 0.0)) throw DomainError("log: non-positive entry " + std::to_string(v));
    return std::log(v);
  });
}

Tensor log_backward(const Tensor& x, const Tensor& dy) {
  check_same_shape(x, dy, "log_backward");
  Tensor dx = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] / x[i];
  return dx;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor y({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.ptr() + i * d;
    double* yi = y.ptr() + i * d;
    const double mx = *std::max_element(xi, xi + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < d; ++j) yi[j] *= inv;
  }
  return y;
}

Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
  check_same_shape(y, dy, "softmax_rows_backward");
  const std::size_t n = y.dim(0), d = y.dim(1);
  Tensor dx({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double* yi = y.ptr() + i * d;
    const double* gi = dy.ptr() + i * d;
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += yi[j] * gi[j];
    double* o = dx.ptr() + i * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = yi[j] * (gi[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  LayerNormCache* cache) {
  require_matrix(x, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: affine width " + shape_str(gamma.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  Tensor xhat({n, d});
  Tensor y({n, d});
  std::vector<double> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.ptr() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xi[j] - mean) * r;
      xhat[i * d + j] = h;
      y[i * d + j] = h * gamma[j] + beta[j];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy) {
  check_same_shape(cache.xhat, dy, "layer_norm_backward");
  const std::size_t n = dy.dim(0), d = dy.dim(1);
  LayerNormGrads g{Tensor({n, d}), Tensor({d}), Tensor({d})};
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* hi = cache.xhat.ptr() + i * d;
    const double* gi = dy.ptr() + i * d;
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      g.dgamma[j] += gi[j] * hi[j];
      g.dbeta[j] += gi[j];
      dxhat[j] = gi[j] * gamma[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * hi[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      g.dx[i * d + j] = cache.rstd[i] * (dxhat[j] - m1 - hi[j] * m2);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t c, h, w, f, kh, kw, oh, ow;
  int stride, pad;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernels, int stride, int pad) {
  require_chw(input, "conv2d");
  if (kernels.ndim() != 4) {
    throw DimensionError("conv2d: kernels must be F×C×kh×kw, got " + shape_str(kernels.shape()));
  }
  if (kernels.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernel channels " + shape_str(kernels.shape()) +
                         " do not match input " + shape_str(input.shape()));
  }
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
  ConvGeometry g{};
  g.c = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.f = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.stride = stride;
  g.pad = pad;
  const long oh = (static_cast<long>(g.h) + 2 * pad - static_cast<long>(g.kh)) / stride + 1;
  const long ow = (static_cast<long>(g.w) + 2 * pad - static_cast<long>(g.kw)) / stride + 1;
  if (static_cast<long>(g.h) + 2 * pad < static_cast<long>(g.kh) ||
      static_cast<long>(g.w) + 2 * pad < static_cast<long>(g.kw) || oh <= 0 || ow <= 0) {
    throw DimensionError("conv2d: non-positive output size for input " + shape_str(input.shape()) +
                         " and kernels " + shape_str(kernels.shape()));
  }
  g.oh = static_cast<std::size_t>(oh);
  g.ow = static_cast<std::size_t>(ow);
  return g;
}

// Output columns [lo, hi) whose input column for kernel offset kx is in range.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  std::size_t lo = g.ow, hi = 0;
  for (std::size_t ox = 0; ox < g.ow; ++ox) {
    const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
    if (ix >= 0 && ix < static_cast<long>(g.w)) {
      lo = std::min(lo, ox);
      hi = ox + 1;
    }
  }
  return {lo, std::max(lo, hi)};
}

// col: (C·kh·kw) × (oh·ow)
std::vector<double> im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t ohw = g.oh * g.ow;
  const std::size_t st = static_cast<std::size_t>(g.stride);
  const std::size_t pad = static_cast<std::size_t>(g.pad);
  std::vector<double> col(g.c * g.kh * g.kw * ohw, 0.0);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [lo, hi] = valid_columns(g, kx);
        double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * ohw;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const double* src = input.ptr() + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          double* dst = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * st + kx - pad];
        }
      }
    }
  }
  return col;
}

void col2im(const std::vector<double>& col, const ConvGeometry& g, Tensor& dinput) {
  const std::size_t ohw = g.oh * g.ow;
  const std::size_t st = static_cast<std::size_t>(g.stride);
  const std::size_t pad = static_cast<std::size_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [lo, hi] = valid_columns(g, kx);
        const double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * ohw;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = dinput.ptr() + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * st + kx - pad] += src[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int pad) {
  const ConvGeometry g = conv_geometry(input, kernels, stride, pad);
  const std::vector<double> col = im2col(input, g);
  Tensor out({g.f, g.oh, g.ow});
  kernels::gemm_nn(g.f, g.oh * g.ow, g.c * g.kh * g.kw, kernels.ptr(), col.data(), out.ptr());
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, int stride, int pad,
                            const Tensor& dout, bool need_dinput) {
  const ConvGeometry g = conv_geometry(input, kernels, stride, pad);
  if (dout.shape() != Shape{g.f, g.oh, g.ow}) {
    throw DimensionError("conv2d_backward: upstream gradient " + shape_str(dout.shape()) +
                         " does not match output " + shape_str({g.f, g.oh, g.ow}));
  }
  const std::size_t ckk = g.c * g.kh * g.kw;
  const std::size_t ohw = g.oh * g.ow;
  const std::vector<double> col = im2col(input, g);
  Conv2dGrads grads;
  grads.dkernels = Tensor(kernels.shape());
  kernels::gemm_nt(g.f, ckk, ohw, dout.ptr(), col.data(), grads.dkernels.ptr());
  if (need_dinput) {
    std::vector<double> dcol(ckk * ohw, 0.0);
    kernels::gemm_tn(ckk, ohw, g.f, kernels.ptr(), dout.ptr(), dcol.data());
    grads.dinput = Tensor(input.shape());
    col2im(dcol, g, grads.dinput);
  }
  return grads;
}

namespace {

struct DeconvGeometry {
  std::size_t c, h, w, f, k, oh, ow;
  std::size_t stride;
};

DeconvGeometry deconv_geometry(const Tensor& input, const Tensor& kernels, int stride) {
  require_chw(input, "conv_transpose2d");
  if (kernels.ndim() != 4 || kernels.dim(0) != input.dim(0) || kernels.dim(2) != kernels.dim(3)) {
    throw DimensionError("conv_transpose2d: kernels " + shape_str(kernels.shape()) +
                         " incompatible with input " + shape_str(input.shape()));
  }
  if (stride < 1) throw DimensionError("conv_transpose2d: stride must be >= 1");
  DeconvGeometry g{};
  g.c = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.f = kernels.dim(1);
  g.k = kernels.dim(2);
  g.stride = static_cast<std::size_t>(stride);
  g.oh = (g.h - 1) * g.stride + g.k;
  g.ow = (g.w - 1) * g.stride + g.k;
  return g;
}

}  // namespace

Tensor conv_transpose2d(const Tensor& input, const Tensor& kernels, int stride) {
  const DeconvGeometry g = deconv_geometry(input, kernels, stride);
  const std::size_t fkk = g.f * g.k * g.k;
  const std::size_t hw = g.h * g.w;
  // cols[(f,ky,kx)][(y,x)] = Σ_c K[c][f][ky][kx] · in[c][y][x]
  std::vector<double> cols(fkk * hw, 0.0);
  kernels::gemm_tn(fkk, hw, g.c, kernels.ptr(), input.ptr(), cols.data());
  Tensor out({g.f, g.oh, g.ow});
  for (std::size_t f = 0; f < g.f; ++f) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols.data() + ((f * g.k + ky) * g.k + kx) * hw;
        for (std::size_t y = 0; y < g.h; ++y) {
          double* dst = out.ptr() + (f * g.oh + y * g.stride + ky) * g.ow + kx;
          for (std::size_t x = 0; x < g.w; ++x) dst[x * g.stride] += row[y * g.w + x];
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv_transpose2d_backward(const Tensor& input, const Tensor& kernels, int stride,
                                      const Tensor& dout) {
  const DeconvGeometry g = deconv_geometry(input, kernels, stride);
  if (dout.shape() != Shape{g.f, g.oh, g.ow}) {
    throw DimensionError("conv_transpose2d_backward: upstream gradient " + shape_str(dout.shape()) +
                         " does not match output " + shape_str({g.f, g.oh, g.ow}));
  }
  const std::size_t fkk = g.f * g.k * g.k;
  const std::size_t hw = g.h * g.w;
  std::vector<double> dcols(fkk * hw);
  for (std::size_t f = 0; f < g.f; ++f) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = dcols.data() + ((f * g.k + ky) * g.k + kx) * hw;
        for (std::size_t y = 0; y < g.h; ++y) {
          const double* src = dout.ptr() + (f * g.oh + y * g.stride + ky) * g.ow + kx;
          for (std::size_t x = 0; x < g.w; ++x) row[y * g.w + x] = src[x * g.stride];
        }
      }
    }
  }
  Conv2dGrads grads;
  grads.dinput = Tensor(input.shape());
  kernels::gemm_nn(g.c, hw, fkk, kernels.ptr(), dcols.data(), grads.dinput.ptr());
  grads.dkernels = Tensor(kernels.shape());
  kernels::gemm_nt(g.c, fkk, hw, input.ptr(), dcols.data(), grads.dkernels.ptr());
  return grads;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_chw(x, "add_channel_bias");
  if (bias.size() != x.dim(0)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  Tensor y = x;
  const std::size_t hw = x.dim(1) * x.dim(2);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double* p = y.ptr() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) p[i] += bias[c];
  }
  return y;
}

Tensor channel_bias_backward(const Tensor& dy) {
  require_chw(dy, "channel_bias_backward");
  const std::size_t hw = dy.dim(1) * dy.dim(2);
  Tensor db({dy.dim(0)});
  for (std::size_t c = 0; c < dy.dim(0); ++c) {
    const double* p = dy.ptr() + c * hw;
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
    db[c] = s;
  }
  return db;
}

MaxPoolResult maxpool2(const Tensor& x) {
  require_chw(x, "maxpool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw DimensionError("maxpool2: odd spatial size " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  MaxPoolResult r{Tensor({c, oh, ow}), std::vector<std::size_t>(c * oh * ow)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
            if (x[idx] > x[best] || std::isnan(x[idx])) best = idx;
          }
        }
        const std::size_t o = (ch * oh + y) * ow + xx;
        r.out[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor maxpool2_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                         const Tensor& dy) {
  if (argmax.size() != dy.size()) throw DimensionError("maxpool2_backward: index/gradient size mismatch");
  Tensor dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

Tensor upsample_nearest2(const Tensor& x) {
  require_chw(x, "upsample_nearest2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t yy = 0; yy < 2 * h; ++yy) {
      const double* src = x.ptr() + (ch * h + yy / 2) * w;
      double* dst = y.ptr() + (ch * 2 * h + yy) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return y;
}

Tensor upsample_nearest2_backward(const Tensor& dy) {
  require_chw(dy, "upsample_nearest2_backward");
  const std::size_t c = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2;
  Tensor dx({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t yy = 0; yy < 2 * h; ++yy) {
      const double* src = dy.ptr() + (ch * 2 * h + yy) * 2 * w;
      double* dst = dx.ptr() + (ch * h + yy / 2) * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
    }
  }
  return dx;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, int factor) {
  std::vector<Tap> taps(in * static_cast<std::size_t>(factor));
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

Tensor as_chw(const Tensor& x, const char* op) {
  if (x.ndim() == 2) return x.reshaped({1, x.dim(0), x.dim(1)});
  require_chw(x, op);
  return x;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int factor) {
  if (factor < 1) throw DimensionError("upsample_bilinear: factor must be >= 1");
  const Tensor in = as_chw(x, "upsample_bilinear");
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  const std::size_t oh = ty.size(), ow = tx.size();
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = in.ptr() + ch * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[ox];
        const double top = (1.0 - b.w1) * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1];
        const double bot = (1.0 - b.w1) * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1];
        out[(ch * oh + oy) * ow + ox] = (1.0 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  if (x.ndim() == 2) return out.reshaped({oh, ow});
  return out;
}

Tensor upsample_bilinear_backward(const Tensor& dy, int factor) {
  if (factor < 1) throw DimensionError("upsample_bilinear_backward: factor must be >= 1");
  const Tensor g = as_chw(dy, "upsample_bilinear_backward");
  const std::size_t c = g.dim(0), oh = g.dim(1), ow = g.dim(2);
  if (oh % factor || ow % factor) {
    throw DimensionError("upsample_bilinear_backward: size not divisible by factor");
  }
  const std::size_t h = oh / factor, w = ow / factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  Tensor dx({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* dst = dx.ptr() + ch * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[ox];
        const double v = g[(ch * oh + oy) * ow + ox];
        dst[a.i0 * w + b.i0] += (1.0 - a.w1) * (1.0 - b.w1) * v;
        dst[a.i0 * w + b.i1] += (1.0 - a.w1) * b.w1 * v;
        dst[a.i1 * w + b.i0] += a.w1 * (1.0 - b.w1) * v;
        dst[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
      }
    }
  }
  if (dy.ndim() == 2) return dx.reshaped({h, w});
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_chw(a, "concat_channels");
  require_chw(b, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw DimensionError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.storage().begin(), a.storage().end());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return Tensor({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(data));
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first) {
  require_chw(x, "split_channels");
  if (first == 0 || first >= x.dim(0)) throw DimensionError("split_channels: bad split point");
  const std::size_t plane = x.dim(1) * x.dim(2);
  const auto mid = x.storage().begin() + static_cast<std::ptrdiff_t>(first * plane);
  Tensor a({first, x.dim(1), x.dim(2)}, std::vector<double>(x.storage().begin(), mid));
  Tensor b({x.dim(0) - first, x.dim(1), x.dim(2)}, std::vector<double>(mid, x.storage().end()));
  return {std::move(a), std::move(b)};
}

}  // namespace cellprompt
