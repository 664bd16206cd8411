// SPDX-License-Identifier: Apache-2.0
//
// Dense array operations. Every differentiable operation comes as an explicit
// forward/backward pair; backward functions take the upstream gradient and
// return gradients for each input.
#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cellprompt/tensor.hpp"

namespace cellprompt {

namespace kernels {
// Raw row-major kernels; all accumulate into c.
// c[m×n] += a[m×k] · b[k×n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// c[m×n] += a[k×m]ᵀ · b[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// c[m×n] += a[m×k] · b[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
}  // namespace kernels

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// aᵀ · b
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

struct MatmulGrads {
  Tensor da;
  Tensor db;
};
/// For c = a·b: da = dc·bᵀ, db = aᵀ·dc.
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc);

// ---------------------------------------------------------------------------
// Element-wise. Binary ops accept equal shapes or a single-element operand.

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
void add_inplace(Tensor& acc, const Tensor& x);
void axpy_inplace(Tensor& acc, double alpha, const Tensor& x);

struct BinaryGrads {
  Tensor da;
  Tensor db;
};
BinaryGrads add_backward(const Tensor& a, const Tensor& b, const Tensor& dy);
BinaryGrads mul_backward(const Tensor& a, const Tensor& b, const Tensor& dy);

double sigmoid(double x);
Tensor sigmoid(const Tensor& x);
/// Takes the forward output y = sigmoid(x).
Tensor sigmoid_backward(const Tensor& y, const Tensor& dy);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

/// Throws DomainError on a non-positive entry.
Tensor log(const Tensor& x);
Tensor log_backward(const Tensor& x, const Tensor& dy);

/// Row-wise softmax of a 2-D tensor (max-shifted).
Tensor softmax_rows(const Tensor& x);
/// Takes the forward output y = softmax_rows(x).
Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy);

// ---------------------------------------------------------------------------
// Layer normalization over the last axis of an n×d tensor.

struct LayerNormCache {
  Tensor xhat;
  std::vector<double> rstd;
};
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  LayerNormCache* cache = nullptr);
struct LayerNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};
LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& dy);

// ---------------------------------------------------------------------------
// Spatial ops on C×H×W tensors.

/// Cross-correlation with zero padding. kernels: F×C×kh×kw.
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int pad);
struct Conv2dGrads {
  Tensor dinput;  // empty (default) when not requested
  Tensor dkernels;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, int stride, int pad,
                            const Tensor& dout, bool need_dinput = true);

/// Transposed convolution; kernels: C×F×k×k, output (H-1)·stride + k.
Tensor conv_transpose2d(const Tensor& input, const Tensor& kernels, int stride);
Conv2dGrads conv_transpose2d_backward(const Tensor& input, const Tensor& kernels, int stride,
                                      const Tensor& dout);

/// Adds bias[c] to every pixel of channel c.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// Sums dy over the spatial axes.
Tensor channel_bias_backward(const Tensor& dy);

struct MaxPoolResult {
  Tensor out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};
/// 2×2 max pool, stride 2. H and W must be even.
MaxPoolResult maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                         const Tensor& dy);

/// Nearest-neighbour 2× upsampling.
Tensor upsample_nearest2(const Tensor& x);
Tensor upsample_nearest2_backward(const Tensor& dy);

/// Bilinear resize by an integer factor (half-pixel centers, edge clamped).
/// Accepts H×W or C×H×W.
Tensor upsample_bilinear(const Tensor& x, int factor);
Tensor upsample_bilinear_backward(const Tensor& dy, int factor);

/// Stack along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first);

}  // namespace cellprompt
