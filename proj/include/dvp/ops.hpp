#pragma once

#include <vector>

#include "dvp/tensor.hpp"

// Primitive differentiable ops. Each op validates shapes, runs the forward
// kernel, checks the output for non-finite values (when tape.check_finite),
// and records a backward closure. Everything else in the model is composed
// from these.

namespace dvp::ops {

using dvp::Tape;
using dvp::Tensor;

// c[M,N] = a[M,K] · b[K,N]
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
// y[B,out] = x[B,in] · w[out,in]ᵀ   (linear layer without bias)
Tensor matmul_nt(Tape& t, const Tensor& x, const Tensor& w);
// y = x + b broadcast over rows; x[B,N], b[N]
Tensor add_bias_rows(Tape& t, const Tensor& x, const Tensor& b);

// x[B,C,H,W], w[Co,C,3,3], b[Co]; stride 1, pad 1
Tensor conv2d3x3(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b);
Tensor avgpool2(Tape& t, const Tensor& x);

struct BnBuffers {
  std::vector<float> running_mean;
  std::vector<float> running_var;
};
Tensor batchnorm2d(Tape& t, const Tensor& x, const Tensor& gamma,
                   const Tensor& beta, BnBuffers& buffers, bool train,
                   float momentum = 0.1f, float eps = 1e-5f);

Tensor gelu(Tape& t, const Tensor& x);
Tensor sigmoid(Tape& t, const Tensor& x);
Tensor softplus(Tape& t, const Tensor& x);
Tensor softmax_rows(Tape& t, const Tensor& x);  // x[B,N]

Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& x, float c);
Tensor add_scalar(Tape& t, const Tensor& x, float c);
// y[b,:] = x[b,:] * s[b]; x[B,N], s[B,1]
Tensor mul_rows(Tape& t, const Tensor& x, const Tensor& s);

Tensor slice_cols(Tape& t, const Tensor& x, int c0, int c1);
Tensor concat_cols(Tape& t, const std::vector<Tensor>& xs);
Tensor reshape(Tape& t, const Tensor& x, std::vector<int> shape);
// y = x / (‖x‖₂ + eps) per row
Tensor normalize_rows(Tape& t, const Tensor& x, float eps);

Tensor sum_all(Tape& t, const Tensor& x);
Tensor mean_all(Tape& t, const Tensor& x);
Tensor mse(Tape& t, const Tensor& x, const Tensor& y);
Tensor col_mean(Tape& t, const Tensor& x);  // [B,P] -> [P]
// scalar = Σ_i w[i]·x[i] over the flattened tensor
Tensor dot_const(Tape& t, const Tensor& x, const std::vector<float>& w);

// a[b,n] = sqrt(A²+B²+C²+D² + 1e-12) with the 4N coefficient layout
// (A_1..A_N, B_1..B_N, C_1..C_N, D_1..D_N)
Tensor efd_amplitudes(Tape& t, const Tensor& coeffs, int order);

// Forward: one-hot of the row argmax. Backward: identity (straight-through).
Tensor hard_onehot_rows(Tape& t, const Tensor& w);

// Signed distance to a closed polygon per pixel center (i+0.5, j+0.5);
// negative inside by the nonzero winding rule. pts[B,K,2] in pixel coords.
// A degenerate (point-like) polygon yields a large positive distance and
// receives no gradient.
Tensor sdf_polygon(Tape& t, const Tensor& pts, int H, int W);

// img[b,c,·] = alpha·fg[b,c] + (1-alpha)·bg[b,c]
Tensor compose(Tape& t, const Tensor& alpha, const Tensor& fg,
               const Tensor& bg);

// Copy that never requires grad; cuts the graph.
Tensor detach(const Tensor& x);

}  // namespace dvp::ops
