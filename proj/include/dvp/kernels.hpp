#pragma once

#include <cstdint>
#include <utility>

// Low-level compute kernels. Every kernel writes disjoint output ranges per
// OpenMP thread and keeps a fixed accumulation order inside each output
// element, so results are bit-identical for any thread count.
// kernels::ref holds naive serial versions kept as the test reference.

namespace dvp::kernels {

void set_threads(int n);
int threads();

template <typename F>
void parallel_for(int64_t n, F&& f) {
  if (threads() <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads())
  for (int64_t i = 0; i < n; ++i) f(i);
}

// Polynomial expf (cephes-style), ~1 ulp on the clamped range; vectorizable.
float fast_expf(float x);
void vexp(const float* x, float* y, int64_t n);
void vtanh(const float* x, float* y, int64_t n);
void vsigmoid(const float* x, float* y, int64_t n);

bool all_finite(const float* x, int64_t n);
double sum_squares(const float* x, int64_t n);  // 64-bit accumulation

// Row-major GEMM.
// gemm_nn: C[M,N] = A[M,K]·B[K,N] + beta·C
// gemm_nt: C[M,N] = A[M,K]·B[N,K]ᵀ + beta·C
void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C);
void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C);

// 3x3 stride-1 pad-1 conv lowering for one image.
// col is [(C*9) x (H*W)]; row c*9+ky*3+kx holds x[c, y+ky-1, x+kx-1].
void im2col3(const float* x, int C, int H, int W, float* col);
void col2im3(const float* col, int C, int H, int W, float* x);  // accumulates

namespace ref {
void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C);
void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C);
// Direct 7-loop convolution, 3x3 stride 1 pad 1, NCHW single image.
void conv2d3x3(const float* x, const float* w, const float* b, int Cin,
               int Cout, int H, int W, float* y);
void gelu(const float* x, float* y, int64_t n);
}  // namespace ref

}  // namespace dvp::kernels
