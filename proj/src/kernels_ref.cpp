#include <cmath>
#include <cstring>

#include "dvp/kernels.hpp"

namespace dvp::kernels::ref {

void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C) {
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t n = 0; n < N; ++n) {
      float acc = beta == 0.0f ? 0.0f : beta * C[m * N + n];
      for (int64_t k = 0; k < K; ++k) acc += A[m * K + k] * B[k * N + n];
      C[m * N + n] = acc;
    }
  }
}

void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C) {
  for (int64_t m = 0; m < M; ++m) {
    for (int64_t n = 0; n < N; ++n) {
      float acc = beta == 0.0f ? 0.0f : beta * C[m * N + n];
      for (int64_t k = 0; k < K; ++k) acc += A[m * K + k] * B[n * K + k];
      C[m * N + n] = acc;
    }
  }
}

void conv2d3x3(const float* x, const float* w, const float* b, int Cin,
               int Cout, int H, int W, float* y) {
  for (int co = 0; co < Cout; ++co) {
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        float acc = b ? b[co] : 0.0f;
        for (int ci = 0; ci < Cin; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              int si = i + ky - 1, sj = j + kx - 1;
              if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
              acc += w[((co * Cin + ci) * 3 + ky) * 3 + kx] *
                     x[(int64_t(ci) * H + si) * W + sj];
            }
          }
        }
        y[(int64_t(co) * H + i) * W + j] = acc;
      }
    }
  }
}

void gelu(const float* x, float* y, int64_t n) {
  const double c = std::sqrt(2.0 / M_PI);
  for (int64_t i = 0; i < n; ++i) {
    double v = x[i];
    y[i] = static_cast<float>(
        0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
  }
}

}  // namespace dvp::kernels::ref
