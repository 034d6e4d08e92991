#include "dvp/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <thread>

namespace dvp::kernels {

namespace {
int g_threads = 0;  // 0 = not yet initialized
}

void set_threads(int n) { g_threads = n < 1 ? 1 : n; }

int threads() {
  if (g_threads == 0) {
    const char* env = std::getenv("DVP_THREADS");
    if (env && *env) {
      g_threads = std::max(1, std::atoi(env));
    } else {
      unsigned hw = std::thread::hardware_concurrency();
      g_threads = hw ? static_cast<int>(hw) : 1;
    }
  }
  return g_threads;
}

float fast_expf(float x) {
  x = std::min(88.72283f, std::max(-87.33654f, x));
  // round(x/ln2) via the 1.5*2^23 trick
  float z = x * 1.44269504088896341f + 12582912.0f;
  float n = z - 12582912.0f;
  float r = x - n * 0.693359375f;    // ln2 hi
  r -= n * -2.12194440e-4f;          // ln2 lo
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  int32_t ni = static_cast<int32_t>(n);
  float s = std::bit_cast<float>((ni + 127) << 23);
  return p * s;
}

void vexp(const float* x, float* y, int64_t n) {
  constexpr int64_t kChunk = 4096;
  int64_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](int64_t c) {
    int64_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i) y[i] = fast_expf(x[i]);
  });
}

void vtanh(const float* x, float* y, int64_t n) {
  constexpr int64_t kChunk = 4096;
  int64_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](int64_t c) {
    int64_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i)
      y[i] = 1.0f - 2.0f / (fast_expf(2.0f * x[i]) + 1.0f);
  });
}

void vsigmoid(const float* x, float* y, int64_t n) {
  constexpr int64_t kChunk = 4096;
  int64_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](int64_t c) {
    int64_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i) y[i] = 1.0f / (1.0f + fast_expf(-x[i]));
  });
}

bool all_finite(const float* x, int64_t n) {
  // abs(x) < inf as an integer compare on the exponent bits
  for (int64_t i = 0; i < n; ++i) {
    uint32_t u = std::bit_cast<uint32_t>(x[i]);
    if ((u & 0x7f800000u) == 0x7f800000u) return false;
  }
  return true;
}

double sum_squares(const float* x, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += static_cast<double>(x[i]) * x[i];
  return s;
}

void gemm_nn(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C) {
  // 4 C-rows per task: each B row feeds 4 FMAs. K ascends per element, so the
  // summation order matches ref::gemm_nn exactly.
  int64_t tasks = (M + 3) / 4;
  parallel_for(tasks, [&](int64_t t) {
    int64_t m0 = t * 4;
    int64_t mrows = std::min<int64_t>(4, M - m0);
    for (int64_t m = m0; m < m0 + mrows; ++m) {
      float* c = C + m * N;
      if (beta == 0.0f) {
        std::memset(c, 0, sizeof(float) * N);
      } else if (beta != 1.0f) {
        for (int64_t j = 0; j < N; ++j) c[j] *= beta;
      }
    }
    if (mrows == 4) {
      float* c0 = C + (m0 + 0) * N;
      float* c1 = C + (m0 + 1) * N;
      float* c2 = C + (m0 + 2) * N;
      float* c3 = C + (m0 + 3) * N;
      const float* a0 = A + (m0 + 0) * K;
      const float* a1 = A + (m0 + 1) * K;
      const float* a2 = A + (m0 + 2) * K;
      const float* a3 = A + (m0 + 3) * K;
      for (int64_t k = 0; k < K; ++k) {
        const float* b = B + k * N;
        float v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
#pragma omp simd
        for (int64_t j = 0; j < N; ++j) {
          c0[j] += v0 * b[j];
          c1[j] += v1 * b[j];
          c2[j] += v2 * b[j];
          c3[j] += v3 * b[j];
        }
      }
    } else {
      for (int64_t m = m0; m < m0 + mrows; ++m) {
        float* c = C + m * N;
        const float* a = A + m * K;
        for (int64_t k = 0; k < K; ++k) {
          const float* b = B + k * N;
          float v = a[k];
#pragma omp simd
          for (int64_t j = 0; j < N; ++j) c[j] += v * b[j];
        }
      }
    }
  });
}

void gemm_nt(int64_t M, int64_t N, int64_t K, const float* A, const float* B,
             float beta, float* C) {
  parallel_for(M, [&](int64_t m) {
    const float* a = A + m * K;
    float* c = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const float* b = B + n * K;
      float s = 0.0f;
#pragma omp simd reduction(+ : s)
      for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
      c[n] = (beta == 0.0f ? 0.0f : beta * c[n]) + s;
    }
  });
}

void im2col3(const float* x, int C, int H, int W, float* col) {
  const int64_t HW = int64_t(H) * W;
  for (int c = 0; c < C; ++c) {
    const float* xc = x + int64_t(c) * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* dst = col + (int64_t(c) * 9 + ky * 3 + kx) * HW;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          float* row = dst + int64_t(y) * W;
          const int sy = y + dy;
          if (sy < 0 || sy >= H) {
            std::memset(row, 0, sizeof(float) * W);
            continue;
          }
          const float* src = xc + int64_t(sy) * W;
          if (dx == 0) {
            std::memcpy(row, src, sizeof(float) * W);
          } else if (dx < 0) {
            row[0] = 0.0f;
            std::memcpy(row + 1, src, sizeof(float) * (W - 1));
          } else {
            std::memcpy(row, src + 1, sizeof(float) * (W - 1));
            row[W - 1] = 0.0f;
          }
        }
      }
    }
  }
}

void col2im3(const float* col, int C, int H, int W, float* x) {
  const int64_t HW = int64_t(H) * W;
  for (int c = 0; c < C; ++c) {
    float* xc = x + int64_t(c) * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* src = col + (int64_t(c) * 9 + ky * 3 + kx) * HW;
        const int dy = ky - 1, dx = kx - 1;
        for (int y = 0; y < H; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          const float* row = src + int64_t(y) * W;
          float* dst = xc + int64_t(sy) * W;
          if (dx == 0) {
            for (int j = 0; j < W; ++j) dst[j] += row[j];
          } else if (dx < 0) {
            for (int j = 1; j < W; ++j) dst[j - 1] += row[j];
          } else {
            for (int j = 0; j < W - 1; ++j) dst[j + 1] += row[j];
          }
        }
      }
    }
  }
}

}  // namespace dvp::kernels
