#include "dvp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "dvp/kernels.hpp"

namespace dvp::ops {

namespace {

namespace k = dvp::kernels;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_finite(const Tape& t, const Tensor& out, const char* op) {
  if (!t.check_finite) return;
  if (!k::all_finite(out.data(), out.numel()))
    throw std::runtime_error(std::string(op) + ": non-finite output");
}

Tensor make_out(std::vector<int> shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

bool want_grad(const Tape& t, std::initializer_list<const Tensor*> ins) {
  if (!t.enabled) return false;
  for (const Tensor* x : ins)
    if (x->defined() && x->requires_grad()) return true;
  return false;
}

std::vector<float>& scratch(int slot, size_t n) {
  static thread_local std::vector<float> bufs[4];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// Accumulates g into dst->g (allocating on first touch).
void accumulate(TensorNode* dst, const float* g, int64_t n) {
  dst->ensure_grad();
  float* d = dst->g.data();
  for (int64_t i = 0; i < n; ++i) d[i] += g[i];
}

const double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
const double kGeluA = 0.044715;

}  // namespace

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: need [M,K]x[K,N]");
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor y = make_out({M, N}, want_grad(t, {&a, &b}));
  k::gemm_nn(M, N, K, a.data(), b.data(), 0.0f, y.data());
  check_finite(t, y, "matmul");
  if (y.requires_grad()) {
    t.record(y.ptr(), [a, b, y, M, K, N]() {
      const float* g = y.grad().data();
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        k::gemm_nt(M, K, N, g, b.data(), 1.0f, a.node()->g.data());
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        auto& aT = scratch(0, int64_t(K) * M);
        for (int m = 0; m < M; ++m)
          for (int kk = 0; kk < K; ++kk) aT[int64_t(kk) * M + m] = a.data()[int64_t(m) * K + kk];
        k::gemm_nn(K, N, M, aT.data(), g, 1.0f, b.node()->g.data());
      }
    });
  }
  return y;
}

Tensor matmul_nt(Tape& t, const Tensor& x, const Tensor& w) {
  require(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
          "matmul_nt: need [B,in]x[out,in]");
  const int B = x.dim(0), In = x.dim(1), Out = w.dim(0);
  Tensor y = make_out({B, Out}, want_grad(t, {&x, &w}));
  k::gemm_nt(B, Out, In, x.data(), w.data(), 0.0f, y.data());
  check_finite(t, y, "matmul_nt");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, w, y, B, In, Out]() {
      const float* g = y.grad().data();
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        k::gemm_nn(B, In, Out, g, w.data(), 1.0f, x.node()->g.data());
      }
      if (w.requires_grad()) {
        w.node()->ensure_grad();
        auto& gT = scratch(0, int64_t(B) * Out);
        for (int bi = 0; bi < B; ++bi)
          for (int o = 0; o < Out; ++o) gT[int64_t(o) * B + bi] = g[int64_t(bi) * Out + o];
        k::gemm_nn(Out, In, B, gT.data(), x.data(), 1.0f, w.node()->g.data());
      }
    });
  }
  return y;
}

Tensor add_bias_rows(Tape& t, const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.ndim() == 1 && b.dim(0) == x.dim(1),
          "add_bias_rows: need x[B,N], b[N]");
  const int B = x.dim(0), N = x.dim(1);
  Tensor y = make_out({B, N}, want_grad(t, {&x, &b}));
  k::parallel_for(B, [&](int64_t bi) {
    const float* xr = x.data() + bi * N;
    const float* bv = b.data();
    float* yr = y.data() + bi * N;
    for (int j = 0; j < N; ++j) yr[j] = xr[j] + bv[j];
  });
  check_finite(t, y, "add_bias_rows");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, b, y, B, N]() {
      const float* g = y.grad().data();
      if (x.requires_grad()) accumulate(x.node(), g, int64_t(B) * N);
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        float* db = b.node()->g.data();
        k::parallel_for(N, [&](int64_t j) {
          double s = 0.0;
          for (int bi = 0; bi < B; ++bi) s += g[int64_t(bi) * N + j];
          db[j] += static_cast<float>(s);
        });
      }
    });
  }
  return y;
}

Tensor conv2d3x3(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 4 && w.ndim() == 4 && b.ndim() == 1,
          "conv2d3x3: need x[B,C,H,W], w[Co,C,3,3], b[Co]");
  require(w.dim(1) == x.dim(1) && w.dim(2) == 3 && w.dim(3) == 3 &&
              b.dim(0) == w.dim(0),
          "conv2d3x3: channel/kernel mismatch");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0);
  const int64_t HW = int64_t(H) * W, C9 = int64_t(C) * 9;
  Tensor y = make_out({B, Co, H, W}, want_grad(t, {&x, &w, &b}));
  k::parallel_for(B, [&](int64_t bi) {
    auto& col = scratch(0, C9 * HW);
    k::im2col3(x.data() + bi * C * HW, C, H, W, col.data());
    float* yb = y.data() + bi * Co * HW;
    k::gemm_nn(Co, HW, C9, w.data(), col.data(), 0.0f, yb);
    for (int co = 0; co < Co; ++co) {
      const float bv = b.data()[co];
      float* row = yb + int64_t(co) * HW;
      for (int64_t j = 0; j < HW; ++j) row[j] += bv;
    }
  });
  check_finite(t, y, "conv2d3x3");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, w, b, y, B, C, H, W, Co, HW, C9]() {
      const float* g = y.grad().data();
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        // wT[C9, Co]
        std::vector<float> wT(C9 * Co);
        for (int co = 0; co < Co; ++co)
          for (int64_t j = 0; j < C9; ++j) wT[j * Co + co] = w.data()[co * C9 + j];
        k::parallel_for(B, [&](int64_t bi) {
          auto& dcol = scratch(1, C9 * HW);
          k::gemm_nn(C9, HW, Co, wT.data(), g + bi * Co * HW, 0.0f,
                     dcol.data());
          k::col2im3(dcol.data(), C, H, W, x.node()->g.data() + bi * C * HW);
        });
      }
      if (w.requires_grad()) {
        w.node()->ensure_grad();
        // Sequential over images so dw accumulation order is fixed;
        // gemm_nt parallelizes over the Co rows inside.
        for (int bi = 0; bi < B; ++bi) {
          auto& col = scratch(2, C9 * HW);
          k::im2col3(x.data() + int64_t(bi) * C * HW, C, H, W, col.data());
          k::gemm_nt(Co, C9, HW, g + int64_t(bi) * Co * HW, col.data(), 1.0f,
                     w.node()->g.data());
        }
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        float* db = b.node()->g.data();
        k::parallel_for(Co, [&](int64_t co) {
          double s = 0.0;
          for (int bi = 0; bi < B; ++bi) {
            const float* row = g + (int64_t(bi) * Co + co) * HW;
            for (int64_t j = 0; j < HW; ++j) s += row[j];
          }
          db[co] += static_cast<float>(s);
        });
      }
    });
  }
  return y;
}

Tensor avgpool2(Tape& t, const Tensor& x) {
  require(x.ndim() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
          "avgpool2: need x[B,C,H,W] with even H,W");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  Tensor y = make_out({B, C, Ho, Wo}, want_grad(t, {&x}));
  const int64_t planes = int64_t(B) * C;
  k::parallel_for(planes, [&](int64_t p) {
    const float* xi = x.data() + p * H * W;
    float* yo = y.data() + p * Ho * Wo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j)
        yo[int64_t(i) * Wo + j] =
            0.25f * (xi[int64_t(2 * i) * W + 2 * j] +
                     xi[int64_t(2 * i) * W + 2 * j + 1] +
                     xi[int64_t(2 * i + 1) * W + 2 * j] +
                     xi[int64_t(2 * i + 1) * W + 2 * j + 1]);
  });
  check_finite(t, y, "avgpool2");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, B, C, H, W, Ho, Wo]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      const int64_t planes = int64_t(B) * C;
      k::parallel_for(planes, [&](int64_t p) {
        float* dx = x.node()->g.data() + p * H * W;
        const float* gp = g + p * Ho * Wo;
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const float v = 0.25f * gp[int64_t(i) * Wo + j];
            dx[int64_t(2 * i) * W + 2 * j] += v;
            dx[int64_t(2 * i) * W + 2 * j + 1] += v;
            dx[int64_t(2 * i + 1) * W + 2 * j] += v;
            dx[int64_t(2 * i + 1) * W + 2 * j + 1] += v;
          }
      });
    });
  }
  return y;
}

Tensor batchnorm2d(Tape& t, const Tensor& x, const Tensor& gamma,
                   const Tensor& beta, BnBuffers& buffers, bool train,
                   float momentum, float eps) {
  require(x.ndim() == 4, "batchnorm2d: need x[B,C,H,W]");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 &&
              beta.dim(0) == C,
          "batchnorm2d: gamma/beta must be [C]");
  require(static_cast<int>(buffers.running_mean.size()) == C &&
              static_cast<int>(buffers.running_var.size()) == C,
          "batchnorm2d: running stats must be [C]");
  const int64_t HW = int64_t(H) * W;
  const int64_t n = int64_t(B) * HW;

  auto mean = std::make_shared<std::vector<float>>(C);
  auto invstd = std::make_shared<std::vector<float>>(C);
  if (train) {
    k::parallel_for(C, [&](int64_t c) {
      double s = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const float* p = x.data() + (int64_t(bi) * C + c) * HW;
        for (int64_t j = 0; j < HW; ++j) s += p[j];
      }
      const double mu = s / n;
      double var = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const float* p = x.data() + (int64_t(bi) * C + c) * HW;
        for (int64_t j = 0; j < HW; ++j) {
          const double d = p[j] - mu;
          var += d * d;
        }
      }
      var /= n;
      (*mean)[c] = static_cast<float>(mu);
      (*invstd)[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
      const double unbiased = n > 1 ? var * n / (n - 1) : var;
      buffers.running_mean[c] = static_cast<float>(
          (1.0 - momentum) * buffers.running_mean[c] + momentum * mu);
      buffers.running_var[c] = static_cast<float>(
          (1.0 - momentum) * buffers.running_var[c] + momentum * unbiased);
    });
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = buffers.running_mean[c];
      (*invstd)[c] =
          static_cast<float>(1.0 / std::sqrt(double(buffers.running_var[c]) + eps));
    }
  }

  Tensor y = make_out({B, C, H, W}, want_grad(t, {&x, &gamma, &beta}));
  k::parallel_for(int64_t(B) * C, [&](int64_t p) {
    const int c = static_cast<int>(p % C);
    const float mu = (*mean)[c], is = (*invstd)[c];
    const float ga = gamma.data()[c], be = beta.data()[c];
    const float* xi = x.data() + p * HW;
    float* yo = y.data() + p * HW;
#pragma omp simd
    for (int64_t j = 0; j < HW; ++j) yo[j] = (xi[j] - mu) * is * ga + be;
  });
  check_finite(t, y, "batchnorm2d");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, gamma, beta, y, mean, invstd, train, B, C, HW, n]() {
      const float* g = y.grad().data();
      const bool need_dx = x.requires_grad();
      const bool need_dg = gamma.requires_grad();
      const bool need_db = beta.requires_grad();
      if (need_dx) x.node()->ensure_grad();
      if (need_dg) gamma.node()->ensure_grad();
      if (need_db) beta.node()->ensure_grad();
      k::parallel_for(C, [&](int64_t c) {
        const float mu = (*mean)[c], is = (*invstd)[c];
        const float ga = gamma.data()[c];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int bi = 0; bi < B; ++bi) {
          const float* gp = g + (int64_t(bi) * C + c) * HW;
          const float* xp = x.data() + (int64_t(bi) * C + c) * HW;
          for (int64_t j = 0; j < HW; ++j) {
            const double xh = (xp[j] - mu) * is;
            sum_g += gp[j];
            sum_gx += gp[j] * xh;
          }
        }
        if (need_dg) gamma.node()->g[c] += static_cast<float>(sum_gx);
        if (need_db) beta.node()->g[c] += static_cast<float>(sum_g);
        if (!need_dx) return;
        if (train) {
          const float m_g = static_cast<float>(sum_g / n);
          const float m_gx = static_cast<float>(sum_gx / n);
          for (int bi = 0; bi < B; ++bi) {
            float* dx = x.node()->g.data() + (int64_t(bi) * C + c) * HW;
            const float* gp = g + (int64_t(bi) * C + c) * HW;
            const float* xp = x.data() + (int64_t(bi) * C + c) * HW;
#pragma omp simd
            for (int64_t j = 0; j < HW; ++j) {
              const float xh = (xp[j] - mu) * is;
              dx[j] += ga * is * (gp[j] - m_g - xh * m_gx);
            }
          }
        } else {
          for (int bi = 0; bi < B; ++bi) {
            float* dx = x.node()->g.data() + (int64_t(bi) * C + c) * HW;
            const float* gp = g + (int64_t(bi) * C + c) * HW;
#pragma omp simd
            for (int64_t j = 0; j < HW; ++j) dx[j] += ga * is * gp[j];
          }
        }
      });
    });
  }
  return y;
}

Tensor gelu(Tape& t, const Tensor& x) {
  const int64_t n = x.numel();
  Tensor y = make_out(x.shape(), want_grad(t, {&x}));
  auto tanh_saved = std::make_shared<std::vector<float>>(n);
  float* ts = tanh_saved->data();
  const float* xi = x.data();
  float* yo = y.data();
  const float c = static_cast<float>(kGeluC);
  const float a = static_cast<float>(kGeluA);
  constexpr int64_t kChunk = 4096;
  k::parallel_for((n + kChunk - 1) / kChunk, [&](int64_t ch) {
    const int64_t lo = ch * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i) {
      const float v = xi[i];
      const float inner = c * (v + a * v * v * v);
      const float th = 1.0f - 2.0f / (k::fast_expf(2.0f * inner) + 1.0f);
      ts[i] = th;
      yo[i] = 0.5f * v * (1.0f + th);
    }
  });
  check_finite(t, y, "gelu");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, tanh_saved, n, c, a]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      const float* xi = x.data();
      const float* ts = tanh_saved->data();
      float* dx = x.node()->g.data();
      constexpr int64_t kChunk = 4096;
      k::parallel_for((n + kChunk - 1) / kChunk, [&](int64_t ch) {
        const int64_t lo = ch * kChunk, hi = std::min(n, lo + kChunk);
#pragma omp simd
        for (int64_t i = lo; i < hi; ++i) {
          const float v = xi[i];
          const float th = ts[i];
          const float din = c * (1.0f + 3.0f * a * v * v);
          dx[i] += g[i] * (0.5f * (1.0f + th) +
                           0.5f * v * (1.0f - th * th) * din);
        }
      });
    });
  }
  return y;
}

Tensor sigmoid(Tape& t, const Tensor& x) {
  Tensor y = make_out(x.shape(), want_grad(t, {&x}));
  const int64_t n = x.numel();
  k::vsigmoid(x.data(), y.data(), n);
  check_finite(t, y, "sigmoid");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      const float* yo = y.data();
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * yo[i] * (1.0f - yo[i]);
    });
  }
  return y;
}

Tensor softplus(Tape& t, const Tensor& x) {
  Tensor y = make_out(x.shape(), want_grad(t, {&x}));
  const int64_t n = x.numel();
  const float* xi = x.data();
  float* yo = y.data();
  for (int64_t i = 0; i < n; ++i) {
    const float v = xi[i];
    yo[i] = std::max(v, 0.0f) + std::log1p(k::fast_expf(-std::fabs(v)));
  }
  check_finite(t, y, "softplus");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      const float* xi = x.data();
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i)
        dx[i] += g[i] / (1.0f + k::fast_expf(-xi[i]));
    });
  }
  return y;
}

Tensor softmax_rows(Tape& t, const Tensor& x) {
  require(x.ndim() == 2, "softmax_rows: need [B,N]");
  const int B = x.dim(0), N = x.dim(1);
  Tensor y = make_out({B, N}, want_grad(t, {&x}));
  k::parallel_for(B, [&](int64_t bi) {
    const float* xr = x.data() + bi * N;
    float* yr = y.data() + bi * N;
    float m = xr[0];
    for (int j = 1; j < N; ++j) m = std::max(m, xr[j]);
    double s = 0.0;
    for (int j = 0; j < N; ++j) {
      yr[j] = k::fast_expf(xr[j] - m);
      s += yr[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < N; ++j) yr[j] *= inv;
  });
  check_finite(t, y, "softmax_rows");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, B, N]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      k::parallel_for(B, [&](int64_t bi) {
        const float* yr = y.data() + bi * N;
        const float* gr = g + bi * N;
        float* dx = x.node()->g.data() + bi * N;
        double dot = 0.0;
        for (int j = 0; j < N; ++j) dot += double(gr[j]) * yr[j];
        for (int j = 0; j < N; ++j)
          dx[j] += yr[j] * (gr[j] - static_cast<float>(dot));
      });
    });
  }
  return y;
}

namespace {
Tensor ew_binary(Tape& t, const Tensor& a, const Tensor& b, int mode) {
  require(a.shape() == b.shape(), "elementwise: shape mismatch");
  Tensor y = make_out(a.shape(), want_grad(t, {&a, &b}));
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* py = y.data();
  if (mode == 0)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  else if (mode == 1)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
  else
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  check_finite(t, y, "elementwise");
  if (y.requires_grad()) {
    t.record(y.ptr(), [a, b, y, n, mode]() {
      const float* g = y.grad().data();
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        float* da = a.node()->g.data();
        if (mode == 2) {
          const float* pb = b.data();
          for (int64_t i = 0; i < n; ++i) da[i] += g[i] * pb[i];
        } else {
          for (int64_t i = 0; i < n; ++i) da[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        float* db = b.node()->g.data();
        if (mode == 0)
          for (int64_t i = 0; i < n; ++i) db[i] += g[i];
        else if (mode == 1)
          for (int64_t i = 0; i < n; ++i) db[i] -= g[i];
        else {
          const float* pa = a.data();
          for (int64_t i = 0; i < n; ++i) db[i] += g[i] * pa[i];
        }
      }
    });
  }
  return y;
}
}  // namespace

Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return ew_binary(t, a, b, 0); }
Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return ew_binary(t, a, b, 1); }
Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return ew_binary(t, a, b, 2); }

Tensor scale(Tape& t, const Tensor& x, float c) {
  Tensor y = make_out(x.shape(), want_grad(t, {&x}));
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) y.data()[i] = x.data()[i] * c;
  check_finite(t, y, "scale");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n, c]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * c;
    });
  }
  return y;
}

Tensor add_scalar(Tape& t, const Tensor& x, float c) {
  Tensor y = make_out(x.shape(), want_grad(t, {&x}));
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) y.data()[i] = x.data()[i] + c;
  check_finite(t, y, "add_scalar");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
    });
  }
  return y;
}

Tensor mul_rows(Tape& t, const Tensor& x, const Tensor& s) {
  require(x.ndim() == 2 && s.ndim() == 2 && s.dim(0) == x.dim(0) &&
              s.dim(1) == 1,
          "mul_rows: need x[B,N], s[B,1]");
  const int B = x.dim(0), N = x.dim(1);
  Tensor y = make_out({B, N}, want_grad(t, {&x, &s}));
  for (int bi = 0; bi < B; ++bi) {
    const float sv = s.data()[bi];
    const float* xr = x.data() + int64_t(bi) * N;
    float* yr = y.data() + int64_t(bi) * N;
    for (int j = 0; j < N; ++j) yr[j] = xr[j] * sv;
  }
  check_finite(t, y, "mul_rows");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, s, y, B, N]() {
      const float* g = y.grad().data();
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        float* dx = x.node()->g.data();
        for (int bi = 0; bi < B; ++bi) {
          const float sv = s.data()[bi];
          for (int j = 0; j < N; ++j) dx[int64_t(bi) * N + j] += g[int64_t(bi) * N + j] * sv;
        }
      }
      if (s.requires_grad()) {
        s.node()->ensure_grad();
        float* ds = s.node()->g.data();
        for (int bi = 0; bi < B; ++bi) {
          double acc = 0.0;
          const float* xr = x.data() + int64_t(bi) * N;
          const float* gr = g + int64_t(bi) * N;
          for (int j = 0; j < N; ++j) acc += double(gr[j]) * xr[j];
          ds[bi] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

Tensor slice_cols(Tape& t, const Tensor& x, int c0, int c1) {
  require(x.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1),
          "slice_cols: bad range");
  const int B = x.dim(0), N = x.dim(1), M = c1 - c0;
  Tensor y = make_out({B, M}, want_grad(t, {&x}));
  for (int bi = 0; bi < B; ++bi)
    std::memcpy(y.data() + int64_t(bi) * M, x.data() + int64_t(bi) * N + c0,
                sizeof(float) * M);
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, B, N, M, c0]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      float* dx = x.node()->g.data();
      for (int bi = 0; bi < B; ++bi)
        for (int j = 0; j < M; ++j)
          dx[int64_t(bi) * N + c0 + j] += g[int64_t(bi) * M + j];
    });
  }
  return y;
}

Tensor concat_cols(Tape& t, const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_cols: empty input");
  const int B = xs[0].dim(0);
  int N = 0;
  for (const auto& x : xs) {
    require(x.ndim() == 2 && x.dim(0) == B, "concat_cols: row mismatch");
    N += x.dim(1);
  }
  bool rg = false;
  if (t.enabled)
    for (const auto& x : xs) rg = rg || x.requires_grad();
  Tensor y = make_out({B, N}, rg);
  int off = 0;
  for (const auto& x : xs) {
    const int M = x.dim(1);
    for (int bi = 0; bi < B; ++bi)
      std::memcpy(y.data() + int64_t(bi) * N + off, x.data() + int64_t(bi) * M,
                  sizeof(float) * M);
    off += M;
  }
  if (y.requires_grad()) {
    auto parts = xs;
    t.record(y.ptr(), [parts, y, B, N]() {
      const float* g = y.grad().data();
      int off = 0;
      for (const auto& x : parts) {
        const int M = x.dim(1);
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          float* dx = x.node()->g.data();
          for (int bi = 0; bi < B; ++bi)
            for (int j = 0; j < M; ++j)
              dx[int64_t(bi) * M + j] += g[int64_t(bi) * N + off + j];
        }
        off += M;
      }
    });
  }
  return y;
}

Tensor reshape(Tape& t, const Tensor& x, std::vector<int> shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  require(n == x.numel(), "reshape: element count mismatch");
  Tensor y = make_out(std::move(shape), want_grad(t, {&x}));
  std::memcpy(y.data(), x.data(), sizeof(float) * n);
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n]() {
      x.node()->ensure_grad();
      accumulate(x.node(), y.grad().data(), n);
    });
  }
  return y;
}

Tensor normalize_rows(Tape& t, const Tensor& x, float eps) {
  require(x.ndim() == 2, "normalize_rows: need [B,N]");
  const int B = x.dim(0), N = x.dim(1);
  Tensor y = make_out({B, N}, want_grad(t, {&x}));
  auto norms = std::make_shared<std::vector<float>>(B);
  for (int bi = 0; bi < B; ++bi) {
    const float* xr = x.data() + int64_t(bi) * N;
    double ss = 0.0;
    for (int j = 0; j < N; ++j) ss += double(xr[j]) * xr[j];
    const float r = static_cast<float>(std::sqrt(ss));
    (*norms)[bi] = r;
    const float inv = 1.0f / (r + eps);
    float* yr = y.data() + int64_t(bi) * N;
    for (int j = 0; j < N; ++j) yr[j] = xr[j] * inv;
  }
  check_finite(t, y, "normalize_rows");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, norms, B, N, eps]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      for (int bi = 0; bi < B; ++bi) {
        const float r = (*norms)[bi];
        const float d = r + eps;
        const float* xr = x.data() + int64_t(bi) * N;
        const float* gr = g + int64_t(bi) * N;
        float* dx = x.node()->g.data() + int64_t(bi) * N;
        double dot = 0.0;
        for (int j = 0; j < N; ++j) dot += double(gr[j]) * xr[j];
        const float rs = std::max(r, 1e-12f);
        const float coef = static_cast<float>(dot) / (rs * d * d);
        for (int j = 0; j < N; ++j) dx[j] += gr[j] / d - coef * xr[j];
      }
    });
  }
  return y;
}

namespace {
Tensor reduce_all(Tape& t, const Tensor& x, bool mean) {
  const int64_t n = x.numel();
  double s = 0.0;
  const float* xi = x.data();
  for (int64_t i = 0; i < n; ++i) s += xi[i];
  if (mean) s /= n;
  Tensor y = make_out({1}, want_grad(t, {&x}));
  y.data()[0] = static_cast<float>(s);
  check_finite(t, y, "reduce_all");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, n, mean]() {
      x.node()->ensure_grad();
      const float g = y.grad()[0] * (mean ? 1.0f / n : 1.0f);
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return y;
}
}  // namespace

Tensor sum_all(Tape& t, const Tensor& x) { return reduce_all(t, x, false); }
Tensor mean_all(Tape& t, const Tensor& x) { return reduce_all(t, x, true); }

Tensor mse(Tape& t, const Tensor& x, const Tensor& y) {
  require(x.shape() == y.shape(), "mse: shape mismatch");
  const int64_t n = x.numel();
  double s = 0.0;
  const float* px = x.data();
  const float* py = y.data();
  for (int64_t i = 0; i < n; ++i) {
    const double d = double(px[i]) - py[i];
    s += d * d;
  }
  Tensor out = make_out({1}, want_grad(t, {&x, &y}));
  out.data()[0] = static_cast<float>(s / n);
  check_finite(t, out, "mse");
  if (out.requires_grad()) {
    t.record(out.ptr(), [x, y, out, n]() {
      const float g = out.grad()[0];
      const float c = 2.0f * g / n;
      const float* px = x.data();
      const float* py = y.data();
      if (x.requires_grad()) {
        x.node()->ensure_grad();
        float* dx = x.node()->g.data();
        for (int64_t i = 0; i < n; ++i) dx[i] += c * (px[i] - py[i]);
      }
      if (y.requires_grad()) {
        y.node()->ensure_grad();
        float* dy = y.node()->g.data();
        for (int64_t i = 0; i < n; ++i) dy[i] -= c * (px[i] - py[i]);
      }
    });
  }
  return out;
}

Tensor col_mean(Tape& t, const Tensor& x) {
  require(x.ndim() == 2, "col_mean: need [B,P]");
  const int B = x.dim(0), P = x.dim(1);
  Tensor y = make_out({P}, want_grad(t, {&x}));
  for (int j = 0; j < P; ++j) {
    double s = 0.0;
    for (int bi = 0; bi < B; ++bi) s += x.data()[int64_t(bi) * P + j];
    y.data()[j] = static_cast<float>(s / B);
  }
  check_finite(t, y, "col_mean");
  if (y.requires_grad()) {
    t.record(y.ptr(), [x, y, B, P]() {
      x.node()->ensure_grad();
      const float* g = y.grad().data();
      float* dx = x.node()->g.data();
      for (int bi = 0; bi < B; ++bi)
        for (int j = 0; j < P; ++j) dx[int64_t(bi) * P + j] += g[j] / B;
    });
  }
  return y;
}

Tensor dot_const(Tape& t, const Tensor& x, const std::vector<float>& w) {
  require(static_cast<int64_t>(w.size()) == x.numel(),
          "dot_const: weight length mismatch");
  const int64_t n = x.numel();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += double(x.data()[i]) * w[i];
  Tensor y = make_out({1}, want_grad(t, {&x}));
  y.data()[0] = static_cast<float>(s);
  check_finite(t, y, "dot_const");
  if (y.requires_grad()) {
    auto wc = std::make_shared<std::vector<float>>(w);
    t.record(y.ptr(), [x, y, wc, n]() {
      x.node()->ensure_grad();
      const float g = y.grad()[0];
      float* dx = x.node()->g.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g * (*wc)[i];
    });
  }
  return y;
}

Tensor efd_amplitudes(Tape& t, const Tensor& coeffs, int order) {
  require(coeffs.ndim() == 2 && coeffs.dim(1) == 4 * order,
          "efd_amplitudes: need [B,4N]");
  const int B = coeffs.dim(0), N = order;
  Tensor y = make_out({B, N}, want_grad(t, {&coeffs}));
  for (int bi = 0; bi < B; ++bi) {
    const float* c = coeffs.data() + int64_t(bi) * 4 * N;
    float* yr = y.data() + int64_t(bi) * N;
    for (int n = 0; n < N; ++n) {
      const double a = c[n], b = c[N + n], cc = c[2 * N + n], d = c[3 * N + n];
      yr[n] = static_cast<float>(
          std::sqrt(a * a + b * b + cc * cc + d * d + 1e-12));
    }
  }
  check_finite(t, y, "efd_amplitudes");
  if (y.requires_grad()) {
    t.record(y.ptr(), [coeffs, y, B, N]() {
      coeffs.node()->ensure_grad();
      const float* g = y.grad().data();
      for (int bi = 0; bi < B; ++bi) {
        const float* c = coeffs.data() + int64_t(bi) * 4 * N;
        const float* yr = y.data() + int64_t(bi) * N;
        float* dc = coeffs.node()->g.data() + int64_t(bi) * 4 * N;
        for (int n = 0; n < N; ++n) {
          const float inv = g[int64_t(bi) * N + n] / yr[n];
          dc[n] += inv * c[n];
          dc[N + n] += inv * c[N + n];
          dc[2 * N + n] += inv * c[2 * N + n];
          dc[3 * N + n] += inv * c[3 * N + n];
        }
      }
    });
  }
  return y;
}

Tensor hard_onehot_rows(Tape& t, const Tensor& w) {
  require(w.ndim() == 2, "hard_onehot_rows: need [B,P]");
  const int B = w.dim(0), P = w.dim(1);
  Tensor y = make_out({B, P}, want_grad(t, {&w}));
  for (int bi = 0; bi < B; ++bi) {
    const float* wr = w.data() + int64_t(bi) * P;
    int best = 0;
    for (int j = 1; j < P; ++j)
      if (wr[j] > wr[best]) best = j;
    y.data()[int64_t(bi) * P + best] = 1.0f;
  }
  if (y.requires_grad()) {
    t.record(y.ptr(), [w, y, B, P]() {
      w.node()->ensure_grad();
      accumulate(w.node(), y.grad().data(), int64_t(B) * P);
    });
  }
  return y;
}

namespace {
struct SdfSaved {
  std::vector<uint16_t> seg;   // nearest segment per pixel
  std::vector<float> tpar;     // clamped projection parameter
  std::vector<uint8_t> degen;  // per-image degenerate flag
};
}  // namespace

Tensor sdf_polygon(Tape& t, const Tensor& pts, int H, int W) {
  require(pts.ndim() == 3 && pts.dim(2) == 2 && pts.dim(1) >= 3,
          "sdf_polygon: need pts[B,K,2], K>=3");
  const int B = pts.dim(0), K = pts.dim(1);
  const int64_t HW = int64_t(H) * W;
  Tensor d = make_out({B, H, W}, want_grad(t, {&pts}));
  auto saved = std::make_shared<SdfSaved>();
  saved->seg.resize(int64_t(B) * HW);
  saved->tpar.resize(int64_t(B) * HW);
  saved->degen.assign(B, 0);

  k::parallel_for(B, [&](int64_t bi) {
    const float* v = pts.data() + bi * K * 2;
    // Degenerate shape: every vertex within ~0 of the first.
    float ext = 0.0f;
    for (int p = 1; p < K; ++p)
      ext = std::max(ext, std::fabs(v[2 * p] - v[0]) +
                              std::fabs(v[2 * p + 1] - v[1]));
    if (ext < 1e-3f) {
      saved->degen[bi] = 1;
      float* dd = d.data() + bi * HW;
      for (int64_t j = 0; j < HW; ++j) dd[j] = 1e4f;
      return;
    }
    float* dd = d.data() + bi * HW;
    uint16_t* seg = saved->seg.data() + bi * HW;
    float* tp = saved->tpar.data() + bi * HW;
    for (int i = 0; i < H; ++i) {
      const float py = i + 0.5f;
      for (int j = 0; j < W; ++j) {
        const float px = j + 0.5f;
        float best = 3.4e38f;
        int bseg = 0;
        float bt = 0.0f;
        int wind = 0;
        for (int p = 0; p < K; ++p) {
          const int q = p + 1 == K ? 0 : p + 1;
          const float ax = v[2 * p], ay = v[2 * p + 1];
          const float bx = v[2 * q], by = v[2 * q + 1];
          const float ex = bx - ax, ey = by - ay;
          const float rx = px - ax, ry = py - ay;
          const float l2 = ex * ex + ey * ey;
          float tt = l2 > 1e-12f ? (rx * ex + ry * ey) / l2 : 0.0f;
          tt = std::min(1.0f, std::max(0.0f, tt));
          const float qx = rx - tt * ex, qy = ry - tt * ey;
          const float dist2 = qx * qx + qy * qy;
          if (dist2 < best) {
            best = dist2;
            bseg = p;
            bt = tt;
          }
          // nonzero winding rule
          const float cross = ex * ry - ey * rx;
          if (ay <= py) {
            if (by > py && cross > 0.0f) ++wind;
          } else {
            if (by <= py && cross < 0.0f) --wind;
          }
        }
        const float sgn = wind != 0 ? -1.0f : 1.0f;
        dd[int64_t(i) * W + j] = sgn * std::sqrt(best);
        seg[int64_t(i) * W + j] = static_cast<uint16_t>(bseg);
        tp[int64_t(i) * W + j] = bt;
      }
    }
  });
  check_finite(t, d, "sdf_polygon");
  if (d.requires_grad()) {
    t.record(d.ptr(), [pts, d, saved, B, K, H, W, HW]() {
      pts.node()->ensure_grad();
      const float* g = d.grad().data();
      k::parallel_for(B, [&](int64_t bi) {
        if (saved->degen[bi]) return;
        const float* v = pts.data() + bi * K * 2;
        float* dv = pts.node()->g.data() + bi * K * 2;
        const float* dd = d.data() + bi * HW;
        const uint16_t* seg = saved->seg.data() + bi * HW;
        const float* tp = saved->tpar.data() + bi * HW;
        const float* gb = g + bi * HW;
        for (int i = 0; i < H; ++i) {
          const float py = i + 0.5f;
          for (int j = 0; j < W; ++j) {
            const float gd = gb[int64_t(i) * W + j];
            if (gd == 0.0f) continue;
            const float dist = dd[int64_t(i) * W + j];
            const float ad = std::fabs(dist);
            if (ad < 1e-9f) continue;
            const float px = j + 0.5f;
            const int p = seg[int64_t(i) * W + j];
            const int q = p + 1 == K ? 0 : p + 1;
            const float tt = tp[int64_t(i) * W + j];
            const float ax = v[2 * p], ay = v[2 * p + 1];
            const float ex = v[2 * q] - ax, ey = v[2 * q + 1] - ay;
            const float ux = (px - ax - tt * ex) / ad;
            const float uy = (py - ay - tt * ey) / ad;
            const float sgn = dist < 0.0f ? -1.0f : 1.0f;
            // d|p-q|/da = -(1-t)·u, d|p-q|/db = -t·u  (t fixed at the optimum)
            const float c = gd * sgn;
            dv[2 * p] += c * (-(1.0f - tt) * ux);
            dv[2 * p + 1] += c * (-(1.0f - tt) * uy);
            dv[2 * q] += c * (-tt * ux);
            dv[2 * q + 1] += c * (-tt * uy);
          }
        }
      });
    });
  }
  return d;
}

Tensor compose(Tape& t, const Tensor& alpha, const Tensor& fg,
               const Tensor& bg) {
  require(alpha.ndim() == 3, "compose: alpha must be [B,H,W]");
  const int B = alpha.dim(0), H = alpha.dim(1), W = alpha.dim(2);
  require(fg.ndim() == 2 && fg.dim(0) == B && fg.dim(1) == 3 &&
              bg.ndim() == 2 && bg.dim(0) == B && bg.dim(1) == 3,
          "compose: fg/bg must be [B,3]");
  const int64_t HW = int64_t(H) * W;
  Tensor y = make_out({B, 3, H, W}, want_grad(t, {&alpha, &fg, &bg}));
  k::parallel_for(B, [&](int64_t bi) {
    const float* a = alpha.data() + bi * HW;
    for (int c = 0; c < 3; ++c) {
      const float f = fg.data()[bi * 3 + c];
      const float b = bg.data()[bi * 3 + c];
      float* yo = y.data() + (bi * 3 + c) * HW;
#pragma omp simd
      for (int64_t j = 0; j < HW; ++j) yo[j] = a[j] * f + (1.0f - a[j]) * b;
    }
  });
  check_finite(t, y, "compose");
  if (y.requires_grad()) {
    t.record(y.ptr(), [alpha, fg, bg, y, B, HW]() {
      const float* g = y.grad().data();
      const bool da = alpha.requires_grad();
      const bool df = fg.requires_grad();
      const bool db = bg.requires_grad();
      if (da) alpha.node()->ensure_grad();
      if (df) fg.node()->ensure_grad();
      if (db) bg.node()->ensure_grad();
      k::parallel_for(B, [&](int64_t bi) {
        const float* a = alpha.data() + bi * HW;
        for (int c = 0; c < 3; ++c) {
          const float* gc = g + (bi * 3 + c) * HW;
          const float f = fg.data()[bi * 3 + c];
          const float b = bg.data()[bi * 3 + c];
          if (da) {
            float* dal = alpha.node()->g.data() + bi * HW;
            const float diff = f - b;
#pragma omp simd
            for (int64_t j = 0; j < HW; ++j) dal[j] += gc[j] * diff;
          }
          if (df || db) {
            double sf = 0.0, sb = 0.0;
            for (int64_t j = 0; j < HW; ++j) {
              sf += double(gc[j]) * a[j];
              sb += double(gc[j]) * (1.0f - a[j]);
            }
            if (df) fg.node()->g[bi * 3 + c] += static_cast<float>(sf);
            if (db) bg.node()->g[bi * 3 + c] += static_cast<float>(sb);
          }
        }
      });
    });
  }
  return y;
}

Tensor detach(const Tensor& x) {
  Tensor y = Tensor::from(x.shape(), x.values(), false);
  return y;
}

}  // namespace dvp::ops
