#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <tuple>
#include <vector>

#include "dvp/kernels.hpp"
#include "dvp/rng.hpp"

namespace k = dvp::kernels;
using dvp::Rng;

namespace {
std::vector<float> random_vec(int64_t n, Rng& rng, double lo = -2.0,
                              double hi = 2.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}
}  // namespace

TEST_CASE("fast_expf matches std::exp") {
  Rng rng(7);
  double max_rel = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const float x = static_cast<float>(rng.uniform(-30.0, 30.0));
    const double e = std::exp(static_cast<double>(x));
    const double a = k::fast_expf(x);
    max_rel = std::max(max_rel, std::fabs(a - e) / e);
  }
  CHECK(max_rel < 3e-7);
  CHECK(k::fast_expf(0.0f) == doctest::Approx(1.0f));
  CHECK(std::isfinite(k::fast_expf(1000.0f)));
  CHECK(k::fast_expf(-1000.0f) >= 0.0f);
}

TEST_CASE("vtanh and vsigmoid match libm") {
  Rng rng(9);
  const int n = 4097;
  auto x = random_vec(n, rng, -12.0, 12.0);
  std::vector<float> t(n), s(n);
  k::vtanh(x.data(), t.data(), n);
  k::vsigmoid(x.data(), s.data(), n);
  for (int i = 0; i < n; ++i) {
    CHECK(t[i] == doctest::Approx(std::tanh(double(x[i]))).epsilon(1e-5));
    CHECK(s[i] ==
          doctest::Approx(1.0 / (1.0 + std::exp(-double(x[i])))).epsilon(1e-5));
  }
}

TEST_CASE("gemm_nn equals naive reference bit-for-bit") {
  Rng rng(11);
  for (auto [M, N, K] :
       {std::tuple<int, int, int>{7, 33, 13}, {32, 1024, 144}, {1, 5, 1}}) {
    auto A = random_vec(int64_t(M) * K, rng);
    auto B = random_vec(int64_t(K) * N, rng);
    std::vector<float> C1(int64_t(M) * N), C2(int64_t(M) * N);
    k::gemm_nn(M, N, K, A.data(), B.data(), 0.0f, C1.data());
    k::ref::gemm_nn(M, N, K, A.data(), B.data(), 0.0f, C2.data());
    CHECK(std::memcmp(C1.data(), C2.data(), C1.size() * 4) == 0);
  }
}

TEST_CASE("gemm_nt matches reference within reassociation tolerance") {
  Rng rng(12);
  const int M = 17, N = 29, K = 301;
  auto A = random_vec(int64_t(M) * K, rng);
  auto B = random_vec(int64_t(N) * K, rng);
  std::vector<float> C1(int64_t(M) * N), C2(int64_t(M) * N);
  k::gemm_nt(M, N, K, A.data(), B.data(), 0.0f, C1.data());
  k::ref::gemm_nt(M, N, K, A.data(), B.data(), 0.0f, C2.data());
  for (size_t i = 0; i < C1.size(); ++i)
    CHECK(C1[i] == doctest::Approx(C2[i]).epsilon(1e-4));
}

TEST_CASE("gemm beta accumulation") {
  Rng rng(13);
  const int M = 5, N = 9, K = 11;
  auto A = random_vec(int64_t(M) * K, rng);
  auto B = random_vec(int64_t(K) * N, rng);
  auto C0 = random_vec(int64_t(M) * N, rng);
  auto C1 = C0;
  auto C2 = C0;
  k::gemm_nn(M, N, K, A.data(), B.data(), 1.0f, C1.data());
  k::ref::gemm_nn(M, N, K, A.data(), B.data(), 1.0f, C2.data());
  for (size_t i = 0; i < C1.size(); ++i)
    CHECK(C1[i] == doctest::Approx(C2[i]).epsilon(1e-5));
}

TEST_CASE("parallel kernels are bit-identical to single-threaded runs") {
  Rng rng(14);
  const int M = 61, N = 500, K = 77;
  auto A = random_vec(int64_t(M) * K, rng);
  auto B = random_vec(int64_t(K) * N, rng);
  auto Bt = random_vec(int64_t(N) * K, rng);
  std::vector<float> C1(int64_t(M) * N), C2(int64_t(M) * N);
  std::vector<float> D1(int64_t(M) * N), D2(int64_t(M) * N);
  std::vector<float> x = random_vec(100000, rng, -5.0, 5.0);
  std::vector<float> e1(x.size()), e2(x.size());

  const int saved = k::threads();
  k::set_threads(1);
  k::gemm_nn(M, N, K, A.data(), B.data(), 0.0f, C1.data());
  k::gemm_nt(M, N, K, A.data(), Bt.data(), 0.0f, D1.data());
  k::vexp(x.data(), e1.data(), x.size());
  k::set_threads(4);
  k::gemm_nn(M, N, K, A.data(), B.data(), 0.0f, C2.data());
  k::gemm_nt(M, N, K, A.data(), Bt.data(), 0.0f, D2.data());
  k::vexp(x.data(), e2.data(), x.size());
  k::set_threads(saved);

  CHECK(std::memcmp(C1.data(), C2.data(), C1.size() * 4) == 0);
  CHECK(std::memcmp(D1.data(), D2.data(), D1.size() * 4) == 0);
  CHECK(std::memcmp(e1.data(), e2.data(), e1.size() * 4) == 0);
}

TEST_CASE("im2col lowering matches direct conv; col2im adds overlaps") {
  Rng rng(15);
  const int C = 3, H = 8, W = 8, Co = 4;
  auto x = random_vec(int64_t(C) * H * W, rng);
  auto w = random_vec(int64_t(Co) * C * 9, rng);
  std::vector<float> b(Co, 0.1f);

  std::vector<float> col(size_t(C) * 9 * H * W);
  k::im2col3(x.data(), C, H, W, col.data());
  std::vector<float> y1(size_t(Co) * H * W);
  k::gemm_nn(Co, H * W, C * 9, w.data(), col.data(), 0.0f, y1.data());
  for (int co = 0; co < Co; ++co)
    for (int j = 0; j < H * W; ++j) y1[size_t(co) * H * W + j] += b[co];

  std::vector<float> y2(size_t(Co) * H * W);
  k::ref::conv2d3x3(x.data(), w.data(), b.data(), C, Co, H, W, y2.data());
  for (size_t i = 0; i < y1.size(); ++i)
    CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-5));

  std::vector<float> back(size_t(C) * H * W, 0.0f);
  k::col2im3(col.data(), C, H, W, back.data());
  for (int c = 0; c < C; ++c)
    for (int i = 2; i < H - 2; ++i)
      for (int j = 2; j < W - 2; ++j) {
        const size_t at = (size_t(c) * H + i) * W + j;
        CHECK(back[at] == doctest::Approx(9.0f * x[at]).epsilon(1e-5));
      }
}

TEST_CASE("all_finite flags NaN and Inf") {
  std::vector<float> v(1000, 1.0f);
  CHECK(k::all_finite(v.data(), v.size()));
  v[999] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(k::all_finite(v.data(), v.size()));
  v[999] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(k::all_finite(v.data(), v.size()));
}

TEST_CASE("sum_squares accumulates in double") {
  std::vector<float> v = {3.0f, 4.0f};
  CHECK(k::sum_squares(v.data(), 2) == doctest::Approx(25.0));
}
