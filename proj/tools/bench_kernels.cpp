// Compares the naive serial reference kernels with the production kernels at
// 1 and N threads. Prints GFLOP/s per configuration.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "dvp/kernels.hpp"
#include "dvp/rng.hpp"

namespace k = dvp::kernels;

namespace {

double time_best_of(int reps, const std::function<void()>& fn) {
  double best = 1e100;
  for (int r = 0; r < reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

void report(const std::string& name, double flops, double sec) {
  std::printf("%-34s %8.2f ms  %7.2f GFLOP/s\n", name.c_str(), sec * 1e3,
              flops / sec / 1e9);
}

}  // namespace

int main(int argc, char** argv) {
  const int nthreads = argc > 1 ? std::atoi(argv[1]) : k::threads();
  dvp::Rng rng(42);

  struct GemmCase {
    int M, N, K;
    const char* tag;
  };
  // Shapes taken from the conv blocks of the 64x64 perception net at
  // channel scales 0.25 and 0.5.
  std::vector<GemmCase> cases = {
      {16, 4096, 27, "conv b1 s0.25"},
      {32, 1024, 144, "conv b2 s0.25"},
      {64, 256, 288, "conv b3 s0.25"},
      {64, 1024, 288, "conv b2 s0.5"},
      {256, 16, 1152, "conv b5 s0.5"},
  };

  std::printf("threads available: %d\n\n", nthreads);
  for (const auto& c : cases) {
    std::vector<float> A(int64_t(c.M) * c.K), B(int64_t(c.K) * c.N),
        C(int64_t(c.M) * c.N);
    for (auto& v : A) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : B) v = static_cast<float>(rng.uniform(-1, 1));
    const double flops = 2.0 * c.M * c.N * c.K;

    double sec = time_best_of(5, [&] {
      k::ref::gemm_nn(c.M, c.N, c.K, A.data(), B.data(), 0.0f, C.data());
    });
    report(std::string(c.tag) + " ref serial", flops, sec);

    k::set_threads(1);
    sec = time_best_of(5, [&] {
      k::gemm_nn(c.M, c.N, c.K, A.data(), B.data(), 0.0f, C.data());
    });
    report(std::string(c.tag) + " opt 1T", flops, sec);

    k::set_threads(nthreads);
    sec = time_best_of(5, [&] {
      k::gemm_nn(c.M, c.N, c.K, A.data(), B.data(), 0.0f, C.data());
    });
    report(std::string(c.tag) + " opt " + std::to_string(nthreads) + "T",
           flops, sec);
    std::printf("\n");
  }

  {
    const int64_t n = 1 << 20;
    std::vector<float> x(n), y(n);
    for (auto& v : x) v = static_cast<float>(rng.uniform(-5, 5));
    double sec = time_best_of(5, [&] { k::ref::gelu(x.data(), y.data(), n); });
    report("gelu ref serial (std::tanh)", double(n), sec);
    k::set_threads(1);
    sec = time_best_of(5, [&] { k::vtanh(x.data(), y.data(), n); });
    report("vtanh opt 1T", double(n), sec);
    k::set_threads(nthreads);
    sec = time_best_of(5, [&] { k::vtanh(x.data(), y.data(), n); });
    report("vtanh opt " + std::to_string(nthreads) + "T", double(n), sec);
  }
  return 0;
}
