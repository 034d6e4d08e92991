#include "dvp/efd.hpp"

#include <cmath>
#include <stdexcept>

#include "dvp/ops.hpp"

namespace dvp::efd {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

EfdCoeffs EfdCoeffs::zero(int order) {
  EfdCoeffs e;
  e.order = order;
  e.A.assign(order, 0.0);
  e.B.assign(order, 0.0);
  e.C.assign(order, 0.0);
  e.D.assign(order, 0.0);
  return e;
}

EfdCoeffs efd_forward(const Contour& c, int order) {
  const int K = static_cast<int>(c.pts.size());
  if (K < 3) throw std::invalid_argument("efd_forward: need at least 3 points");
  if (order < 1) throw std::invalid_argument("efd_forward: order must be >= 1");

  // Chord lengths; segment p goes from point p-1 to point p (mod K).
  std::vector<double> dx(K), dy(K), dt(K), t(K + 1);
  t[0] = 0.0;
  for (int p = 0; p < K; ++p) {
    const Vec2& a = c.pts[p];
    const Vec2& b = c.pts[(p + 1) % K];
    dx[p] = b.x - a.x;
    dy[p] = b.y - a.y;
    dt[p] = std::sqrt(dx[p] * dx[p] + dy[p] * dy[p]);
    if (!(dt[p] > 0.0))
      throw std::invalid_argument("efd_forward: zero-length segment");
    t[p + 1] = t[p] + dt[p];
  }
  const double T = t[K];

  EfdCoeffs e = EfdCoeffs::zero(order);
  for (int n = 1; n <= order; ++n) {
    const double w = 2.0 * n * kPi / T;
    const double s = T / (2.0 * n * n * kPi * kPi);
    double A = 0.0, B = 0.0, C = 0.0, D = 0.0;
    for (int p = 0; p < K; ++p) {
      const double c1 = std::cos(w * t[p + 1]) - std::cos(w * t[p]);
      const double s1 = std::sin(w * t[p + 1]) - std::sin(w * t[p]);
      A += dx[p] / dt[p] * c1;
      B += dx[p] / dt[p] * s1;
      C += dy[p] / dt[p] * c1;
      D += dy[p] / dt[p] * s1;
    }
    e.A[n - 1] = s * A;
    e.B[n - 1] = s * B;
    e.C[n - 1] = s * C;
    e.D[n - 1] = s * D;
  }
  return e;
}

Contour efd_inverse(const EfdCoeffs& e, int K) {
  if (K < 3) throw std::invalid_argument("efd_inverse: need K >= 3");
  for (int n = 0; n < e.order; ++n) {
    if (!std::isfinite(e.A[n]) || !std::isfinite(e.B[n]) ||
        !std::isfinite(e.C[n]) || !std::isfinite(e.D[n]))
      throw std::invalid_argument("efd_inverse: non-finite coefficients");
  }
  Contour c;
  c.pts.resize(K);
  for (int p = 0; p < K; ++p) {
    const double tau = static_cast<double>(p) / K;  // t_p / T
    double x = 0.0, y = 0.0;
    for (int n = 1; n <= e.order; ++n) {
      const double ph = 2.0 * n * kPi * tau;
      const double cs = std::cos(ph), sn = std::sin(ph);
      x += e.A[n - 1] * cs + e.B[n - 1] * sn;
      y += e.C[n - 1] * cs + e.D[n - 1] * sn;
    }
    c.pts[p] = {x, y};
  }
  return c;
}

std::vector<double> harmonic_amplitudes(const EfdCoeffs& e) {
  std::vector<double> a(e.order);
  for (int n = 0; n < e.order; ++n)
    a[n] = std::sqrt(e.A[n] * e.A[n] + e.B[n] * e.B[n] + e.C[n] * e.C[n] +
                     e.D[n] * e.D[n]);
  return a;
}

std::vector<float> to_row(const EfdCoeffs& e) {
  const int N = e.order;
  std::vector<float> row(4 * N);
  for (int n = 0; n < N; ++n) {
    row[n] = static_cast<float>(e.A[n]);
    row[N + n] = static_cast<float>(e.B[n]);
    row[2 * N + n] = static_cast<float>(e.C[n]);
    row[3 * N + n] = static_cast<float>(e.D[n]);
  }
  return row;
}

EfdCoeffs from_row(const float* row, int order) {
  EfdCoeffs e = EfdCoeffs::zero(order);
  for (int n = 0; n < order; ++n) {
    e.A[n] = row[n];
    e.B[n] = row[order + n];
    e.C[n] = row[2 * order + n];
    e.D[n] = row[3 * order + n];
  }
  return e;
}

Vec2 centroid(const Contour& c) {
  Vec2 m;
  for (const auto& p : c.pts) {
    m.x += p.x;
    m.y += p.y;
  }
  const double n = static_cast<double>(c.pts.size());
  return {m.x / n, m.y / n};
}

double bounding_radius(const Contour& c) {
  const Vec2 m = centroid(c);
  double r = 0.0;
  for (const auto& p : c.pts)
    r = std::max(r, std::hypot(p.x - m.x, p.y - m.y));
  return r;
}

Tensor inverse_basis(int order, int K) {
  Tensor basis = Tensor::zeros({4 * order, 2 * K}, false);
  float* b = basis.data();
  const int cols = 2 * K;
  for (int k = 0; k < K; ++k) {
    const double tau = static_cast<double>(k) / K;
    for (int n = 1; n <= order; ++n) {
      const double ph = 2.0 * n * kPi * tau;
      const float cs = static_cast<float>(std::cos(ph));
      const float sn = static_cast<float>(std::sin(ph));
      b[(n - 1) * cols + 2 * k] = cs;            // A -> x
      b[(order + n - 1) * cols + 2 * k] = sn;    // B -> x
      b[(2 * order + n - 1) * cols + 2 * k + 1] = cs;  // C -> y
      b[(3 * order + n - 1) * cols + 2 * k + 1] = sn;  // D -> y
    }
  }
  return basis;
}

Tensor efd_regularizer(Tape& t, const Tensor& coeffs, int order) {
  if (order < 4)
    throw std::invalid_argument("efd_regularizer: order must be >= 4");
  Tensor amps = ops::efd_amplitudes(t, coeffs, order);
  const int B = amps.dim(0);
  std::vector<float> w(static_cast<size_t>(B) * order, 0.0f);
  for (int bi = 0; bi < B; ++bi) {
    w[static_cast<size_t>(bi) * order + 0] = -1.0f / B;
    for (int n = 1; n <= 3; ++n)
      w[static_cast<size_t>(bi) * order + n] = 1.0f / B;
  }
  return ops::dot_const(t, amps, w);
}

}  // namespace dvp::efd
