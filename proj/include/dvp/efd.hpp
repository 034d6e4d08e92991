#pragma once

#include <vector>

#include "dvp/tensor.hpp"

namespace dvp::efd {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

// Closed contour; closure is implicit (last point connects to first), the
// first point is not duplicated. Consecutive duplicates are invalid.
struct Contour {
  std::vector<Vec2> pts;
};

// Elliptic Fourier coefficients, harmonics 1..order.
struct EfdCoeffs {
  int order = 0;
  std::vector<double> A, B, C, D;

  static EfdCoeffs zero(int order);
};

// Forward elliptic Fourier transform over the chord-length parameterization.
// Throws on K < 3 or a zero-length segment.
EfdCoeffs efd_forward(const Contour& c, int order);

// Inverse transform sampled at K uniform parameter values. The period is
// arbitrary and cancels; the result is centered at the origin (no DC term).
Contour efd_inverse(const EfdCoeffs& e, int K);

// a_n = sqrt(A_n² + B_n² + C_n² + D_n²)
std::vector<double> harmonic_amplitudes(const EfdCoeffs& e);

// Flat coefficient row (A_1..A_N, B_1..B_N, C_1..C_N, D_1..D_N) conversions.
std::vector<float> to_row(const EfdCoeffs& e);
EfdCoeffs from_row(const float* row, int order);

Vec2 centroid(const Contour& c);
double bounding_radius(const Contour& c);  // max |pt - centroid|

// Basis matrix [4N x 2K] mapping a coefficient row to interleaved (x,y)
// samples of the inverse transform: pts = coeffs · basis.
Tensor inverse_basis(int order, int K);

// -a_1 + a_2 + a_3 + a_4, averaged over the batch; differentiable.
// Requires order >= 4.
Tensor efd_regularizer(Tape& t, const Tensor& coeffs, int order);

}  // namespace dvp::efd
