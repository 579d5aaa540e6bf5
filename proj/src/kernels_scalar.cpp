#include "fluxmech/kernels.hpp"

// Reference implementations. Keep the operation order in the loop bodies in
// sync with kernels_avx2.cpp: the equivalence tests assert bit-identical
// results for the elementwise kernels.

namespace fluxmech::kernels::scalar {

void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor) {
  const double fm2 = f_m * f_m;
  const double g2 = gamma * gamma;
  const double num = 2.0 * gamma * scale;
  for (std::size_t i = 0; i < n; ++i) {
    const double f2 = freq[i] * freq[i];
    const double u = f2 - fm2;
    const double den = u * u + g2 * f2;
    out[i] = num / den + floor;
  }
}

void notch_s21(const double* freq, double* re, double* im, std::size_t n,
               const NotchShape& shape) {
  const double c = 2.0 * shape.q_loaded / shape.f_res;
  const double d = shape.depth;
  const double cp = shape.cos_phi0;
  const double sp = shape.sin_phi0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (freq[i] - shape.f_res) * c;
    const double den = 1.0 + t * t;
    const double wr = d * (cp + t * sp);
    const double wi = d * (sp - t * cp);
    re[i] = 1.0 - wr / den;
    im[i] = 0.0 - wi / den;
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

} // namespace fluxmech::kernels::scalar
