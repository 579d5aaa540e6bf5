#pragma once

#include <cstddef>
#include <string_view>

// Data-parallel inner loops of the model-evaluation hot paths. Each kernel
// has a scalar reference implementation and, on x86-64 CPUs with AVX2, a
// vectorized variant. The dispatched entry points pick the widest variant
// the running CPU supports, once, at first use.
//
// The elementwise kernels (dho_psd, notch_s21) perform the same IEEE
// operations in the same order in both variants and are bit-identical.
// dot() accumulates in a different order in the AVX2 variant and agrees
// with the scalar reference only to rounding.

namespace fluxmech::kernels {

// Notch-resonator response without the instrument environment:
//   S21(f) = 1 - depth * e^{i phi0} / (1 + 2i q_loaded (f - f_res)/f_res)
struct NotchShape {
  double f_res;     // resonance frequency, Hz
  double q_loaded;  // loaded quality factor
  double depth;     // q_loaded / |q_coupling|
  double cos_phi0;
  double sin_phi0;
};

namespace scalar {
// out[i] = scale * 2 gamma / ((f^2 - f_m^2)^2 + gamma^2 f^2) + floor
void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor);
void notch_s21(const double* freq, double* re, double* im, std::size_t n,
               const NotchShape& shape);
double dot(const double* a, const double* b, std::size_t n);
} // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define FLUXMECH_X86_64 1
namespace avx2 {
void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor);
void notch_s21(const double* freq, double* re, double* im, std::size_t n,
               const NotchShape& shape);
double dot(const double* a, const double* b, std::size_t n);
} // namespace avx2
bool avx2_available();
#endif

// Runtime-dispatched entry points.
void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor);
void notch_s21(const double* freq, double* re, double* im, std::size_t n,
               const NotchShape& shape);
double dot(const double* a, const double* b, std::size_t n);

std::string_view active_backend(); // "avx2" or "scalar"

} // namespace fluxmech::kernels
