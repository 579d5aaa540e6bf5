#include "fluxmech/kernels.hpp"

namespace fluxmech::kernels {

#if defined(FLUXMECH_X86_64)
bool avx2_available() { return __builtin_cpu_supports("avx2"); }
#endif

namespace {

bool use_avx2() {
#if defined(FLUXMECH_X86_64)
  static const bool ok = avx2_available();
  return ok;
#else
  return false;
#endif
}

} // namespace

void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor) {
#if defined(FLUXMECH_X86_64)
  if (use_avx2()) return avx2::dho_psd(freq, out, n, f_m, gamma, scale, floor);
#endif
  scalar::dho_psd(freq, out, n, f_m, gamma, scale, floor);
}

void notch_s21(const double* freq, double* re, double* im, std::size_t n,
               const NotchShape& shape) {
#if defined(FLUXMECH_X86_64)
  if (use_avx2()) return avx2::notch_s21(freq, re, im, n, shape);
#endif
  scalar::notch_s21(freq, re, im, n, shape);
}

double dot(const double* a, const double* b, std::size_t n) {
#if defined(FLUXMECH_X86_64)
  if (use_avx2()) return avx2::dot(a, b, n);
#endif
  return scalar::dot(a, b, n);
}

std::string_view active_backend() { return use_avx2() ? "avx2" : "scalar"; }

} // namespace fluxmech::kernels
