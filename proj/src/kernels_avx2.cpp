// AVX2 variants. Compiled with -mavx2 (and only -mavx2: FMA stays disabled so
// mul/add sequences round exactly like the scalar reference).

#include "fluxmech/kernels.hpp"

#if defined(FLUXMECH_X86_64)

#include <immintrin.h>

namespace fluxmech::kernels::avx2 {

void dho_psd(const double* freq, double* out, std::size_t n, double f_m,
             double gamma, double scale, double floor) {
  const double fm2 = f_m * f_m;
  const double g2 = gamma * gamma;
  const double num = 2.0 * gamma * scale;
  const __m256d vfm2 = _mm256_set1_pd(fm2);
  const __m256d vg2 = _mm256_set1_pd(g2);
  const __m256d vnum = _mm256_set1_pd(num);
  const __m256d vfloor = _mm256_set1_pd(floor);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d f = _mm256_loadu_pd(freq + i);
    const __m256d f2 = _mm256_mul_pd(f, f);
    const __m256d u = _mm256_sub_pd(f2, vfm2);
    const __m256d den = _mm256_add_pd(_mm256_mul_pd(u, u), _mm256_mul_pd(vg2, f2));
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_div_pd(vnum, den), vfloor));
  }
  for (; i < n; ++i) {
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
  const __m256d vfr = _mm256_set1_pd(shape.f_res);
  const __m256d vc = _mm256_set1_pd(c);
  const __m256d vd = _mm256_set1_pd(d);
  const __m256d vcp = _mm256_set1_pd(cp);
  const __m256d vsp = _mm256_set1_pd(sp);
  const __m256d vone = _mm256_set1_pd(1.0);
  const __m256d vzero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d f = _mm256_loadu_pd(freq + i);
    const __m256d t = _mm256_mul_pd(_mm256_sub_pd(f, vfr), vc);
    const __m256d den = _mm256_add_pd(vone, _mm256_mul_pd(t, t));
    const __m256d wr = _mm256_mul_pd(vd, _mm256_add_pd(vcp, _mm256_mul_pd(t, vsp)));
    const __m256d wi = _mm256_mul_pd(vd, _mm256_sub_pd(vsp, _mm256_mul_pd(t, vcp)));
    _mm256_storeu_pd(re + i, _mm256_sub_pd(vone, _mm256_div_pd(wr, den)));
    _mm256_storeu_pd(im + i, _mm256_sub_pd(vzero, _mm256_div_pd(wi, den)));
  }
  for (; i < n; ++i) {
    const double t = (freq[i] - shape.f_res) * c;
    const double den = 1.0 + t * t;
    const double wr = d * (cp + t * sp);
    const double wi = d * (sp - t * cp);
    re[i] = 1.0 - wr / den;
    im[i] = 0.0 - wi / den;
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  alignas(32) double lane[4];
  _mm256_store_pd(lane, acc);
  double sum = ((lane[0] + lane[1]) + lane[2]) + lane[3];
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

} // namespace fluxmech::kernels::avx2

#endif // FLUXMECH_X86_64
