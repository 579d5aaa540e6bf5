#pragma once

#include <complex>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fluxmech/fit.hpp"

namespace fluxmech {

struct ComplexTrace {
  std::vector<double> freqs;              // Hz, strictly increasing
  std::vector<std::complex<double>> s21;
};

// Throws std::invalid_argument unless freqs are finite, strictly increasing
// and there are at least 8 points.
void validate(const ComplexTrace& trace);

// Notch (hanger) resonator in the transmission line.
struct NotchParams {
  double q_loaded = 0.0;        // loaded quality factor
  double q_coupling_abs = 0.0;  // |Q_c|, magnitude of the complex coupling Q
  double phi0 = 0.0;            // impedance-mismatch rotation, rad, |phi0| < pi/2
  double f_res = 0.0;           // resonance frequency, Hz
};

// Instrument environment: S21_meas = amp e^{i alpha} e^{-i 2 pi f tau} S21_ideal
struct EnvironmentParams {
  double amp = 1.0;   // overall attenuation/gain
  double alpha = 0.0; // global phase, rad
  double tau = 0.0;   // cable delay, s
};

std::complex<double> s21_ideal(const NotchParams& notch, double freq_hz);
std::complex<double> s21_full(const NotchParams& notch, const EnvironmentParams& env,
                              double freq_hz);
// Array form of s21_full (vectorized resonance term)
void s21_full(const NotchParams& notch, const EnvironmentParams& env,
              const std::vector<double>& freqs, std::vector<std::complex<double>>& out);

// Uniform grid [f_start, f_stop], optional additive complex Gaussian noise
// (noise_sigma per quadrature). Deterministic for a given seed.
ComplexTrace synthesize_s21(const NotchParams& notch, const EnvironmentParams& env,
                            double f_start_hz, double f_stop_hz, int n_points,
                            double noise_sigma = 0.0, std::uint64_t seed = 0);

struct CircleFitResult {
  NotchParams notch;
  EnvironmentParams env;
  FitReport report; // names: amp, alpha, tau, f_res, q_loaded, q_coupling_abs, phi0
};

// Full circle-fit pipeline: cable-delay estimate from the off-resonant phase
// slope (outer 20% of the trace each side), algebraic (Taubin) circle fit,
// phase-vs-frequency arctangent fit, parameter recovery from the circle
// geometry, then joint complex least-squares refinement of all 7 parameters.
// Throws FitError when the de-delayed data shows no discernible circle.
CircleFitResult circle_fit(const ComplexTrace& trace);

enum class QConvention {
  diameter_correction, // 1/Q_int = 1/Q_l - cos(phi0)/|Q_c|
  simple_reciprocal,   // 1/Q_int = 1/Q_l - 1/|Q_c|
};

// Internal quality factor under the chosen convention. Throws FitError when
// the bookkeeping yields a non-positive Q_int.
double q_internal(const NotchParams& notch, QConvention convention);

// kappa = f_res / Q, Hz
double kappa_from_q(double f_res_hz, double q);

// CSV: header `freq_hz,re,im`, 17 significant digits
void write_complex_trace_csv(const std::string& path, const ComplexTrace& trace);
void write_complex_trace_csv(std::ostream& out, const ComplexTrace& trace);
ComplexTrace read_complex_trace_csv(const std::string& path);
ComplexTrace read_complex_trace_csv(std::istream& in);

namespace detail {
struct Circle {
  double x = 0.0, y = 0.0, r = 0.0;
};
// Taubin algebraic circle fit. Throws FitError on degenerate input.
Circle taubin_circle_fit(const std::vector<double>& xs, const std::vector<double>& ys);
} // namespace detail

} // namespace fluxmech
