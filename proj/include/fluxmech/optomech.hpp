#pragma once

#include <string>
#include <vector>

#include "fluxmech/squid_cavity.hpp"

namespace fluxmech {

// Pump drive at detuning = pump frequency - cavity frequency (Hz, negative on
// the cooling side) sustaining n_photons intracavity photons.
struct DriveConfig {
  double detuning_hz = 0.0;
  double n_photons = 0.0;
  double g0_hz = 0.0;
};

struct ScatteringRates {
  double anti_stokes_hz = 0.0; // A-, phonon absorption
  double stokes_hz = 0.0;      // A+, phonon emission
};

struct BackactionResult {
  double gamma_opt_hz = 0.0;   // A- minus A+
  double gamma_eff_hz = 0.0;   // gamma_m + gamma_opt
  double omega_shift_hz = 0.0; // optical spring shift of omega_m
  double n_final = 0.0;        // steady-state phonons; NaN when unstable
  bool stable = false;         // gamma_eff > 0
};

// Bose occupation at temp_k for a mode at omega_m_hz.
double thermal_occupation(double temp_k, double omega_m_hz);

// A-/+ = g0^2 n kappa / ((kappa/2)^2 + (detuning +/- omega_m)^2); the 2 pi
// factors cancel in this ratio form, all quantities cyclic Hz.
ScatteringRates scattering_rates(const CavityParams& cav, const MechanicalParams& mech,
                                 const DriveConfig& drive);

BackactionResult backaction(const CavityParams& cav, const MechanicalParams& mech,
                            const DriveConfig& drive, double temp_k);

// Sideband-resolution floor (kappa / 4 omega_m)^2.
double min_phonon_bad_cavity(double kappa_hz, double omega_m_hz);
double min_phonon_bad_cavity(const CavityParams& cav, const MechanicalParams& mech);

// C0 = 4 g0^2 / (kappa gamma_m)
double cooperativity(double g0_hz, double kappa_hz, double gamma_m_hz);

// Cavity linewidth vs cavity frequency, polynomial interpolation over the
// fitted range. Evaluation outside [f_lo, f_hi] throws std::domain_error.
struct KappaPolynomial {
  std::vector<double> coeffs; // in t = (f - f_mid)/f_half, ascending order
  double f_lo = 0.0;
  double f_hi = 0.0;
  double f_mid = 0.0;
  double f_half = 1.0;

  double operator()(double f_cavity_hz) const;
};

struct KappaSample {
  double f_cavity_hz;
  double kappa_hz;
};

KappaPolynomial fit_kappa_polynomial(const std::vector<KappaSample>& samples,
                                     int degree = 3);

struct DetuningSweepRow {
  double detuning_hz;
  double n_final;
  double gamma_eff_hz;
  double omega_shift_hz;
  bool stable;
};

std::vector<DetuningSweepRow> detuning_sweep(const CavityParams& cav,
                                             const MechanicalParams& mech,
                                             double g0_hz, double n_photons,
                                             double temp_k, double detuning_lo_hz,
                                             double detuning_hi_hz, int n_steps);

// CSV: header `detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,stable`
void write_detuning_sweep_csv(const std::string& path,
                              const std::vector<DetuningSweepRow>& rows);
void write_detuning_sweep_csv(std::ostream& out,
                              const std::vector<DetuningSweepRow>& rows);

} // namespace fluxmech
