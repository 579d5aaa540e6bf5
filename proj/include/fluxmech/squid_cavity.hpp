#pragma once

#include "fluxmech/config.hpp"

namespace fluxmech {

// SQUID-terminated cavity. Frequencies cyclic Hz, flux in units of Phi0.
struct CavityParams {
  double omega_max = 0.0;    // maximum (zero-flux) cavity frequency, Hz
  double flux_period = 1.0;  // flux periodicity, Phi0
  double kappa_c = 0.0;      // external (coupling) linewidth, Hz
  double kappa_i = 0.0;      // internal linewidth, Hz
  double phi_mismatch = 0.0; // impedance-mismatch rotation of the notch, rad

  double kappa() const { return kappa_c + kappa_i; }
};

struct MechanicalParams {
  double omega_m = 0.0;      // mechanical frequency, Hz
  double gamma_m = 0.0;      // intrinsic linewidth, Hz
  double mass_eff = 0.0;     // effective mass, kg
  double x_zpm = 0.0;        // zero-point motion, m
  double flux_per_zpm = 0.0; // flux picked up per x_zpm of deflection, Phi0
};

// Half-flux is a singular point of the transduction; flux points closer than
// this to it (in Phi0) are rejected as invalid.
inline constexpr double kFluxEdgeMargin = 0.02;

// phi_ext wrapped into [-period/2, period/2)
double wrap_flux(double phi_ext, double flux_period);
bool flux_point_valid(double phi_ext, double flux_period);

// omega_c(phi) = omega_max sqrt(|cos(pi phi / period)|), Hz.
// Throws std::domain_error outside the validity window.
double flux_map(const CavityParams& cav, double phi_ext);

// d omega_c / d phi, Hz per Phi0 (analytic derivative of flux_map)
double flux_sensitivity(const CavityParams& cav, double phi_ext);

// Single-phonon coupling g0 = |d omega_c/d phi| * flux_per_zpm, Hz
double coupling_g0(const CavityParams& cav, const MechanicalParams& mech,
                   double phi_ext);

// x_zpm = sqrt(hbar / (2 m omega_m)), omega_m angular inside. Meters.
double zero_point_motion(double mass_eff_kg, double omega_m_hz);

// m = k / omega_m^2 with omega_m angular inside. kg.
double mass_from_spring(double spring_constant_n_per_m, double omega_m_hz);

// Steady-state intracavity photon number for a pump of `input_power_w` watts
// at the device, detuned by `detuning_hz` from the cavity.
double intracavity_photons(const CavityParams& cav, double pump_freq_hz,
                           double detuning_hz, double input_power_w);

// Config round trip; keys are exactly the field names. Loading checks the
// x_zpm/mass_eff consistency relation and derives x_zpm when only the mass
// is given.
CavityParams cavity_from_config(const FlatConfig& cfg);
MechanicalParams mechanical_from_config(const FlatConfig& cfg);
void to_config(const CavityParams& cav, FlatConfig& cfg);
void to_config(const MechanicalParams& mech, FlatConfig& cfg);

} // namespace fluxmech
