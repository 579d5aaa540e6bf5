#include "fluxmech/squid_cavity.hpp"

#include <cmath>
#include <stdexcept>

#include "fluxmech/constants.hpp"

namespace fluxmech {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

} // namespace

double wrap_flux(double phi_ext, double flux_period) {
  require(flux_period > 0.0 && std::isfinite(phi_ext), "flux point: bad inputs");
  double w = phi_ext - flux_period * std::round(phi_ext / flux_period);
  if (w >= 0.5 * flux_period) w -= flux_period; // round-half ties
  return w;
}

bool flux_point_valid(double phi_ext, double flux_period) {
  return std::abs(wrap_flux(phi_ext, flux_period)) <
         0.5 * flux_period - kFluxEdgeMargin;
}

double flux_map(const CavityParams& cav, double phi_ext) {
  require(cav.omega_max > 0.0, "flux_map: omega_max must be positive");
  if (!flux_point_valid(phi_ext, cav.flux_period))
    throw std::domain_error("flux point outside validity window (too close to half flux)");
  const double w = wrap_flux(phi_ext, cav.flux_period);
  return cav.omega_max * std::sqrt(std::abs(std::cos(kPi * w / cav.flux_period)));
}

double flux_sensitivity(const CavityParams& cav, double phi_ext) {
  require(cav.omega_max > 0.0, "flux_sensitivity: omega_max must be positive");
  if (!flux_point_valid(phi_ext, cav.flux_period))
    throw std::domain_error("flux point outside validity window (too close to half flux)");
  const double w = wrap_flux(phi_ext, cav.flux_period);
  const double arg = kPi * w / cav.flux_period;
  const double c = std::cos(arg);
  return -cav.omega_max * (kPi / (2.0 * cav.flux_period)) * std::sin(arg) /
         std::sqrt(c);
}

double coupling_g0(const CavityParams& cav, const MechanicalParams& mech,
                   double phi_ext) {
  require(mech.flux_per_zpm > 0.0, "coupling_g0: flux_per_zpm must be positive");
  return std::abs(flux_sensitivity(cav, phi_ext)) * mech.flux_per_zpm;
}

double zero_point_motion(double mass_eff_kg, double omega_m_hz) {
  require(mass_eff_kg > 0.0 && omega_m_hz > 0.0,
          "zero_point_motion: mass and frequency must be positive");
  // angular frequency inside the square root
  return std::sqrt(kHbar / (2.0 * mass_eff_kg * kTwoPi * omega_m_hz));
}

double mass_from_spring(double spring_constant_n_per_m, double omega_m_hz) {
  require(spring_constant_n_per_m > 0.0 && omega_m_hz > 0.0,
          "mass_from_spring: spring constant and frequency must be positive");
  const double w = kTwoPi * omega_m_hz; // angular
  return spring_constant_n_per_m / (w * w);
}

double intracavity_photons(const CavityParams& cav, double pump_freq_hz,
                           double detuning_hz, double input_power_w) {
  require(input_power_w >= 0.0, "intracavity_photons: power must be non-negative");
  require(pump_freq_hz > 0.0, "intracavity_photons: pump frequency must be positive");
  require(cav.kappa() > 0.0, "intracavity_photons: kappa must be positive");
  // rates in rad/s in this formula
  const double kc = kTwoPi * cav.kappa_c;
  const double k = kTwoPi * cav.kappa();
  const double d = kTwoPi * detuning_hz;
  const double wp = kTwoPi * pump_freq_hz;
  return input_power_w * kc / (kHbar * wp * (0.25 * k * k + d * d));
}

CavityParams cavity_from_config(const FlatConfig& cfg) {
  CavityParams cav;
  cav.omega_max = cfg.get_double("omega_max");
  cav.flux_period = cfg.get_double("flux_period", 1.0);
  cav.kappa_c = cfg.get_double("kappa_c");
  cav.kappa_i = cfg.get_double("kappa_i");
  cav.phi_mismatch = cfg.get_double("phi_mismatch", 0.0);
  require(cav.omega_max > 0.0 && cav.flux_period > 0.0, "config: bad cavity params");
  require(cav.kappa_c >= 0.0 && cav.kappa_i >= 0.0 && cav.kappa() > 0.0,
          "config: bad cavity linewidths");
  return cav;
}

MechanicalParams mechanical_from_config(const FlatConfig& cfg) {
  MechanicalParams mech;
  mech.omega_m = cfg.get_double("omega_m");
  mech.gamma_m = cfg.get_double("gamma_m");
  mech.mass_eff = cfg.get_double("mass_eff", 0.0);
  mech.x_zpm = cfg.get_double("x_zpm", 0.0);
  mech.flux_per_zpm = cfg.get_double("flux_per_zpm", 0.0);
  require(mech.omega_m > 0.0 && mech.gamma_m >= 0.0, "config: bad mechanical params");
  if (mech.mass_eff > 0.0) {
    const double x = zero_point_motion(mech.mass_eff, mech.omega_m);
    if (mech.x_zpm > 0.0) {
      if (std::abs(mech.x_zpm - x) > 1e-6 * x)
        throw std::invalid_argument(
            "config: x_zpm inconsistent with mass_eff and omega_m");
    } else {
      mech.x_zpm = x;
    }
  }
  return mech;
}

void to_config(const CavityParams& cav, FlatConfig& cfg) {
  cfg.set("omega_max", cav.omega_max);
  cfg.set("flux_period", cav.flux_period);
  cfg.set("kappa_c", cav.kappa_c);
  cfg.set("kappa_i", cav.kappa_i);
  cfg.set("phi_mismatch", cav.phi_mismatch);
}

void to_config(const MechanicalParams& mech, FlatConfig& cfg) {
  cfg.set("omega_m", mech.omega_m);
  cfg.set("gamma_m", mech.gamma_m);
  if (mech.mass_eff > 0.0) cfg.set("mass_eff", mech.mass_eff);
  if (mech.x_zpm > 0.0) cfg.set("x_zpm", mech.x_zpm);
  if (mech.flux_per_zpm > 0.0) cfg.set("flux_per_zpm", mech.flux_per_zpm);
}

} // namespace fluxmech
