#pragma once

#include <cmath>

// Physical constants (CODATA 2018 exact values where defined) and unit helpers.
//
// Unit convention used across the whole library: every frequency crossing a
// public API is a cyclic frequency in Hz. Conversions to angular frequency
// happen only inside formulas and each such site carries a comment.

namespace fluxmech {

inline constexpr double kPi = 3.14159265358979323846264338327950288;
inline constexpr double kTwoPi = 2.0 * kPi;

inline constexpr double kHbar = 1.054571817e-34;        // reduced Planck constant, J s
inline constexpr double kBoltzmann = 1.380649e-23;      // J/K
inline constexpr double kFluxQuantum = 2.067833848e-15; // Phi0, Wb

// dBm is referenced to 1 mW.
inline double dbm_to_watts(double dbm) { return 1e-3 * std::pow(10.0, dbm / 10.0); }
inline double watts_to_dbm(double watts) { return 10.0 * std::log10(watts / 1e-3); }
inline double dbm_to_milliwatts(double dbm) { return std::pow(10.0, dbm / 10.0); }
inline double milliwatts_to_dbm(double mw) { return 10.0 * std::log10(mw); }

} // namespace fluxmech
