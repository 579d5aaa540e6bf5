#include "fluxmech/optomech.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "fluxmech/constants.hpp"
#include "fluxmech/fit.hpp"

namespace fluxmech {

double thermal_occupation(double temp_k, double omega_m_hz) {
  if (!(temp_k > 0.0) || !(omega_m_hz > 0.0))
    throw std::invalid_argument("thermal_occupation: temperature and frequency must be positive");
  // hbar omega / kT with omega angular
  const double x = kHbar * kTwoPi * omega_m_hz / (kBoltzmann * temp_k);
  return 1.0 / std::expm1(x);
}

ScatteringRates scattering_rates(const CavityParams& cav, const MechanicalParams& mech,
                                 const DriveConfig& drive) {
  if (!(cav.kappa() > 0.0) || !(mech.omega_m > 0.0))
    throw std::invalid_argument("scattering_rates: kappa and omega_m must be positive");
  if (drive.n_photons < 0.0)
    throw std::invalid_argument("scattering_rates: photon number must be non-negative");
  const double k = cav.kappa();
  const double g2n = drive.g0_hz * drive.g0_hz * drive.n_photons;
  const double half_k2 = 0.25 * k * k;
  const double dp = drive.detuning_hz + mech.omega_m;
  const double dm = drive.detuning_hz - mech.omega_m;
  return {g2n * k / (half_k2 + dp * dp), g2n * k / (half_k2 + dm * dm)};
}

BackactionResult backaction(const CavityParams& cav, const MechanicalParams& mech,
                            const DriveConfig& drive, double temp_k) {
  if (!(mech.gamma_m >= 0.0))
    throw std::invalid_argument("backaction: gamma_m must be non-negative");
  const ScatteringRates rates = scattering_rates(cav, mech, drive);
  const double n_th = thermal_occupation(temp_k, mech.omega_m);

  BackactionResult out;
  out.gamma_opt_hz = rates.anti_stokes_hz - rates.stokes_hz;
  out.gamma_eff_hz = mech.gamma_m + out.gamma_opt_hz;

  const double k = cav.kappa();
  const double half_k2 = 0.25 * k * k;
  const double dp = drive.detuning_hz + mech.omega_m;
  const double dm = drive.detuning_hz - mech.omega_m;
  const double g2n = drive.g0_hz * drive.g0_hz * drive.n_photons;
  out.omega_shift_hz = g2n * (dp / (half_k2 + dp * dp) + dm / (half_k2 + dm * dm));

  out.stable = out.gamma_eff_hz > 0.0;
  if (!out.stable) {
    out.n_final = std::numeric_limits<double>::quiet_NaN();
  } else if (rates.anti_stokes_hz == 0.0 && rates.stokes_hz == 0.0) {
    // drive off: thermal equilibrium, sidestep (gamma_m*n_th)/gamma_m rounding
    out.n_final = n_th;
  } else {
    out.n_final = (mech.gamma_m * n_th + rates.stokes_hz) / out.gamma_eff_hz;
  }
  return out;
}

double min_phonon_bad_cavity(double kappa_hz, double omega_m_hz) {
  if (!(kappa_hz > 0.0) || !(omega_m_hz > 0.0))
    throw std::invalid_argument("min_phonon_bad_cavity: inputs must be positive");
  const double r = kappa_hz / (4.0 * omega_m_hz);
  return r * r;
}

double min_phonon_bad_cavity(const CavityParams& cav, const MechanicalParams& mech) {
  return min_phonon_bad_cavity(cav.kappa(), mech.omega_m);
}

double cooperativity(double g0_hz, double kappa_hz, double gamma_m_hz) {
  if (!(kappa_hz > 0.0) || !(gamma_m_hz > 0.0))
    throw std::invalid_argument("cooperativity: kappa and gamma_m must be positive");
  return 4.0 * g0_hz * g0_hz / (kappa_hz * gamma_m_hz);
}

double KappaPolynomial::operator()(double f_cavity_hz) const {
  if (coeffs.empty()) throw std::invalid_argument("kappa polynomial: not fitted");
  if (f_cavity_hz < f_lo || f_cavity_hz > f_hi)
    throw std::domain_error("kappa polynomial: frequency outside fitted range");
  const double t = (f_cavity_hz - f_mid) / f_half;
  double acc = 0.0;
  for (std::size_t i = coeffs.size(); i-- > 0;) acc = acc * t + coeffs[i];
  return acc;
}

KappaPolynomial fit_kappa_polynomial(const std::vector<KappaSample>& samples,
                                     int degree) {
  if (degree < 1 || samples.size() < static_cast<std::size_t>(degree + 1))
    throw std::invalid_argument("kappa polynomial: need more samples than coefficients");
  KappaPolynomial poly;
  poly.f_lo = samples.front().f_cavity_hz;
  poly.f_hi = samples.front().f_cavity_hz;
  for (const auto& s : samples) {
    poly.f_lo = std::min(poly.f_lo, s.f_cavity_hz);
    poly.f_hi = std::max(poly.f_hi, s.f_cavity_hz);
  }
  if (!(poly.f_hi > poly.f_lo))
    throw std::invalid_argument("kappa polynomial: degenerate frequency range");
  poly.f_mid = 0.5 * (poly.f_lo + poly.f_hi);
  poly.f_half = 0.5 * (poly.f_hi - poly.f_lo);

  const int p = degree + 1;
  std::vector<double> ata(p * p, 0.0), atb(p, 0.0), pow_t(p);
  for (const auto& s : samples) {
    const double t = (s.f_cavity_hz - poly.f_mid) / poly.f_half;
    pow_t[0] = 1.0;
    for (int j = 1; j < p; ++j) pow_t[j] = pow_t[j - 1] * t;
    for (int j = 0; j < p; ++j) {
      atb[j] += pow_t[j] * s.kappa_hz;
      for (int k = 0; k < p; ++k) ata[j * p + k] += pow_t[j] * pow_t[k];
    }
  }
  if (!detail::cholesky_solve(ata, atb, p))
    throw FitError("kappa polynomial: singular normal equations");
  poly.coeffs = atb;
  return poly;
}

std::vector<DetuningSweepRow> detuning_sweep(const CavityParams& cav,
                                             const MechanicalParams& mech,
                                             double g0_hz, double n_photons,
                                             double temp_k, double detuning_lo_hz,
                                             double detuning_hi_hz, int n_steps) {
  if (n_steps < 2 || !(detuning_hi_hz > detuning_lo_hz))
    throw std::invalid_argument("detuning_sweep: bad grid");
  std::vector<DetuningSweepRow> rows;
  rows.reserve(n_steps);
  const double step = (detuning_hi_hz - detuning_lo_hz) / (n_steps - 1);
  for (int i = 0; i < n_steps; ++i) {
    const double d = detuning_lo_hz + step * i;
    const BackactionResult b = backaction(cav, mech, {d, n_photons, g0_hz}, temp_k);
    rows.push_back({d, b.n_final, b.gamma_eff_hz, b.omega_shift_hz, b.stable});
  }
  return rows;
}

void write_detuning_sweep_csv(std::ostream& out,
                              const std::vector<DetuningSweepRow>& rows) {
  out << "detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,stable\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%d\n", r.detuning_hz,
                  r.n_final, r.gamma_eff_hz, r.omega_shift_hz, r.stable ? 1 : 0);
    out << buf;
  }
}

void write_detuning_sweep_csv(const std::string& path,
                              const std::vector<DetuningSweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write '" + path + "'");
  write_detuning_sweep_csv(out, rows);
}

} // namespace fluxmech
