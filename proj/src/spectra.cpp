#include "fluxmech/spectra.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "fluxmech/constants.hpp"
#include "fluxmech/kernels.hpp"

namespace fluxmech {

namespace {

double median(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + n / 2, v.end());
  double hi = v[n / 2];
  if (n % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + n / 2 - 1, v.end());
    return 0.5 * (v[n / 2 - 1] + hi);
  }
  return hi;
}

std::size_t nearest_bin(const std::vector<double>& freqs, double f) {
  const auto it = std::lower_bound(freqs.begin(), freqs.end(), f);
  if (it == freqs.begin()) return 0;
  if (it == freqs.end()) return freqs.size() - 1;
  const std::size_t hi = static_cast<std::size_t>(it - freqs.begin());
  return (f - freqs[hi - 1] <= freqs[hi] - f) ? hi - 1 : hi;
}

} // namespace

void validate(const SpectrumTrace& trace) {
  const std::size_t n = trace.freqs.size();
  if (trace.psd_dbm.size() != n)
    throw std::invalid_argument("spectrum: frequency/value size mismatch");
  if (n < 16) throw std::invalid_argument("spectrum: need at least 16 bins");
  if (!(trace.enbw_hz > 0.0)) throw std::invalid_argument("spectrum: enbw must be positive");
  if (trace.n_averages < 1)
    throw std::invalid_argument("spectrum: n_averages must be at least 1");
  const double step = trace.freqs[1] - trace.freqs[0];
  if (!(step > 0.0)) throw std::invalid_argument("spectrum: frequencies must increase");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(trace.freqs[i]) || !std::isfinite(trace.psd_dbm[i]))
      throw std::invalid_argument("spectrum: non-finite entry");
    if (i > 0 && std::abs(trace.freqs[i] - trace.freqs[i - 1] - step) > 1e-6 * step)
      throw std::invalid_argument("spectrum: grid must be uniform");
  }
}

double CalibrationTone::mod_index() const {
  if (!(f_mod_hz > 0.0)) throw std::invalid_argument("calibration tone: f_mod must be positive");
  return f_dev_hz / f_mod_hz;
}

CalibrationTone CalibrationTone::near(double omega_m_hz, double f_dev_hz,
                                      double detuning_hz) {
  if (!(omega_m_hz > 0.0) || !(f_dev_hz > 0.0))
    throw std::invalid_argument("calibration tone: bad parameters");
  return {omega_m_hz + detuning_hz, f_dev_hz};
}

double psd_model(double freq_hz, double omega_m_hz, double gamma_m_hz,
                 double amplitude) {
  const double f2 = freq_hz * freq_hz;
  const double u = f2 - omega_m_hz * omega_m_hz;
  return amplitude * 2.0 * gamma_m_hz / (u * u + gamma_m_hz * gamma_m_hz * f2);
}

void psd_model(const std::vector<double>& freqs, std::vector<double>& out_mw,
               double omega_m_hz, double gamma_m_hz, double amplitude,
               double floor_mw) {
  out_mw.resize(freqs.size());
  kernels::dho_psd(freqs.data(), out_mw.data(), freqs.size(), omega_m_hz,
                   gamma_m_hz, amplitude, floor_mw);
}

SpectrumTrace synthesize_spectrum(const MechSpectrumFit& mech, const CalibrationTone& cal,
                                  const SynthesisConfig& cfg) {
  if (!(mech.omega_m_hz > 0.0) || !(mech.gamma_m_hz > 0.0))
    throw std::invalid_argument("synthesize_spectrum: omega_m and gamma_m must be positive");
  if (!(mech.g0_sqrt_n_hz >= 0.0))
    throw std::invalid_argument("synthesize_spectrum: g0 sqrt(n) must be non-negative");
  if (!std::isfinite(mech.noise_floor_dbm))
    throw std::invalid_argument("synthesize_spectrum: noise floor must be finite");
  if (cfg.n_points < 64) throw std::invalid_argument("synthesize_spectrum: need >= 64 bins");
  if (!(cfg.span_hz > 0.0) || !(cfg.enbw_hz > 0.0) || !(cfg.gain > 0.0))
    throw std::invalid_argument("synthesize_spectrum: bad span/enbw/gain");
  if (cfg.n_averages < 1)
    throw std::invalid_argument("synthesize_spectrum: n_averages must be at least 1");

  const double center = cfg.center_hz > 0.0 ? cfg.center_hz : mech.omega_m_hz;
  const double f_lo = center - 0.5 * cfg.span_hz;
  const double f_hi = center + 0.5 * cfg.span_hz;
  if (!(mech.omega_m_hz > f_lo && mech.omega_m_hz < f_hi))
    throw std::invalid_argument("synthesize_spectrum: span excludes omega_m");
  if (!(cal.f_mod_hz > f_lo && cal.f_mod_hz < f_hi))
    throw std::invalid_argument("synthesize_spectrum: span excludes the calibration tone");
  if (!(f_lo > 0.0))
    throw std::invalid_argument("synthesize_spectrum: span reaches non-positive frequencies");

  SpectrumTrace trace;
  trace.enbw_hz = cfg.enbw_hz;
  trace.n_averages = cfg.n_averages;
  trace.freqs.resize(cfg.n_points);
  const double step = cfg.span_hz / (cfg.n_points - 1);
  for (int i = 0; i < cfg.n_points; ++i) trace.freqs[i] = f_lo + step * i;

  // mechanical line: amplitude in instrument units implied by the
  // transduction gain; the 4 omega_m^2 factor makes the calibration-tone
  // extraction invert exactly
  const double g2 = mech.g0_sqrt_n_hz * mech.g0_sqrt_n_hz;
  const double amplitude = cfg.gain * g2 * 4.0 * mech.omega_m_hz * mech.omega_m_hz;
  const double floor_mw = dbm_to_milliwatts(mech.noise_floor_dbm);
  std::vector<double> mw;
  psd_model(trace.freqs, mw, mech.omega_m_hz, mech.gamma_m_hz, amplitude, floor_mw);

  // calibration tone: integrated frequency-fluctuation power f_dev^2/2 lands
  // in the single bin nearest f_mod, spread over one ENBW
  if (cal.f_dev_hz > 0.0) {
    const std::size_t bin = nearest_bin(trace.freqs, cal.f_mod_hz);
    mw[bin] += cfg.gain * cal.f_dev_hz * cal.f_dev_hz / 2.0 / cfg.enbw_hz;
  }

  if (cfg.with_noise) {
    std::mt19937_64 rng(cfg.seed);
    std::gamma_distribution<double> gamma(static_cast<double>(cfg.n_averages),
                                          1.0 / cfg.n_averages);
    for (auto& p : mw) p *= gamma(rng);
  }

  trace.psd_dbm.resize(mw.size());
  for (std::size_t i = 0; i < mw.size(); ++i)
    trace.psd_dbm[i] = milliwatts_to_dbm(mw[i]);
  return trace;
}

SpectrumFit fit_spectrum(const SpectrumTrace& trace, const FitHints& hints) {
  validate(trace);
  const std::size_t n = trace.freqs.size();
  const double step = trace.freqs[1] - trace.freqs[0];

  std::vector<char> masked(n, 0);
  if (hints.exclude_center_hz > 0.0) {
    const double hw = hints.exclude_halfwidth_hz > 0.0 ? hints.exclude_halfwidth_hz
                                                       : 3.0 * step;
    for (std::size_t i = 0; i < n; ++i)
      if (std::abs(trace.freqs[i] - hints.exclude_center_hz) <= hw) masked[i] = 1;
  }

  std::vector<std::size_t> keep;
  std::vector<double> kept_dbm;
  for (std::size_t i = 0; i < n; ++i)
    if (!masked[i]) {
      keep.push_back(i);
      kept_dbm.push_back(trace.psd_dbm[i]);
    }
  if (keep.size() < 16) throw std::invalid_argument("spectrum: exclusion leaves too few bins");

  const double floor_dbm = median(kept_dbm);
  std::size_t i_peak = keep[0];
  for (auto i : keep)
    if (trace.psd_dbm[i] > trace.psd_dbm[i_peak]) i_peak = i;
  if (trace.psd_dbm[i_peak] - floor_dbm < 4.0)
    throw FitError("peak < 4 dB above floor");

  const std::size_t m = keep.size();
  std::vector<double> f(m), p_mw(m);
  for (std::size_t j = 0; j < m; ++j) {
    f[j] = trace.freqs[keep[j]];
    p_mw[j] = dbm_to_milliwatts(trace.psd_dbm[keep[j]]);
  }

  // initial guesses: highest bin, 3 dB width, median floor
  double f0 = hints.omega_m_hz > 0.0 ? hints.omega_m_hz : trace.freqs[i_peak];
  const double floor0 = dbm_to_milliwatts(floor_dbm);
  const double p_peak = dbm_to_milliwatts(trace.psd_dbm[i_peak]);
  double gamma0 = hints.gamma_m_hz;
  if (!(gamma0 > 0.0)) {
    const double half = floor0 + 0.5 * (p_peak - floor0);
    std::size_t lo = i_peak, hi = i_peak;
    while (lo > 0 && dbm_to_milliwatts(trace.psd_dbm[lo - 1]) > half) --lo;
    while (hi + 1 < n && dbm_to_milliwatts(trace.psd_dbm[hi + 1]) > half) ++hi;
    gamma0 = std::max(static_cast<double>(hi - lo + 1) * step, step);
  }
  double amp0 = (p_peak - floor0) * gamma0 * f0 * f0 / 2.0;

  const double sqrt_k = std::sqrt(static_cast<double>(trace.n_averages));
  std::vector<double> w(m);
  auto weights_from = [&](double om, double ga, double am, double fl) {
    for (std::size_t j = 0; j < m; ++j) {
      const double model = psd_model(f[j], om, ga, am) + fl;
      w[j] = sqrt_k / std::max(model, 1e-300);
    }
  };

  std::vector<double> model_mw(m);
  ResidualFn res = [&](const std::vector<double>& q) {
    kernels::dho_psd(f.data(), model_mw.data(), m, q[0], q[1], q[2], q[3]);
    std::vector<double> r(m);
    for (std::size_t j = 0; j < m; ++j) r[j] = (model_mw[j] - p_mw[j]) * w[j];
    return r;
  };
  JacobianFn jac = [&](const std::vector<double>& q) {
    std::vector<std::vector<double>> cols(4, std::vector<double>(m));
    const double om = q[0], ga = q[1], am = q[2];
    for (std::size_t j = 0; j < m; ++j) {
      const double f2 = f[j] * f[j];
      const double u = f2 - om * om;
      const double den = u * u + ga * ga * f2;
      const double den2 = den * den;
      cols[0][j] = am * 8.0 * ga * om * u / den2 * w[j];
      cols[1][j] = am * (2.0 * den - 4.0 * ga * ga * f2) / den2 * w[j];
      cols[2][j] = 2.0 * ga / den * w[j];
      cols[3][j] = w[j];
    }
    return cols;
  };

  LeastSquaresOptions opt;
  opt.typical_scale = {f0, std::max(gamma0, step), std::max(amp0, 1e-300), std::max(floor0, 1e-300)};
  opt.lower = {trace.freqs.front(), 1e-3 * step, 0.0, 1e-30};
  opt.upper = {trace.freqs.back(), trace.freqs.back() - trace.freqs.front(), 1e300, 1e300};

  weights_from(f0, gamma0, amp0, floor0);
  FitReport pass1 = least_squares(res, {f0, gamma0, amp0, floor0}, opt, jac,
                                  {"omega_m", "gamma_m", "amplitude", "floor_mw"});
  weights_from(pass1.params[0], pass1.params[1], pass1.params[2], pass1.params[3]);
  FitReport report = least_squares(res, pass1.params, opt, jac,
                                   {"omega_m", "gamma_m", "amplitude", "floor_mw"});

  SpectrumFit out;
  out.fit.omega_m_hz = report.params[0];
  out.fit.gamma_m_hz = report.params[1];
  out.fit.amplitude = report.params[2];
  out.fit.noise_floor_dbm = milliwatts_to_dbm(report.params[3]);
  out.report = std::move(report);
  return out;
}

G0Estimate extract_g0(const SpectrumTrace& trace, const SpectrumFit& fit,
                      const CalibrationTone& cal, double n_phonons) {
  validate(trace);
  if (!(n_phonons > 0.0))
    throw std::invalid_argument("extract_g0: phonon number must be positive");
  if (!(cal.f_mod_hz > 0.0) || !(cal.f_dev_hz > 0.0))
    throw std::invalid_argument("extract_g0: calibration tone must have positive f_mod and f_dev");
  if (cal.f_mod_hz < trace.freqs.front() || cal.f_mod_hz > trace.freqs.back())
    throw CalibrationError("calibration tone outside the trace span");
  if (!(fit.fit.amplitude > 0.0) || !(fit.fit.gamma_m_hz > 0.0))
    throw std::invalid_argument("extract_g0: fit lacks a mechanical line");

  const std::size_t bin = nearest_bin(trace.freqs, cal.f_mod_hz);
  const double p_bin = dbm_to_milliwatts(trace.psd_dbm[bin]);
  const double model = psd_model(trace.freqs[bin], fit.fit.omega_m_hz,
                                 fit.fit.gamma_m_hz, fit.fit.amplitude) +
                       dbm_to_milliwatts(fit.fit.noise_floor_dbm);
  const double net = p_bin - model;
  if (!(net > 0.0)) throw CalibrationError("missing calibration peak at f_mod");

  // S_peak gamma / 4 collapses to amplitude / (2 omega_m^2)
  const double s_num = fit.fit.amplitude / (2.0 * fit.fit.omega_m_hz * fit.fit.omega_m_hz);
  const double g0_sq = (1.0 / (2.0 * n_phonons)) * (cal.f_dev_hz * cal.f_dev_hz / 2.0) *
                       s_num / (net * trace.enbw_hz);
  G0Estimate est;
  est.g0_hz = std::sqrt(g0_sq);

  const double sigma_amp = fit.report.stderror("amplitude");
  const double rel_amp = sigma_amp / (2.0 * fit.fit.amplitude);
  const double rel_cal = (p_bin / std::sqrt(static_cast<double>(trace.n_averages))) /
                         (2.0 * net);
  est.stderr_hz = est.g0_hz * std::sqrt(rel_amp * rel_amp + rel_cal * rel_cal);
  return est;
}

G0Estimate g0_sqrt_n(const SpectrumTrace& trace, const SpectrumFit& fit,
                     const CalibrationTone& cal) {
  return extract_g0(trace, fit, cal, 1.0);
}

void write_spectrum_csv(std::ostream& out, const SpectrumTrace& trace,
                        const FlatConfig& meta) {
  FlatConfig full = meta;
  full.set("enbw_hz", trace.enbw_hz);
  full.set("n_averages", static_cast<double>(trace.n_averages));
  for (const auto& [k, v] : full.items()) out << "# " << k << " = " << v << "\n";
  out << "freq_hz,psd_dbm\n";
  char buf[96];
  for (std::size_t i = 0; i < trace.freqs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", trace.freqs[i], trace.psd_dbm[i]);
    out << buf;
  }
}

void write_spectrum_csv(const std::string& path, const SpectrumTrace& trace,
                        const FlatConfig& meta) {
  FlatConfig full = meta;
  full.set("enbw_hz", trace.enbw_hz);
  full.set("n_averages", static_cast<double>(trace.n_averages));
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write '" + path + "'");
  out << "freq_hz,psd_dbm\n";
  char buf[96];
  for (std::size_t i = 0; i < trace.freqs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", trace.freqs[i], trace.psd_dbm[i]);
    out << buf;
  }
  full.save(path + ".meta");
}

namespace {

SpectrumTrace parse_spectrum(std::istream& in, FlatConfig& meta) {
  SpectrumTrace trace;
  std::string line;
  bool header_seen = false;
  std::ostringstream meta_lines;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      meta_lines << line.substr(1) << "\n";
      continue;
    }
    if (!header_seen) {
      if (line.rfind("freq_hz,psd_dbm", 0) != 0)
        throw std::invalid_argument("spectrum CSV: bad header '" + line + "'");
      header_seen = true;
      continue;
    }
    double fr, db;
    if (std::sscanf(line.c_str(), "%lf,%lf", &fr, &db) != 2)
      throw std::invalid_argument("spectrum CSV: bad row '" + line + "'");
    trace.freqs.push_back(fr);
    trace.psd_dbm.push_back(db);
  }
  if (!header_seen) throw std::invalid_argument("spectrum CSV: empty input");
  std::istringstream ms(meta_lines.str());
  FlatConfig inline_meta = FlatConfig::parse(ms);
  for (const auto& [k, v] : inline_meta.items()) meta.set(k, v);
  return trace;
}

} // namespace

SpectrumTrace read_spectrum_csv(std::istream& in, FlatConfig* meta_out) {
  FlatConfig meta;
  SpectrumTrace trace = parse_spectrum(in, meta);
  trace.enbw_hz = meta.get_double("enbw_hz", 0.0);
  trace.n_averages = static_cast<int>(meta.get_int("n_averages", 1));
  if (meta_out) *meta_out = meta;
  return trace;
}

SpectrumTrace read_spectrum_csv(const std::string& path, FlatConfig* meta_out) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  FlatConfig meta;
  std::ifstream side(path + ".meta");
  if (side) {
    FlatConfig sidecar = FlatConfig::parse(side);
    for (const auto& [k, v] : sidecar.items()) meta.set(k, v);
  }
  SpectrumTrace trace = parse_spectrum(in, meta);
  trace.enbw_hz = meta.get_double("enbw_hz", 0.0);
  trace.n_averages = static_cast<int>(meta.get_int("n_averages", 1));
  if (meta_out) *meta_out = meta;
  return trace;
}

} // namespace fluxmech
