#include "fluxmech/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fluxmech/constants.hpp"
#include "fluxmech/optomech.hpp"
#include "fluxmech/pipeline.hpp"
#include "fluxmech/resonator_fit.hpp"
#include "fluxmech/spectra.hpp"
#include "fluxmech/squid_cavity.hpp"

namespace fluxmech {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// builtin device: the shipped fixture values, overridable via --config
constexpr double kOmegaMax = 8.1676e9;
constexpr double kKappaC = 1.4e6;
constexpr double kKappaI = 1.4e6;
constexpr double kPhiMismatch = 0.23;
constexpr double kOmegaM = 274383.13;
constexpr double kGammaM = 0.3;
constexpr double kMassEff = 1.3996e-11;
constexpr double kFluxPerZpm = 1.6e-6;
constexpr double kTemperature = 0.1;
constexpr double kFDev = 2000.0;
// shipped S21 fixture
constexpr double kS21Amp = 0.32;
constexpr double kS21Alpha = -0.56;
constexpr double kS21Tau = 6.98e-8;
constexpr double kS21FRes = 8.1672e9;
constexpr double kS21Phi0 = 0.23;
constexpr double kS21Ql = 2913.0;
constexpr double kS21QcAbs = 5758.0;

struct Device {
  CavityParams cav;
  MechanicalParams mech;
  FlatConfig cfg;
};

Device device_from_config(const FlatConfig& cfg) {
  Device d;
  d.cfg = cfg;
  if (cfg.has("omega_max")) {
    d.cav = cavity_from_config(cfg);
  } else {
    d.cav = CavityParams{kOmegaMax, 1.0, kKappaC, kKappaI, kPhiMismatch};
  }
  if (cfg.has("omega_m")) {
    d.mech = mechanical_from_config(cfg);
  } else {
    d.mech.omega_m = kOmegaM;
    d.mech.gamma_m = kGammaM;
    d.mech.mass_eff = kMassEff;
    d.mech.x_zpm = zero_point_motion(kMassEff, kOmegaM);
    d.mech.flux_per_zpm = kFluxPerZpm;
  }
  return d;
}

Device load_device(const std::string& config_path) {
  return device_from_config(config_path.empty() ? FlatConfig{}
                                                : FlatConfig::parse_file(config_path));
}

// '-' routes structured output to stdout (pipe mode); then the human summary
// moves to stderr
struct OutStream {
  std::ofstream file;
  std::ostream* os = &std::cout;
  bool to_stdout = true;
  explicit OutStream(const std::string& path) {
    if (path != "-") {
      file.open(path);
      if (!file) throw std::invalid_argument("cannot write '" + path + "'");
      os = &file;
      to_stdout = false;
    }
  }
  std::ostream& data() { return *os; }
  std::ostream& summary() { return to_stdout ? std::cerr : std::cout; }
};

double pick(double flag_value, const FlatConfig& cfg, const char* key, double dflt) {
  if (std::isfinite(flag_value)) return flag_value;
  return cfg.get_double(key, dflt);
}

void write_json(OutStream& out, const json& j) { out.data() << j.dump(2) << "\n"; }

json report_to_json(const FitReport& report) {
  json se;
  for (std::size_t i = 0; i < report.names.size(); ++i)
    se[report.names[i]] = report.stderrors[i];
  return {{"stderr", se},
          {"converged", report.converged},
          {"n_iter", report.n_iter},
          {"residual_norm", report.residual_norm}};
}

// ---------------------------------------------------------------------------
// simulate-s21 / fit-s21

struct SimS21Args {
  std::string config, out = "-";
  std::uint64_t seed = 1;
  double f_res = kNaN, q_loaded = kNaN, q_coupling = kNaN, phi0 = kNaN;
  double amp = kNaN, alpha = kNaN, tau = kNaN;
  double f_start = kNaN, f_stop = kNaN, noise = 0.0;
  int points = 2001;
};

void cmd_simulate_s21(const SimS21Args& a) {
  const FlatConfig cfg =
      a.config.empty() ? FlatConfig{} : FlatConfig::parse_file(a.config);
  NotchParams notch;
  notch.q_loaded = pick(a.q_loaded, cfg, "s21_q_loaded", kS21Ql);
  notch.q_coupling_abs = pick(a.q_coupling, cfg, "s21_q_coupling_abs", kS21QcAbs);
  notch.phi0 = pick(a.phi0, cfg, "s21_phi0", kS21Phi0);
  notch.f_res = pick(a.f_res, cfg, "s21_f_res", kS21FRes);
  EnvironmentParams env;
  env.amp = pick(a.amp, cfg, "s21_amp", kS21Amp);
  env.alpha = pick(a.alpha, cfg, "s21_alpha", kS21Alpha);
  env.tau = pick(a.tau, cfg, "s21_tau", kS21Tau);
  const double kappa_l = notch.f_res / notch.q_loaded;
  const double f_start = pick(a.f_start, cfg, "s21_f_start", notch.f_res - 3.0 * kappa_l);
  const double f_stop = pick(a.f_stop, cfg, "s21_f_stop", notch.f_res + 3.0 * kappa_l);

  const ComplexTrace trace =
      synthesize_s21(notch, env, f_start, f_stop, a.points, a.noise, a.seed);
  OutStream out(a.out);
  write_complex_trace_csv(out.data(), trace);
  char line[160];
  std::snprintf(line, sizeof line,
                "s21: %d points, f_res = %.6g Hz, Q_l = %.6g, |Q_c| = %.6g\n",
                a.points, notch.f_res, notch.q_loaded, notch.q_coupling_abs);
  out.summary() << line;
}

struct FitS21Args {
  std::string config, in = "-", out = "-";
  std::uint64_t seed = 1;
};

void cmd_fit_s21(const FitS21Args& a) {
  const ComplexTrace trace =
      a.in == "-" ? read_complex_trace_csv(std::cin) : read_complex_trace_csv(a.in);
  const CircleFitResult res = circle_fit(trace);

  json j = report_to_json(res.report);
  j["amp"] = res.env.amp;
  j["alpha"] = res.env.alpha;
  j["tau_s"] = res.env.tau;
  j["f_res_hz"] = res.notch.f_res;
  j["q_loaded"] = res.notch.q_loaded;
  j["q_coupling_abs"] = res.notch.q_coupling_abs;
  j["phi0"] = res.notch.phi0;
  j["kappa_loaded_hz"] = kappa_from_q(res.notch.f_res, res.notch.q_loaded);
  j["kappa_coupling_re_hz"] =
      res.notch.f_res * std::cos(res.notch.phi0) / res.notch.q_coupling_abs;
  try {
    const double qi = q_internal(res.notch, QConvention::diameter_correction);
    j["q_internal_diameter"] = qi;
    j["kappa_internal_hz"] = kappa_from_q(res.notch.f_res, qi);
  } catch (const FitError&) {
    j["q_internal_diameter"] = nullptr;
    j["kappa_internal_hz"] = nullptr;
  }
  try {
    j["q_internal_simple"] = q_internal(res.notch, QConvention::simple_reciprocal);
  } catch (const FitError&) {
    j["q_internal_simple"] = nullptr;
  }

  OutStream out(a.out);
  write_json(out, j);
  char line[200];
  std::snprintf(line, sizeof line,
                "fit: f_res = %.8g Hz, Q_l = %.6g, |Q_c| = %.6g, phi0 = %.4g rad\n",
                res.notch.f_res, res.notch.q_loaded, res.notch.q_coupling_abs,
                res.notch.phi0);
  out.summary() << line;
}

// ---------------------------------------------------------------------------
// simulate-spectrum / fit-spectrum / calibrate-g0

struct SimSpectrumArgs {
  std::string config, out = "-";
  std::uint64_t seed = 1;
  double g0 = 48.0, temp = kNaN, n_phonons = kNaN;
  double omega_m = kNaN, gamma_m = kNaN, floor_dbm = -120.0, f_dev = kNaN;
  double span = 800.0, enbw = 0.1, gain = 5e-19;
  int points = 8001, averages = 100;
  bool no_noise = false;
};

void cmd_simulate_spectrum(const SimSpectrumArgs& a) {
  const Device dev = load_device(a.config);
  const double omega_m = std::isfinite(a.omega_m) ? a.omega_m : dev.mech.omega_m;
  const double gamma_m = std::isfinite(a.gamma_m) ? a.gamma_m : dev.mech.gamma_m;
  const double temp = pick(a.temp, dev.cfg, "temperature_k", kTemperature);
  const double f_dev = pick(a.f_dev, dev.cfg, "cal_f_dev_hz", kFDev);
  const double n_ph =
      std::isfinite(a.n_phonons) ? a.n_phonons : thermal_occupation(temp, omega_m);

  MechSpectrumFit line;
  line.omega_m_hz = omega_m;
  line.gamma_m_hz = gamma_m;
  line.noise_floor_dbm = a.floor_dbm;
  line.g0_sqrt_n_hz = a.g0 * std::sqrt(n_ph);
  const CalibrationTone cal = CalibrationTone::near(omega_m, f_dev);

  SynthesisConfig sc;
  sc.span_hz = a.span;
  sc.n_points = a.points;
  sc.seed = a.seed;
  sc.enbw_hz = a.enbw;
  sc.n_averages = a.averages;
  sc.with_noise = !a.no_noise;
  sc.gain = a.gain;
  const SpectrumTrace trace = synthesize_spectrum(line, cal, sc);

  FlatConfig meta;
  meta.set("temperature_k", temp);
  meta.set("cal_f_mod_hz", cal.f_mod_hz);
  meta.set("cal_f_dev_hz", cal.f_dev_hz);
  if (std::isfinite(a.n_phonons)) meta.set("n_phonons", a.n_phonons);

  OutStream out(a.out);
  if (out.to_stdout) write_spectrum_csv(out.data(), trace, meta);
  else write_spectrum_csv(a.out, trace, meta);
  char line_buf[200];
  std::snprintf(line_buf, sizeof line_buf,
                "spectrum: g0 sqrt(n) = %.6g Hz (g0 = %.6g Hz, n = %.6g), "
                "cal tone at %.6g Hz\n",
                line.g0_sqrt_n_hz, a.g0, n_ph, cal.f_mod_hz);
  out.summary() << line_buf;
}

struct FitSpectrumArgs {
  std::string config, in = "-", out = "-";
  std::uint64_t seed = 1;
  double exclude_center = kNaN, exclude_halfwidth = kNaN;
  double omega_hint = kNaN, gamma_hint = kNaN;
};

void cmd_fit_spectrum(const FitSpectrumArgs& a) {
  FlatConfig meta;
  const SpectrumTrace trace = a.in == "-" ? read_spectrum_csv(std::cin, &meta)
                                          : read_spectrum_csv(a.in, &meta);
  FitHints hints;
  hints.exclude_center_hz = std::isfinite(a.exclude_center)
                                ? a.exclude_center
                                : meta.get_double("cal_f_mod_hz", 0.0);
  if (std::isfinite(a.exclude_halfwidth)) hints.exclude_halfwidth_hz = a.exclude_halfwidth;
  if (std::isfinite(a.omega_hint)) hints.omega_m_hz = a.omega_hint;
  if (std::isfinite(a.gamma_hint)) hints.gamma_m_hz = a.gamma_hint;

  const SpectrumFit fit = fit_spectrum(trace, hints);
  meta.set("fit_omega_m_hz", fit.fit.omega_m_hz);
  meta.set("fit_omega_m_stderr_hz", fit.report.stderror("omega_m"));
  meta.set("fit_gamma_m_hz", fit.fit.gamma_m_hz);
  meta.set("fit_gamma_m_stderr_hz", fit.report.stderror("gamma_m"));
  meta.set("fit_amplitude", fit.fit.amplitude);
  meta.set("fit_amplitude_stderr", fit.report.stderror("amplitude"));
  meta.set("fit_floor_dbm", fit.fit.noise_floor_dbm);
  meta.set("fit_converged", fit.report.converged ? 1.0 : 0.0);
  meta.set("fit_residual_norm", fit.report.residual_norm);

  OutStream out(a.out);
  if (out.to_stdout) write_spectrum_csv(out.data(), trace, meta);
  else write_spectrum_csv(a.out, trace, meta);
  char line[200];
  std::snprintf(line, sizeof line,
                "fit: omega_m = %.8g Hz, gamma_m = %.6g Hz, floor = %.4g dBm, "
                "converged = %d\n",
                fit.fit.omega_m_hz, fit.fit.gamma_m_hz, fit.fit.noise_floor_dbm,
                fit.report.converged ? 1 : 0);
  out.summary() << line;
}

struct CalibrateG0Args {
  std::string config, in = "-", out = "-";
  std::uint64_t seed = 1;
  double n_phonons = kNaN, temp = kNaN;
};

void cmd_calibrate_g0(const CalibrateG0Args& a) {
  FlatConfig meta;
  const SpectrumTrace trace = a.in == "-" ? read_spectrum_csv(std::cin, &meta)
                                          : read_spectrum_csv(a.in, &meta);
  CalibrationTone cal;
  cal.f_mod_hz = meta.get_double("cal_f_mod_hz", 0.0);
  cal.f_dev_hz = meta.get_double("cal_f_dev_hz", 0.0);
  if (!(cal.f_mod_hz > 0.0))
    throw std::invalid_argument("input carries no calibration-tone metadata");

  SpectrumFit fit;
  if (meta.has("fit_omega_m_hz")) {
    fit.fit.omega_m_hz = meta.get_double("fit_omega_m_hz");
    fit.fit.gamma_m_hz = meta.get_double("fit_gamma_m_hz");
    fit.fit.amplitude = meta.get_double("fit_amplitude");
    fit.fit.noise_floor_dbm = meta.get_double("fit_floor_dbm");
    fit.report.names = {"omega_m", "gamma_m", "amplitude", "floor_mw"};
    fit.report.params = {fit.fit.omega_m_hz, fit.fit.gamma_m_hz, fit.fit.amplitude,
                         dbm_to_milliwatts(fit.fit.noise_floor_dbm)};
    fit.report.stderrors = {meta.get_double("fit_omega_m_stderr_hz", 0.0),
                            meta.get_double("fit_gamma_m_stderr_hz", 0.0),
                            meta.get_double("fit_amplitude_stderr", 0.0), 0.0};
    fit.report.converged = meta.get_double("fit_converged", 1.0) != 0.0;
  } else {
    FitHints hints;
    hints.exclude_center_hz = cal.f_mod_hz;
    fit = fit_spectrum(trace, hints);
  }

  double n_ph = a.n_phonons;
  if (!std::isfinite(n_ph) && meta.has("n_phonons")) n_ph = meta.get_double("n_phonons");
  if (!std::isfinite(n_ph)) {
    const double temp = std::isfinite(a.temp) ? a.temp
                                              : meta.get_double("temperature_k", kNaN);
    if (!std::isfinite(temp))
      throw std::invalid_argument(
          "no phonon number available: pass --n-phonons or --temp, or provide "
          "temperature_k metadata");
    n_ph = thermal_occupation(temp, fit.fit.omega_m_hz);
  }

  const G0Estimate est = extract_g0(trace, fit, cal, n_ph);
  const G0Estimate raw = g0_sqrt_n(trace, fit, cal);

  json j;
  j["g0_hz"] = est.g0_hz;
  j["g0_stderr_hz"] = est.stderr_hz;
  j["g0_sqrt_n_hz"] = raw.g0_hz;
  j["g0_sqrt_n_stderr_hz"] = raw.stderr_hz;
  j["n_phonons"] = n_ph;
  j["omega_m_hz"] = fit.fit.omega_m_hz;
  j["gamma_m_hz"] = fit.fit.gamma_m_hz;

  OutStream out(a.out);
  write_json(out, j);
  char line[160];
  std::snprintf(line, sizeof line, "g0 = %.6g +- %.3g Hz at n = %.6g phonons\n",
                est.g0_hz, est.stderr_hz, n_ph);
  out.summary() << line;
}

// ---------------------------------------------------------------------------
// flux-map

struct FluxMapArgs {
  std::string config, out = "-";
  std::uint64_t seed = 1;
  int points = 1001;
  bool with_cooperativity = false;
};

void cmd_flux_map(const FluxMapArgs& a) {
  const Device dev = load_device(a.config);
  if (a.points < 2) throw std::invalid_argument("flux-map: need at least 2 points");
  const double lim = dev.cav.flux_period / 2.0 - kFluxEdgeMargin;

  OutStream out(a.out);
  out.data() << (a.with_cooperativity
                     ? "phi,omega_c_hz,sensitivity_hz_per_phi0,g0_hz,kappa_hz,cooperativity\n"
                     : "phi,omega_c_hz,sensitivity_hz_per_phi0,g0_hz\n");
  char row[220];
  for (int i = 0; i < a.points; ++i) {
    // midpoint sampling keeps every point inside the validity window
    const double phi = -lim + (2.0 * lim) * (i + 0.5) / a.points;
    const double omega_c = flux_map(dev.cav, phi);
    const double sens = flux_sensitivity(dev.cav, phi);
    const double g0 = coupling_g0(dev.cav, dev.mech, phi);
    if (a.with_cooperativity) {
      const double c0 = cooperativity(g0, dev.cav.kappa(), dev.mech.gamma_m);
      std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", phi,
                    omega_c, sens, g0, dev.cav.kappa(), c0);
    } else {
      std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g\n", phi, omega_c,
                    sens, g0);
    }
    out.data() << row;
  }
  char line[120];
  std::snprintf(line, sizeof line, "flux map: %d points over phi in [%.4g, %.4g]\n",
                a.points, -lim, lim);
  out.summary() << line;
}

// ---------------------------------------------------------------------------
// backaction-sweep (model curves and synthetic-run emission)

struct BackactionSweepArgs {
  std::string config, out = "-", emit_run, run_config;
  std::uint64_t seed = 1;
  CLI::Option* seed_opt = nullptr;
  double g0 = 2460.0, photons = 0.9, temp = kNaN;
  double lo = -8e6, hi = 4e6;
  int steps = 241;
  bool sweep_photons = false;
  double detuning = -1.4e6, photons_lo = 0.01, photons_hi = 100.0;
  bool no_noise = false;
};

BackactionRunConfig run_config_from(const FlatConfig& c) {
  BackactionRunConfig rc;
  rc.n_photons = c.get_double("n_photons", rc.n_photons);
  rc.g0_hz = c.get_double("g0_hz", rc.g0_hz);
  rc.temperature_k = c.get_double("temperature_k", rc.temperature_k);
  rc.detuning_lo_hz = c.get_double("detuning_lo_hz", rc.detuning_lo_hz);
  rc.detuning_hi_hz = c.get_double("detuning_hi_hz", rc.detuning_hi_hz);
  rc.detuning_step_hz = c.get_double("detuning_step_hz", rc.detuning_step_hz);
  rc.n_groups = static_cast<int>(c.get_int("n_groups", rc.n_groups));
  rc.group_size = static_cast<int>(c.get_int("group_size", rc.group_size));
  rc.detuning_jitter_hz = c.get_double("detuning_jitter_hz", rc.detuning_jitter_hz);
  rc.seed = static_cast<std::uint64_t>(c.get_int("seed", static_cast<long long>(rc.seed)));
  rc.f_dev_hz = c.get_double("f_dev_hz", rc.f_dev_hz);
  rc.pump_freq_hz = c.get_double("pump_freq_hz", rc.pump_freq_hz);
  rc.with_noise = c.get_int("with_noise", rc.with_noise ? 1 : 0) != 0;
  rc.synth.span_hz = c.get_double("synth_span_hz", rc.synth.span_hz);
  rc.synth.n_points = static_cast<int>(c.get_int("synth_n_points", rc.synth.n_points));
  rc.synth.enbw_hz = c.get_double("synth_enbw_hz", rc.synth.enbw_hz);
  rc.synth.n_averages =
      static_cast<int>(c.get_int("synth_n_averages", rc.synth.n_averages));
  rc.synth.gain = c.get_double("synth_gain", rc.synth.gain);
  rc.vna_span_hz = c.get_double("vna_span_hz", rc.vna_span_hz);
  rc.vna_points = static_cast<int>(c.get_int("vna_points", rc.vna_points));
  rc.vna_depth = c.get_double("vna_depth", rc.vna_depth);
  rc.vna_noise = c.get_double("vna_noise", rc.vna_noise);
  return rc;
}

void cmd_backaction_sweep(const BackactionSweepArgs& a) {
  const Device dev = load_device(a.config);
  const double temp = pick(a.temp, dev.cfg, "temperature_k", kTemperature);

  if (!a.emit_run.empty()) {
    BackactionRunConfig rc =
        a.run_config.empty() ? BackactionRunConfig{}
                             : run_config_from(FlatConfig::parse_file(a.run_config));
    if (a.seed_opt && a.seed_opt->count() > 0) rc.seed = a.seed;
    if (a.no_noise) rc.with_noise = false;
    const MeasurementRun run = synthesize_backaction_run(dev.cav, dev.mech, rc);
    write_run(a.emit_run, run);
    std::cout << "emitted " << run.traces.size() << " traces ("
              << run.vna_traces.size() << " VNA traces) to " << a.emit_run << "\n";
    return;
  }

  OutStream out(a.out);
  if (a.sweep_photons) {
    if (a.steps < 2 || !(a.photons_hi > a.photons_lo) || !(a.photons_lo >= 0.0))
      throw std::invalid_argument("backaction-sweep: bad photon range");
    out.data() << "n_photons,n_final,gamma_eff_hz,omega_shift_hz,stable\n";
    char row[180];
    for (int i = 0; i < a.steps; ++i) {
      const double n_ph =
          a.photons_lo + (a.photons_hi - a.photons_lo) * i / (a.steps - 1);
      const BackactionResult r = backaction(
          dev.cav, dev.mech, DriveConfig{a.detuning, n_ph, a.g0}, temp);
      std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%d\n", n_ph, r.n_final,
                    r.gamma_eff_hz, r.omega_shift_hz, r.stable ? 1 : 0);
      out.data() << row;
    }
    out.summary() << "photon sweep: " << a.steps << " steps at detuning "
                  << a.detuning << " Hz\n";
  } else {
    const auto rows = detuning_sweep(dev.cav, dev.mech, a.g0, a.photons, temp,
                                     a.lo, a.hi, a.steps);
    write_detuning_sweep_csv(out.data(), rows);
    out.summary() << "detuning sweep: " << rows.size() << " steps, g0 = " << a.g0
                  << " Hz, n_photons = " << a.photons << "\n";
  }
}

// ---------------------------------------------------------------------------
// fit-backaction

struct FitBackactionArgs {
  std::string config, in, out = "-", bins_csv, model_csv;
  std::uint64_t seed = 1;
  double bin_width = 1e6;
  int min_groups = 1, group_size = 4;
};

void write_bins_csv(const std::string& path, const BackactionAnalysis& analysis) {
  std::ofstream f(path);
  if (!f) throw std::invalid_argument("cannot write '" + path + "'");
  f << "detuning_mean_hz,detuning_std_hz,g0_sqrt_n_hz,y_error_hz,n_traces,"
       "phonons,gamma_eff_hz,excluded\n";
  const double g0 = analysis.fit.g0_hz;
  char row[260];
  for (std::size_t i = 0; i < analysis.bins.size(); ++i) {
    const BinnedPoint& b = analysis.bins[i];
    const bool excl = std::find(analysis.fit.excluded_bins.begin(),
                                analysis.fit.excluded_bins.end(),
                                static_cast<int>(i)) != analysis.fit.excluded_bins.end();
    const double s = b.fit.g0_sqrt_n_hz;
    std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%d,%.17g,%.17g,%d\n",
                  b.detuning_mean_hz, b.detuning_std_hz, s, b.y_error_hz, b.n_traces,
                  (s / g0) * (s / g0), b.fit.gamma_m_hz, excl ? 1 : 0);
    f << row;
  }
}

void write_model_csv(const std::string& path, const BackactionAnalysis& analysis,
                     const Device& dev, double temp_k) {
  std::ofstream f(path);
  if (!f) throw std::invalid_argument("cannot write '" + path + "'");
  f << "detuning_hz,n_final,gamma_eff_hz,omega_shift_hz,stable\n";
  double lo = analysis.bins.front().detuning_mean_hz;
  double hi = lo;
  for (const BinnedPoint& b : analysis.bins) {
    lo = std::min(lo, b.detuning_mean_hz);
    hi = std::max(hi, b.detuning_mean_hz);
  }
  lo -= 1e6;
  hi += 1e6;
  const int steps = 481;
  char row[180];
  for (int i = 0; i < steps; ++i) {
    const double d = lo + (hi - lo) * i / (steps - 1);
    const BackactionResult r = backaction(
        dev.cav, dev.mech,
        DriveConfig{d + analysis.fit.freq_offset_hz, analysis.fit.n_photons,
                    analysis.fit.g0_hz},
        temp_k);
    std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g,%.17g,%d\n", d, r.n_final,
                  r.gamma_eff_hz, r.omega_shift_hz, r.stable ? 1 : 0);
    f << row;
  }
}

json backaction_to_json(const BackactionAnalysis& analysis) {
  json j = report_to_json(analysis.fit.report);
  j["n_photons"] = analysis.fit.n_photons;
  j["g0_hz"] = analysis.fit.g0_hz;
  j["freq_offset_hz"] = analysis.fit.freq_offset_hz;
  j["n_thermal"] = analysis.fit.n_thermal;
  j["excluded_bins"] = analysis.fit.excluded_bins;
  j["n_points"] = analysis.points.size();
  j["n_rejected"] = analysis.rejection.n_failed;
  json bins = json::array();
  const double g0 = analysis.fit.g0_hz;
  for (std::size_t i = 0; i < analysis.bins.size(); ++i) {
    const BinnedPoint& b = analysis.bins[i];
    const bool excl = std::find(analysis.fit.excluded_bins.begin(),
                                analysis.fit.excluded_bins.end(),
                                static_cast<int>(i)) != analysis.fit.excluded_bins.end();
    bins.push_back({{"detuning_mean_hz", b.detuning_mean_hz},
                    {"detuning_std_hz", b.detuning_std_hz},
                    {"g0_sqrt_n_hz", b.fit.g0_sqrt_n_hz},
                    {"y_error_hz", b.y_error_hz},
                    {"n_traces", b.n_traces},
                    {"phonons", (b.fit.g0_sqrt_n_hz / g0) * (b.fit.g0_sqrt_n_hz / g0)},
                    {"excluded", excl}});
  }
  j["bins"] = bins;
  return j;
}

void cmd_fit_backaction(const FitBackactionArgs& a) {
  if (a.in.empty()) throw std::invalid_argument("fit-backaction: --in <run dir> required");
  const Device dev = load_device(a.config);
  const MeasurementRun run = read_run(a.in);
  RejectionPolicy policy;
  policy.min_groups = a.min_groups;
  policy.group_size = a.group_size;
  const BackactionAnalysis analysis =
      analyze_backaction_run(run, dev.cav, dev.mech, policy, a.bin_width);

  if (!a.bins_csv.empty()) write_bins_csv(a.bins_csv, analysis);
  if (!a.model_csv.empty())
    write_model_csv(a.model_csv, analysis, dev, run.meta.temperature_k);

  OutStream out(a.out);
  write_json(out, backaction_to_json(analysis));
  char line[220];
  std::snprintf(line, sizeof line,
                "backaction: n_photons = %.4g +- %.2g, g0 = %.5g +- %.2g Hz, "
                "offset = %.4g Hz, %zu bins (%zu excluded)\n",
                analysis.fit.n_photons, analysis.fit.report.stderror("n_photons"),
                analysis.fit.g0_hz, analysis.fit.report.stderror("g0"),
                analysis.fit.freq_offset_hz, analysis.bins.size(),
                analysis.fit.excluded_bins.size());
  out.summary() << line;
}

// ---------------------------------------------------------------------------
// temp-ramp

struct TempRampArgs {
  std::string config, in, out = "-", csv;
  std::uint64_t seed = 1;
  double g0 = 48.0, t_lo = 0.08, t_hi = 0.7, noise = 0.02;
  int steps = 14;
};

std::vector<std::pair<double, double>> read_ramp_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open '" + path + "'");
  std::vector<std::pair<double, double>> points;
  std::string line;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line.rfind("temperature_k,g0_sqrt_n_hz", 0) != 0)
        throw std::invalid_argument("ramp CSV: bad header '" + line + "'");
      header_seen = true;
      continue;
    }
    double t, y;
    if (std::sscanf(line.c_str(), "%lf,%lf", &t, &y) != 2)
      throw std::invalid_argument("ramp CSV: bad row '" + line + "'");
    points.emplace_back(t, y);
  }
  if (!header_seen) throw std::invalid_argument("ramp CSV: empty input");
  return points;
}

void cmd_temp_ramp(const TempRampArgs& a) {
  const Device dev = load_device(a.config);
  std::vector<std::pair<double, double>> points;
  if (!a.in.empty()) {
    points = read_ramp_csv(a.in);
  } else {
    if (a.steps < 3) throw std::invalid_argument("temp-ramp: need at least 3 steps");
    std::vector<double> temps(a.steps);
    for (int i = 0; i < a.steps; ++i)
      temps[i] = a.t_lo + (a.t_hi - a.t_lo) * i / (a.steps - 1);
    for (const RampPoint& p : synthesize_temperature_ramp(
             a.g0, dev.mech.omega_m, temps, a.noise, a.seed))
      points.emplace_back(p.temperature_k, p.g0_sqrt_n_hz);
  }
  const RampFitResult fit = temperature_ramp_fit(points, dev.mech.omega_m);

  if (!a.csv.empty()) {
    std::ofstream f(a.csv);
    if (!f) throw std::invalid_argument("cannot write '" + a.csv + "'");
    f << "temperature_k,g0_sqrt_n_hz,model_hz\n";
    char row[120];
    for (const auto& [t, y] : points) {
      std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g\n", t, y,
                    fit.g0_hz * std::sqrt(thermal_occupation(t, dev.mech.omega_m)));
      f << row;
    }
  }

  json j = report_to_json(fit.report);
  j["g0_hz"] = fit.g0_hz;
  j["g0_stderr_hz"] = fit.report.stderror("g0");
  j["n_points"] = points.size();
  OutStream out(a.out);
  write_json(out, j);
  char line[140];
  std::snprintf(line, sizeof line, "ramp fit: g0 = %.5g +- %.2g Hz over %zu points\n",
                fit.g0_hz, fit.report.stderror("g0"), points.size());
  out.summary() << line;
}

// ---------------------------------------------------------------------------
// run-pipeline

struct RunPipelineArgs {
  std::string config, in, out = "pipeline_out";
  std::uint64_t seed = 1;
};

void cmd_run_pipeline(const RunPipelineArgs& a) {
  if (a.in.empty()) throw std::invalid_argument("run-pipeline: --in <root dir> required");
  run_full_pipeline(a.in, a.out,
                    a.config.empty() ? FlatConfig{} : FlatConfig::parse_file(a.config));
  std::cout << "pipeline results written to " << a.out << "\n";
}

} // namespace

void run_full_pipeline(const std::string& in_root, const std::string& out_dir,
                       const FlatConfig& device) {
  const Device dev = device_from_config(device);
  fs::create_directories(out_dir);

  std::vector<fs::path> run_dirs;
  for (const auto& entry : fs::directory_iterator(in_root))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.cfg"))
      run_dirs.push_back(entry.path());
  std::sort(run_dirs.begin(), run_dirs.end());
  if (run_dirs.empty())
    throw std::invalid_argument("run-pipeline: no run directories under '" + in_root + "'");

  json results;
  results["schema"] = "fluxmech-results-1";
  json dev_json;
  for (const auto& [k, v] : device.items()) dev_json[k] = v;
  results["device"] = dev_json;

  json runs_json = json::array();
  json backaction_json = json::array();
  std::vector<MeasurementRun> coupling_runs;
  std::vector<std::pair<double, double>> ramp_points;
  json ramp_runs_json = json::array();

  for (const fs::path& dir : run_dirs) {
    const MeasurementRun run = read_run(dir.string());
    const std::string name = dir.filename().string();
    runs_json.push_back({{"name", name},
                         {"type", run.meta.run_type},
                         {"n_traces", run.traces.size()}});

    if (run.meta.run_type == "backaction") {
      RejectionPolicy policy;
      policy.min_groups = 1;
      const BackactionAnalysis analysis =
          analyze_backaction_run(run, dev.cav, dev.mech, policy);
      json j = backaction_to_json(analysis);
      j["run"] = name;
      backaction_json.push_back(j);
      write_bins_csv((fs::path(out_dir) / (name + "_bins.csv")).string(), analysis);
      write_model_csv((fs::path(out_dir) / (name + "_model.csv")).string(), analysis,
                      dev, run.meta.temperature_k);
    } else if (run.meta.run_type == "coupling") {
      coupling_runs.push_back(run);
    } else if (run.meta.run_type == "temperature_ramp") {
      RejectionPolicy policy;
      policy.min_groups = 1;
      const RunObservable obs = run_g0_sqrt_n(run, policy);
      json j = {{"run", name},
                {"temperature_k", run.meta.temperature_k},
                {"ok", obs.ok}};
      if (obs.ok) {
        j["g0_sqrt_n_hz"] = obs.mean_hz;
        j["g0_sqrt_n_std_hz"] = obs.std_hz;
        j["n_used"] = obs.n_used;
        ramp_points.emplace_back(run.meta.temperature_k, obs.mean_hz);
      } else {
        j["reason"] = obs.reason;
      }
      ramp_runs_json.push_back(j);
    } else {
      throw std::invalid_argument("run '" + name + "' has unknown run_type '" +
                                  run.meta.run_type + "'");
    }
  }
  results["runs"] = runs_json;
  if (!backaction_json.empty()) results["backaction"] = backaction_json;

  if (!coupling_runs.empty()) {
    const double temp = coupling_runs.front().meta.temperature_k;
    const auto rows =
        coupling_sweep_analysis(coupling_runs, dev.cav, dev.mech, temp);
    json arr = json::array();
    std::ofstream csv(fs::path(out_dir) / "coupling.csv");
    csv << "flux_label,g0_mean_hz,g0_std_hz,n_used,excluded,predicted_g0_hz\n";
    char row[260];
    for (const FluxPointCoupling& r : rows) {
      arr.push_back({{"flux_label", r.flux_label},
                     {"g0_mean_hz", r.g0_mean_hz},
                     {"g0_std_hz", r.g0_std_hz},
                     {"n_used", r.n_used},
                     {"excluded", r.excluded},
                     {"reason", r.reason},
                     {"predicted_g0_hz", r.predicted_g0_hz}});
      std::snprintf(row, sizeof row, "%s,%.17g,%.17g,%d,%d,%.17g\n",
                    r.flux_label.c_str(), r.g0_mean_hz, r.g0_std_hz, r.n_used,
                    r.excluded ? 1 : 0, r.predicted_g0_hz);
      csv << row;
    }
    results["coupling"] = arr;
  }

  if (!ramp_runs_json.empty()) {
    json ramp = {{"runs", ramp_runs_json}};
    if (ramp_points.size() >= 3) {
      std::sort(ramp_points.begin(), ramp_points.end());
      const RampFitResult fit = temperature_ramp_fit(ramp_points, dev.mech.omega_m);
      ramp["g0_hz"] = fit.g0_hz;
      ramp["g0_stderr_hz"] = fit.report.stderror("g0");
      ramp["converged"] = fit.report.converged;
      std::ofstream csv(fs::path(out_dir) / "temperature_ramp.csv");
      csv << "temperature_k,g0_sqrt_n_hz,model_hz\n";
      char row[120];
      for (const auto& [t, y] : ramp_points) {
        std::snprintf(row, sizeof row, "%.17g,%.17g,%.17g\n", t, y,
                      fit.g0_hz * std::sqrt(thermal_occupation(t, dev.mech.omega_m)));
        csv << row;
      }
    }
    results["temperature_ramp"] = ramp;
  }

  std::ofstream out(fs::path(out_dir) / "results.json");
  if (!out) throw std::invalid_argument("cannot write results.json in '" + out_dir + "'");
  out << results.dump(2) << "\n";
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"flux-mediated magneto-mechanics: simulation and analysis"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, std::string& config, std::string& out,
                       std::uint64_t& seed) -> CLI::Option* {
    sub->add_option("--config", config, "flat key-value config file");
    sub->add_option("--out", out, "output path ('-' = stdout)");
    return sub->add_option("--seed", seed, "RNG seed");
  };

  auto s21_sim = std::make_shared<SimS21Args>();
  {
    CLI::App* sub = app.add_subcommand("simulate-s21", "synthesize a notch S21 trace");
    add_common(sub, s21_sim->config, s21_sim->out, s21_sim->seed);
    sub->add_option("--f-res", s21_sim->f_res, "resonance frequency, Hz");
    sub->add_option("--q-loaded", s21_sim->q_loaded, "loaded quality factor");
    sub->add_option("--q-coupling", s21_sim->q_coupling, "|Q_c|");
    sub->add_option("--phi0", s21_sim->phi0, "impedance-mismatch rotation, rad");
    sub->add_option("--amp", s21_sim->amp, "environment amplitude");
    sub->add_option("--alpha", s21_sim->alpha, "environment phase, rad");
    sub->add_option("--tau", s21_sim->tau, "cable delay, s");
    sub->add_option("--f-start", s21_sim->f_start, "grid start, Hz");
    sub->add_option("--f-stop", s21_sim->f_stop, "grid stop, Hz");
    sub->add_option("--points", s21_sim->points, "number of points");
    sub->add_option("--noise", s21_sim->noise, "complex noise sigma per quadrature");
    sub->callback([s21_sim] { cmd_simulate_s21(*s21_sim); });
  }

  auto s21_fit = std::make_shared<FitS21Args>();
  {
    CLI::App* sub = app.add_subcommand("fit-s21", "circle-fit a notch S21 trace");
    add_common(sub, s21_fit->config, s21_fit->out, s21_fit->seed);
    sub->add_option("--in", s21_fit->in, "input CSV ('-' = stdin)");
    sub->callback([s21_fit] { cmd_fit_s21(*s21_fit); });
  }

  auto spec_sim = std::make_shared<SimSpectrumArgs>();
  {
    CLI::App* sub =
        app.add_subcommand("simulate-spectrum", "synthesize a displacement spectrum");
    add_common(sub, spec_sim->config, spec_sim->out, spec_sim->seed);
    sub->add_option("--g0", spec_sim->g0, "single-photon coupling, Hz");
    sub->add_option("--temp", spec_sim->temp, "temperature, K");
    sub->add_option("--n-phonons", spec_sim->n_phonons, "phonon number override");
    sub->add_option("--omega-m", spec_sim->omega_m, "mechanical frequency, Hz");
    sub->add_option("--gamma-m", spec_sim->gamma_m, "mechanical linewidth, Hz");
    sub->add_option("--floor", spec_sim->floor_dbm, "noise floor, dBm");
    sub->add_option("--f-dev", spec_sim->f_dev, "calibration frequency deviation, Hz");
    sub->add_option("--span", spec_sim->span, "span, Hz");
    sub->add_option("--points", spec_sim->points, "number of bins");
    sub->add_option("--enbw", spec_sim->enbw, "equivalent noise bandwidth, Hz");
    sub->add_option("--averages", spec_sim->averages, "periodogram averages per bin");
    sub->add_option("--gain", spec_sim->gain, "transduction gain, mW/(Hz^2/Hz)");
    sub->add_flag("--no-noise", spec_sim->no_noise, "noiseless synthesis");
    sub->callback([spec_sim] { cmd_simulate_spectrum(*spec_sim); });
  }

  auto spec_fit = std::make_shared<FitSpectrumArgs>();
  {
    CLI::App* sub = app.add_subcommand("fit-spectrum", "fit a displacement spectrum");
    add_common(sub, spec_fit->config, spec_fit->out, spec_fit->seed);
    sub->add_option("--in", spec_fit->in, "input CSV ('-' = stdin)");
    sub->add_option("--exclude-center", spec_fit->exclude_center,
                    "mask center, Hz (default: calibration tone from metadata)");
    sub->add_option("--exclude-halfwidth", spec_fit->exclude_halfwidth,
                    "mask half-width, Hz");
    sub->add_option("--omega-hint", spec_fit->omega_hint, "initial omega_m, Hz");
    sub->add_option("--gamma-hint", spec_fit->gamma_hint, "initial gamma_m, Hz");
    sub->callback([spec_fit] { cmd_fit_spectrum(*spec_fit); });
  }

  auto cal = std::make_shared<CalibrateG0Args>();
  {
    CLI::App* sub = app.add_subcommand(
        "calibrate-g0", "extract g0 from the calibration tone of a fitted spectrum");
    add_common(sub, cal->config, cal->out, cal->seed);
    sub->add_option("--in", cal->in, "input CSV ('-' = stdin)");
    sub->add_option("--n-phonons", cal->n_phonons, "phonon number");
    sub->add_option("--temp", cal->temp, "temperature for the thermal phonon number, K");
    sub->callback([cal] { cmd_calibrate_g0(*cal); });
  }

  auto fmap = std::make_shared<FluxMapArgs>();
  {
    CLI::App* sub = app.add_subcommand(
        "flux-map", "cavity frequency, flux sensitivity and g0 over one flux period");
    add_common(sub, fmap->config, fmap->out, fmap->seed);
    sub->add_option("--points", fmap->points, "number of flux points");
    sub->add_flag("--with-cooperativity", fmap->with_cooperativity,
                  "append kappa and single-photon cooperativity columns");
    sub->callback([fmap] { cmd_flux_map(*fmap); });
  }

  auto basweep = std::make_shared<BackactionSweepArgs>();
  {
    CLI::App* sub = app.add_subcommand(
        "backaction-sweep", "model detuning/photon sweeps or emit a synthetic run");
    basweep->seed_opt = add_common(sub, basweep->config, basweep->out, basweep->seed);
    sub->add_option("--g0", basweep->g0, "single-photon coupling, Hz");
    sub->add_option("--photons", basweep->photons, "intracavity photon number");
    sub->add_option("--temp", basweep->temp, "temperature, K");
    sub->add_option("--lo", basweep->lo, "detuning start, Hz");
    sub->add_option("--hi", basweep->hi, "detuning stop, Hz");
    sub->add_option("--steps", basweep->steps, "number of steps");
    sub->add_flag("--sweep-photons", basweep->sweep_photons,
                  "sweep photon number at fixed --detuning instead");
    sub->add_option("--detuning", basweep->detuning, "fixed detuning, Hz");
    sub->add_option("--photons-lo", basweep->photons_lo, "photon sweep start");
    sub->add_option("--photons-hi", basweep->photons_hi, "photon sweep stop");
    sub->add_option("--emit-run", basweep->emit_run,
                    "write a synthetic measurement run to this directory");
    sub->add_option("--run-config", basweep->run_config,
                    "generator config for --emit-run");
    sub->add_flag("--no-noise", basweep->no_noise, "noiseless --emit-run");
    sub->callback([basweep] { cmd_backaction_sweep(*basweep); });
  }

  auto bafit = std::make_shared<FitBackactionArgs>();
  {
    CLI::App* sub = app.add_subcommand(
        "fit-backaction", "full backaction analysis of a measurement-run directory");
    add_common(sub, bafit->config, bafit->out, bafit->seed);
    sub->add_option("--in", bafit->in, "run directory");
    sub->add_option("--bin-width", bafit->bin_width, "detuning bin width, Hz");
    sub->add_option("--min-groups", bafit->min_groups, "survivors required");
    sub->add_option("--group-size", bafit->group_size, "averaging group size");
    sub->add_option("--bins-csv", bafit->bins_csv, "write binned points CSV here");
    sub->add_option("--model-csv", bafit->model_csv, "write fitted model curve CSV here");
    sub->callback([bafit] { cmd_fit_backaction(*bafit); });
  }

  auto ramp = std::make_shared<TempRampArgs>();
  {
    CLI::App* sub = app.add_subcommand(
        "temp-ramp", "fit g0 from a temperature ramp (synthetic or --in CSV)");
    add_common(sub, ramp->config, ramp->out, ramp->seed);
    sub->add_option("--in", ramp->in, "ramp CSV (temperature_k,g0_sqrt_n_hz)");
    sub->add_option("--g0", ramp->g0, "generator g0, Hz");
    sub->add_option("--t-lo", ramp->t_lo, "ramp start, K");
    sub->add_option("--t-hi", ramp->t_hi, "ramp stop, K");
    sub->add_option("--steps", ramp->steps, "number of temperatures");
    sub->add_option("--noise", ramp->noise, "relative noise on the observable");
    sub->add_option("--csv", ramp->csv, "write points + model CSV here");
    sub->callback([ramp] { cmd_temp_ramp(*ramp); });
  }

  auto pipe = std::make_shared<RunPipelineArgs>();
  {
    CLI::App* sub = app.add_subcommand(
        "run-pipeline", "analyze every run directory under --in, write results.json");
    add_common(sub, pipe->config, pipe->out, pipe->seed);
    sub->add_option("--in", pipe->in, "root directory of measurement runs");
    sub->callback([pipe] { cmd_run_pipeline(*pipe); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const FitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

} // namespace fluxmech
