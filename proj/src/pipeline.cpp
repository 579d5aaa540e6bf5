#include "fluxmech/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "fluxmech/constants.hpp"
#include "fluxmech/fit.hpp"

namespace fluxmech {

namespace fs = std::filesystem;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / (v.size() - 1));
}

double median_of(std::vector<double> v) {
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

std::string format_reason(const char* fmt, double value) {
  char buf[128];
  std::snprintf(buf, sizeof buf, fmt, value);
  return buf;
}

std::string trace_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.csv", prefix, i);
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
  return seed ^ (0x9E3779B97F4A7C15ull * (i + 1));
}

} // namespace

// ---------------------------------------------------------------------------
// Runs and their IO

void validate(const MeasurementRun& run) {
  if (run.traces.empty()) throw std::invalid_argument("run: no traces");
  if (!run.vna_traces.empty() && run.vna_traces.size() != run.traces.size())
    throw std::invalid_argument("run: need one VNA trace per spectrum or none");
  for (const auto& t : run.traces) validate(t);
  for (const auto& v : run.vna_traces) validate(v);
  if (run.meta.temperature_k < 0.0)
    throw std::invalid_argument("run: negative temperature");
}

void write_run(const std::string& dir, const MeasurementRun& run) {
  validate(run);
  fs::create_directories(dir);
  FlatConfig meta;
  meta.set("run_type", run.meta.run_type);
  meta.set("flux_label", run.meta.flux_label);
  meta.set("temperature_k", run.meta.temperature_k);
  meta.set("input_power_dbm", run.meta.input_power_dbm);
  meta.set("pump_freq_hz", run.meta.pump_freq_hz);
  meta.set("cal_f_mod_hz", run.meta.cal.f_mod_hz);
  meta.set("cal_f_dev_hz", run.meta.cal.f_dev_hz);
  meta.set("n_traces", static_cast<double>(run.traces.size()));
  meta.set("has_vna", run.vna_traces.empty() ? 0.0 : 1.0);
  meta.save((fs::path(dir) / "meta.cfg").string());
  for (std::size_t i = 0; i < run.traces.size(); ++i) {
    write_spectrum_csv((fs::path(dir) / trace_name("trace", i)).string(),
                       run.traces[i], FlatConfig{});
    if (!run.vna_traces.empty())
      write_complex_trace_csv((fs::path(dir) / trace_name("vna", i)).string(),
                              run.vna_traces[i]);
  }
}

MeasurementRun read_run(const std::string& dir) {
  const fs::path root(dir);
  FlatConfig meta = FlatConfig::parse_file((root / "meta.cfg").string());
  MeasurementRun run;
  run.meta.run_type = meta.get_string("run_type");
  run.meta.flux_label = meta.get_string("flux_label");
  run.meta.temperature_k = meta.get_double("temperature_k", 0.0);
  run.meta.input_power_dbm = meta.get_double("input_power_dbm", 0.0);
  run.meta.pump_freq_hz = meta.get_double("pump_freq_hz", 0.0);
  run.meta.cal.f_mod_hz = meta.get_double("cal_f_mod_hz", 0.0);
  run.meta.cal.f_dev_hz = meta.get_double("cal_f_dev_hz", 0.0);
  const long long n = meta.get_int("n_traces", 0);
  const bool has_vna = meta.get_int("has_vna", 0) != 0;
  for (long long i = 0; i < n; ++i) {
    run.traces.push_back(
        read_spectrum_csv((root / trace_name("trace", i)).string()));
    if (has_vna)
      run.vna_traces.push_back(
          read_complex_trace_csv((root / trace_name("vna", i)).string()));
  }
  validate(run);
  return run;
}

// ---------------------------------------------------------------------------
// Averaging and rejection

std::vector<SpectrumTrace> average_groups(const MeasurementRun& run, int group_size) {
  if (group_size < 1)
    throw std::invalid_argument("average_groups: group_size must be >= 1");
  validate(run);
  const SpectrumTrace& ref = run.traces.front();
  for (const auto& t : run.traces)
    if (t.freqs != ref.freqs || t.enbw_hz != ref.enbw_hz)
      throw std::invalid_argument("average_groups: mismatched trace grids");

  const std::size_t nb = ref.freqs.size();
  const std::size_t n_out = run.traces.size() / group_size;
  std::vector<SpectrumTrace> out;
  out.reserve(n_out);
  std::vector<double> acc(nb);
  for (std::size_t g = 0; g < n_out; ++g) {
    SpectrumTrace avg;
    avg.freqs = ref.freqs;
    avg.enbw_hz = ref.enbw_hz;
    avg.n_averages = 0;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int k = 0; k < group_size; ++k) {
      const SpectrumTrace& t = run.traces[g * group_size + k];
      avg.n_averages += t.n_averages;
      for (std::size_t b = 0; b < nb; ++b) acc[b] += dbm_to_milliwatts(t.psd_dbm[b]);
    }
    avg.psd_dbm.resize(nb);
    for (std::size_t b = 0; b < nb; ++b)
      avg.psd_dbm[b] = milliwatts_to_dbm(acc[b] / group_size);
    out.push_back(std::move(avg));
  }
  return out;
}

FittedTrace fit_trace(const SpectrumTrace& trace, const FitHints& hints) {
  FittedTrace out;
  out.trace = trace;
  try {
    out.fit = fit_spectrum(trace, hints);
    out.fit_ok = true;
  } catch (const FitError& e) {
    out.fail_reason = e.what();
  }
  return out;
}

std::pair<std::vector<FittedTrace>, RejectionReport> apply_rejection(
    const std::vector<FittedTrace>& fits, const RejectionPolicy& policy,
    const CalibrationTone& cal) {
  RejectionReport report;
  std::vector<FittedTrace> accepted;
  std::vector<double> model;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const FittedTrace& ft = fits[i];
    TraceVerdict verdict{i, false, ""};
    if (!ft.fit_ok) {
      verdict.reason = "fit failed: " + ft.fail_reason;
    } else {
      const SpectrumTrace& tr = ft.trace;
      const MechSpectrumFit& mf = ft.fit.fit;
      psd_model(tr.freqs, model, mf.omega_m_hz, mf.gamma_m_hz, mf.amplitude,
                dbm_to_milliwatts(mf.noise_floor_dbm));
      // the calibration-tone window (3 bins, same as the fit exclusion) is
      // kept out of the max comparison; the tone has its own criterion
      double excl_lo = 1.0, excl_hi = 0.0;
      if (cal.f_mod_hz > 0.0 && tr.freqs.size() > 1) {
        const double hw = 3.0 * (tr.freqs[1] - tr.freqs[0]);
        excl_lo = cal.f_mod_hz - hw;
        excl_hi = cal.f_mod_hz + hw;
      }
      double data_max = -kInf, fit_max = -kInf;
      for (std::size_t b = 0; b < tr.freqs.size(); ++b) {
        if (tr.freqs[b] >= excl_lo && tr.freqs[b] <= excl_hi) continue;
        data_max = std::max(data_max, tr.psd_dbm[b]);
        fit_max = std::max(fit_max, milliwatts_to_dbm(model[b]));
      }
      if (data_max > fit_max + policy.max_fit_gap_db) {
        verdict.reason = format_reason("data max more than %g dB above the fit max",
                                       policy.max_fit_gap_db);
      } else if (fit_max - mf.noise_floor_dbm < policy.min_peak_above_floor_db) {
        verdict.reason = format_reason("peak < %g dB above floor",
                                       policy.min_peak_above_floor_db);
      } else if (cal.f_mod_hz > 0.0) {
        const std::size_t bin = nearest_bin(tr.freqs, cal.f_mod_hz);
        if (tr.psd_dbm[bin] < policy.min_cal_peak_dbm)
          verdict.reason = format_reason("calibration peak below %g dBm",
                                         policy.min_cal_peak_dbm);
      }
      verdict.accepted = verdict.reason.empty();
    }
    if (verdict.accepted) accepted.push_back(ft);
    else ++report.n_failed;
    report.verdicts.push_back(std::move(verdict));
  }
  if (!fits.empty() &&
      static_cast<double>(report.n_failed) / fits.size() > policy.max_group_failure_frac) {
    report.set_discarded = true;
    report.reason = format_reason("more than %g%% of the traces failed rejection",
                                  100.0 * policy.max_group_failure_frac);
    accepted.clear();
  }
  return {std::move(accepted), std::move(report)};
}

// ---------------------------------------------------------------------------
// Per-run observable and derived analyses

RunObservable run_g0_sqrt_n(const MeasurementRun& run, const RejectionPolicy& policy) {
  RunObservable out;
  if (!(run.meta.cal.f_mod_hz > 0.0)) {
    out.reason = "run has no calibration tone";
    return out;
  }
  std::vector<SpectrumTrace> averaged = average_groups(run, policy.group_size);
  FitHints hints;
  hints.exclude_center_hz = run.meta.cal.f_mod_hz;
  std::vector<FittedTrace> fits;
  fits.reserve(averaged.size());
  for (const auto& t : averaged) fits.push_back(fit_trace(t, hints));
  auto [accepted, rejection] = apply_rejection(fits, policy, run.meta.cal);
  out.rejection = std::move(rejection);
  if (out.rejection.set_discarded) {
    out.reason = out.rejection.reason;
    return out;
  }
  std::vector<double> values;
  for (const FittedTrace& ft : accepted) {
    try {
      values.push_back(g0_sqrt_n(ft.trace, ft.fit, run.meta.cal).g0_hz);
    } catch (const FitError&) {
      // extraction failure counts like any other lost group
    }
  }
  if (values.size() < static_cast<std::size_t>(std::max(policy.min_groups, 1))) {
    out.reason = format_reason("fewer than %g surviving groups",
                               static_cast<double>(std::max(policy.min_groups, 1)));
    return out;
  }
  out.mean_hz = mean_of(values);
  out.std_hz = sample_std(values, out.mean_hz);
  out.n_used = static_cast<int>(values.size());
  out.ok = true;
  return out;
}

RampFitResult temperature_ramp_fit(const std::vector<std::pair<double, double>>& points,
                                   double omega_m_hz) {
  if (points.size() < 3)
    throw std::invalid_argument("temperature ramp: need at least 3 points");
  if (!(omega_m_hz > 0.0))
    throw std::invalid_argument("temperature ramp: omega_m must be positive");
  double t_lo = kInf, t_hi = -kInf;
  for (const auto& [t, y] : points) {
    if (!(t >= 0.05 && t <= 1.0))
      throw std::invalid_argument("temperature ramp: temperatures must lie in [50 mK, 1 K]");
    if (!std::isfinite(y))
      throw std::invalid_argument("temperature ramp: non-finite observable");
    t_lo = std::min(t_lo, t);
    t_hi = std::max(t_hi, t);
  }
  if (!(t_hi > t_lo))
    throw FitError("degenerate temperature ramp: all temperatures equal");

  const std::size_t n = points.size();
  std::vector<double> s(n);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = std::sqrt(thermal_occupation(points[i].first, omega_m_hz));
    num += points[i].second * s[i];
    den += s[i] * s[i];
  }
  const double g0_init = std::max(num / den, 0.0);

  ResidualFn res = [&](const std::vector<double>& q) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = q[0] * s[i] - points[i].second;
    return r;
  };
  JacobianFn jac = [&](const std::vector<double>&) {
    return std::vector<std::vector<double>>{s};
  };
  LeastSquaresOptions opt;
  opt.typical_scale = {std::max(g0_init, 1.0)};
  opt.lower = {0.0};
  opt.upper = {1e12};
  RampFitResult out;
  out.report = least_squares(res, {g0_init}, opt, jac, {"g0"});
  out.g0_hz = out.report.params[0];
  return out;
}

std::vector<FluxPointCoupling> coupling_sweep_analysis(
    const std::vector<MeasurementRun>& runs, const CavityParams& cav,
    const MechanicalParams& mech, double temp_k, const RejectionPolicy& policy) {
  if (!(temp_k > 0.0))
    throw std::invalid_argument("coupling sweep: temperature must be positive");
  const double sqrt_nth = std::sqrt(thermal_occupation(temp_k, mech.omega_m));
  std::vector<FluxPointCoupling> out;
  out.reserve(runs.size());
  for (const MeasurementRun& run : runs) {
    FluxPointCoupling row;
    row.flux_label = run.meta.flux_label;
    try {
      std::size_t pos = 0;
      const double phi = std::stod(run.meta.flux_label, &pos);
      if (pos == run.meta.flux_label.size())
        row.predicted_g0_hz = coupling_g0(cav, mech, phi);
    } catch (const std::exception&) {
      // label is not a flux value; no prediction
    }
    RunObservable obs = run_g0_sqrt_n(run, policy);
    if (!obs.ok) {
      row.excluded = true;
      row.reason = obs.reason;
    } else {
      row.g0_mean_hz = obs.mean_hz / sqrt_nth;
      row.g0_std_hz = obs.std_hz / sqrt_nth;
      row.n_used = obs.n_used;
    }
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cavity tracking

CavityTrackResult cavity_track_fit(const ComplexTrace& vna, double pump_freq_hz) {
  validate(vna);
  const std::size_t n = vna.freqs.size();
  const double step = vna.freqs[1] - vna.freqs[0];

  std::vector<double> f, m2;
  f.reserve(n);
  m2.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double fr = vna.freqs[i];
    if (std::abs(fr - pump_freq_hz) <= 1e6) continue;
    if (std::abs(fr - (pump_freq_hz - 6e6)) <= 0.5e6) continue;
    f.push_back(fr);
    m2.push_back(std::norm(vna.s21[i]));
  }
  if (f.size() < std::max<std::size_t>(8, (2 * n) / 5))
    throw std::invalid_argument("excision removed more than 60% of the trace");

  const std::size_t m = f.size();
  std::size_t i_min = 0;
  for (std::size_t i = 1; i < m; ++i)
    if (m2[i] < m2[i_min]) i_min = i;
  const double base0 = median_of(m2);
  const double depth0 = base0 - m2[i_min];
  if (!(depth0 > 0.0)) throw FitError("no resonance dip in the trace");
  const double f0 = f[i_min];
  const double half = base0 - 0.5 * depth0;
  std::size_t lo = i_min, hi = i_min;
  while (lo > 0 && m2[lo - 1] <= half) --lo;
  while (hi + 1 < m && m2[hi + 1] <= half) ++hi;
  const double w0 = std::max(f[hi] - f[lo], 2.0 * step);

  ResidualFn res = [&](const std::vector<double>& q) {
    std::vector<double> r(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double u = 2.0 * (f[i] - q[0]) / q[1];
      r[i] = q[3] - q[2] / (1.0 + u * u) - m2[i];
    }
    return r;
  };
  JacobianFn jac = [&](const std::vector<double>& q) {
    std::vector<std::vector<double>> cols(4, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i) {
      const double u = 2.0 * (f[i] - q[0]) / q[1];
      const double den = 1.0 + u * u;
      const double den2 = den * den;
      cols[0][i] = -4.0 * u * q[2] / (q[1] * den2);
      cols[1][i] = -2.0 * u * u * q[2] / (q[1] * den2);
      cols[2][i] = -1.0 / den;
      cols[3][i] = 1.0;
    }
    return cols;
  };

  LeastSquaresOptions opt;
  opt.typical_scale = {std::max(std::abs(f0), 1.0), w0, std::max(depth0, 1e-12),
                       std::max(base0, 1e-12)};
  opt.lower = {vna.freqs.front(), step, 0.0, 0.0};
  opt.upper = {vna.freqs.back(), 2.0 * (vna.freqs.back() - vna.freqs.front()),
               10.0 * (depth0 + base0), 10.0 * (depth0 + base0)};
  CavityTrackResult out;
  out.report = least_squares(res, {f0, w0, depth0, base0}, opt, jac,
                             {"f0", "fwhm", "depth", "base"});
  out.f_cavity_hz = out.report.params[0];
  return out;
}

// ---------------------------------------------------------------------------
// Binning and the backaction model fit

std::vector<BinnedPoint> backaction_binning(const std::vector<DetunedFit>& points,
                                            double bin_width_hz, int min_traces) {
  if (!(bin_width_hz > 0.0))
    throw std::invalid_argument("binning: bin width must be positive");
  min_traces = std::max(min_traces, 1);
  std::map<long long, std::vector<const DetunedFit*>> groups;
  for (const DetunedFit& p : points)
    groups[static_cast<long long>(std::floor(p.detuning_hz / bin_width_hz))]
        .push_back(&p);

  std::vector<BinnedPoint> out;
  for (const auto& [key, members] : groups) {
    if (members.size() < static_cast<std::size_t>(min_traces)) continue;
    const double n = static_cast<double>(members.size());
    BinnedPoint bp;
    bp.n_traces = static_cast<int>(members.size());
    double err_sq = 0.0;
    for (const DetunedFit* p : members) {
      bp.detuning_mean_hz += p->detuning_hz;
      bp.fit.omega_m_hz += p->fit.omega_m_hz;
      bp.fit.gamma_m_hz += p->fit.gamma_m_hz;
      bp.fit.amplitude += p->fit.amplitude;
      bp.fit.noise_floor_dbm += p->fit.noise_floor_dbm;
      bp.fit.g0_sqrt_n_hz += p->fit.g0_sqrt_n_hz;
      err_sq += p->y_error_hz * p->y_error_hz;
    }
    bp.detuning_mean_hz /= n;
    bp.fit.omega_m_hz /= n;
    bp.fit.gamma_m_hz /= n;
    bp.fit.amplitude /= n;
    bp.fit.noise_floor_dbm /= n;
    bp.fit.g0_sqrt_n_hz /= n;
    bp.y_error_hz = std::sqrt(err_sq) / n;
    double var = 0.0;
    for (const DetunedFit* p : members) {
      const double d = p->detuning_hz - bp.detuning_mean_hz;
      var += d * d;
    }
    bp.detuning_std_hz = std::sqrt(var / n);
    out.push_back(std::move(bp));
  }
  return out;
}

BackactionFitResult backaction_model_fit(const std::vector<BinnedPoint>& binned,
                                         const CavityParams& cav,
                                         const MechanicalParams& mech,
                                         double temp_k) {
  const std::size_t nb = binned.size();
  if (nb < 5) throw std::invalid_argument("backaction fit: need at least 5 detuning bins");
  if (!(mech.gamma_m > 0.0) || !(cav.kappa() > 0.0))
    throw std::invalid_argument("backaction fit: kappa and gamma_m must be positive");
  bool has_neg = false, has_pos = false;
  double min_abs = kInf;
  for (const BinnedPoint& b : binned) {
    if (b.detuning_mean_hz < 0.0) has_neg = true;
    if (b.detuning_mean_hz > 0.0) has_pos = true;
    min_abs = std::min(min_abs, std::abs(b.detuning_mean_hz));
  }
  if (!(has_neg && has_pos) && !(min_abs < cav.kappa()))
    throw std::invalid_argument("backaction fit: bins do not span the resonance");

  const double n_th = thermal_occupation(temp_k, mech.omega_m);
  std::vector<double> det(nb), y(nb), sigma(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    det[i] = binned[i].detuning_mean_hz;
    const double s = binned[i].fit.g0_sqrt_n_hz;
    y[i] = s * s;
    sigma[i] = 2.0 * s * binned[i].y_error_hz;
  }
  // weights: unit when no bin reports an error (noiseless path)
  double min_pos = kInf;
  for (double sg : sigma)
    if (sg > 0.0) min_pos = std::min(min_pos, sg);
  std::vector<double> w(nb, 1.0);
  if (std::isfinite(min_pos))
    for (std::size_t i = 0; i < nb; ++i) w[i] = 1.0 / std::max(sigma[i], min_pos);

  // initial g0 from the far-detuned quartile, where n is close to thermal
  std::vector<std::size_t> order(nb);
  for (std::size_t i = 0; i < nb; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(det[a]) > std::abs(det[b]);
  });
  const std::size_t n_far = std::max<std::size_t>(nb / 4, 2);
  double far_mean = 0.0;
  for (std::size_t k = 0; k < n_far; ++k) far_mean += y[order[k]];
  far_mean /= n_far;
  const double g0_init = std::max(std::sqrt(std::max(far_mean, 0.0) / n_th), 1e-3);

  // steady-state phonons with the effective linewidth clamped positive so
  // the optimizer sees a finite (huge) value on the unstable side
  auto model_n = [&](double d, double n_ph, double g0, bool* stable) {
    const ScatteringRates r =
        scattering_rates(cav, mech, DriveConfig{d, n_ph, g0});
    const double gamma_eff = mech.gamma_m + r.anti_stokes_hz - r.stokes_hz;
    if (stable) *stable = gamma_eff > 0.0;
    const double clamped = std::max(gamma_eff, 1e-9 * mech.gamma_m);
    return (mech.gamma_m * n_th + r.stokes_hz) / clamped;
  };

  // limit-cycle prefilter at the initial coupling scale
  auto limit_cycle_mask = [&](double g0) {
    std::vector<char> mask(nb, 0);
    for (std::size_t i = 0; i < nb; ++i)
      if (y[i] > 10.0 * n_th * g0 * g0) mask[i] = 1;
    return mask;
  };
  std::vector<char> mask = limit_cycle_mask(g0_init);

  auto masked_ssr = [&](double n_ph, double g0, double off) {
    double ssr = 0.0;
    for (std::size_t i = 0; i < nb; ++i) {
      if (mask[i]) continue;
      const double r = (g0 * g0 * model_n(det[i] + off, n_ph, g0, nullptr) - y[i]) * w[i];
      ssr += r * r;
    }
    return ssr;
  };

  // coarse photon-number scan to seed the optimizer
  double best_n = 0.0, best_ssr = masked_ssr(0.0, g0_init, 0.0);
  for (int k = 0; k <= 60; ++k) {
    const double n_ph = std::pow(10.0, -3.0 + 0.1 * k);
    const double ssr = masked_ssr(n_ph, g0_init, 0.0);
    if (ssr < best_ssr) {
      best_ssr = ssr;
      best_n = n_ph;
    }
  }

  std::vector<double> start = {best_n, g0_init, 0.0};
  FitReport report;
  std::vector<std::size_t> kept;
  for (int round = 0; round < 5; ++round) {
    kept.clear();
    for (std::size_t i = 0; i < nb; ++i)
      if (!mask[i]) kept.push_back(i);
    if (kept.empty()) throw FitError("all bins unstable");

    ResidualFn res = [&, kept](const std::vector<double>& q) {
      std::vector<double> r(kept.size());
      for (std::size_t j = 0; j < kept.size(); ++j) {
        const std::size_t i = kept[j];
        r[j] = (q[1] * q[1] * model_n(det[i] + q[2], q[0], q[1], nullptr) - y[i]) * w[i];
      }
      return r;
    };
    LeastSquaresOptions opt;
    opt.typical_scale = {std::max(best_n, 1e-2), g0_init, 1e5};
    opt.lower = {0.0, 1e-3 * g0_init, -cav.kappa()};
    opt.upper = {1e9, 1e3 * g0_init, cav.kappa()};
    report = least_squares(res, start, opt, nullptr,
                           {"n_photons", "g0", "freq_offset"});

    std::vector<char> next = limit_cycle_mask(report.params[1]);
    for (std::size_t i = 0; i < nb; ++i) {
      bool stable = true;
      model_n(det[i] + report.params[2], report.params[0], report.params[1], &stable);
      if (!stable) next[i] = 1;
    }
    start = report.params;
    if (next == mask) break;
    mask = std::move(next);
  }

  // a drive pinned at zero reproduces any flat y = const exactly (thermal
  // occupation times an inflated g0), so n and g0 are degenerate there; this
  // is what uniformly limit-cycled data collapses to
  if (!(report.params[0] > 1e-3))
    throw FitError("photon number collapsed to zero: no backaction signature in the bins");

  BackactionFitResult out;
  out.n_photons = report.params[0];
  out.g0_hz = report.params[1];
  out.freq_offset_hz = report.params[2];
  out.n_thermal = n_th;
  out.report = std::move(report);
  for (std::size_t i = 0; i < nb; ++i)
    if (mask[i]) out.excluded_bins.push_back(static_cast<int>(i));
  return out;
}

BackactionAnalysis analyze_backaction_run(const MeasurementRun& run,
                                          const CavityParams& cav,
                                          const MechanicalParams& mech,
                                          const RejectionPolicy& policy,
                                          double bin_width_hz) {
  validate(run);
  if (run.vna_traces.size() != run.traces.size())
    throw std::invalid_argument("backaction run needs one VNA trace per spectrum");
  if (!(run.meta.pump_freq_hz > 0.0))
    throw std::invalid_argument("backaction run needs a pump frequency");
  if (!(run.meta.cal.f_mod_hz > 0.0))
    throw std::invalid_argument("backaction run needs a calibration tone");
  const int gs = std::max(policy.group_size, 1);
  const std::size_t n_groups = run.traces.size() / gs;
  if (n_groups == 0)
    throw std::invalid_argument("backaction run: not enough traces for one group");

  std::vector<double> trace_det(run.traces.size());
  std::vector<std::string> track_err(run.traces.size());
  for (std::size_t i = 0; i < run.traces.size(); ++i) {
    try {
      trace_det[i] = run.meta.pump_freq_hz -
                     cavity_track_fit(run.vna_traces[i], run.meta.pump_freq_hz).f_cavity_hz;
    } catch (const std::exception& e) {
      track_err[i] = e.what();
    }
  }

  std::vector<SpectrumTrace> averaged = average_groups(run, gs);
  FitHints hints;
  hints.exclude_center_hz = run.meta.cal.f_mod_hz;

  std::vector<FittedTrace> fits(n_groups);
  std::vector<double> group_det(n_groups, 0.0);
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::string err;
    double mean = 0.0;
    for (int k = 0; k < gs; ++k) {
      const std::size_t i = g * gs + k;
      if (!track_err[i].empty() && err.empty()) err = track_err[i];
      mean += trace_det[i];
    }
    if (!err.empty()) {
      fits[g].trace = averaged[g];
      fits[g].fail_reason = "cavity tracking failed: " + err;
    } else {
      group_det[g] = mean / gs;
      fits[g] = fit_trace(averaged[g], hints);
    }
  }

  auto [accepted, rejection] = apply_rejection(fits, policy, run.meta.cal);
  BackactionAnalysis out;
  out.rejection = std::move(rejection);
  if (out.rejection.set_discarded)
    throw FitError("rejection discarded the whole run: " + out.rejection.reason);

  std::size_t k = 0;
  std::vector<TraceVerdict> extraction_failures;
  for (const TraceVerdict& v : out.rejection.verdicts) {
    if (!v.accepted) continue;
    const FittedTrace& ft = accepted[k++];
    try {
      const G0Estimate est = g0_sqrt_n(ft.trace, ft.fit, run.meta.cal);
      DetunedFit df;
      df.detuning_hz = group_det[v.index];
      df.fit = ft.fit.fit;
      df.fit.g0_sqrt_n_hz = est.g0_hz;
      df.y_error_hz = est.stderr_hz;
      out.points.push_back(std::move(df));
    } catch (const FitError& e) {
      extraction_failures.push_back(
          {v.index, false, std::string("g0 extraction failed: ") + e.what()});
    }
  }
  out.rejection.n_failed += extraction_failures.size();
  for (auto& v : extraction_failures)
    out.rejection.verdicts.push_back(std::move(v));
  if (out.points.size() < static_cast<std::size_t>(std::max(policy.min_groups, 1)))
    throw FitError("fewer than min_groups traces survived rejection");
  out.bins = backaction_binning(out.points, bin_width_hz);
  if (out.bins.empty()) throw FitError("no detuning bin has enough traces");
  out.fit = backaction_model_fit(out.bins, cav, mech, run.meta.temperature_k);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic run generators

std::vector<RampPoint> synthesize_temperature_ramp(double g0_hz, double omega_m_hz,
                                                   const std::vector<double>& temps_k,
                                                   double rel_noise,
                                                   std::uint64_t seed) {
  if (!(omega_m_hz > 0.0))
    throw std::invalid_argument("ramp generator: omega_m must be positive");
  if (!(g0_hz >= 0.0) || !(rel_noise >= 0.0))
    throw std::invalid_argument("ramp generator: negative g0 or noise");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<RampPoint> out;
  out.reserve(temps_k.size());
  for (double t : temps_k) {
    const double base = g0_hz * std::sqrt(thermal_occupation(t, omega_m_hz));
    out.push_back({t, base * (1.0 + rel_noise * gauss(rng))});
  }
  return out;
}

MeasurementRun synthesize_coupling_run(const CavityParams& cav,
                                       const MechanicalParams& mech,
                                       const CouplingRunConfig& cfg) {
  if (cfg.n_traces < 1)
    throw std::invalid_argument("coupling generator: need at least one trace");
  const double g0 = coupling_g0(cav, mech, cfg.phi_ext);
  const double n_th = thermal_occupation(cfg.temperature_k, mech.omega_m);

  MeasurementRun run;
  run.meta.run_type = "coupling";
  char label[40];
  std::snprintf(label, sizeof label, "%.17g", cfg.phi_ext);
  run.meta.flux_label = label;
  run.meta.temperature_k = cfg.temperature_k;
  run.meta.cal = CalibrationTone::near(mech.omega_m, cfg.f_dev_hz);

  MechSpectrumFit line;
  line.omega_m_hz = mech.omega_m;
  line.gamma_m_hz = mech.gamma_m;
  line.noise_floor_dbm = -120.0;
  line.g0_sqrt_n_hz = g0 * std::sqrt(n_th);

  SynthesisConfig sc = cfg.synth;
  sc.center_hz = mech.omega_m;
  for (int i = 0; i < cfg.n_traces; ++i) {
    sc.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(i));
    run.traces.push_back(synthesize_spectrum(line, run.meta.cal, sc));
  }
  return run;
}

MeasurementRun synthesize_backaction_run(const CavityParams& cav,
                                         const MechanicalParams& mech,
                                         const BackactionRunConfig& cfg) {
  if (cfg.n_groups < 1 || cfg.group_size < 1)
    throw std::invalid_argument("backaction generator: need at least one group");
  if (!(cfg.detuning_hi_hz > cfg.detuning_lo_hz) || !(cfg.detuning_step_hz > 0.0))
    throw std::invalid_argument("backaction generator: bad detuning range");
  if (!(cfg.pump_freq_hz > 0.0))
    throw std::invalid_argument("backaction generator: pump frequency must be positive");
  if (cfg.vna_points < 64 || !(cfg.vna_span_hz > 0.0) ||
      !(cfg.vna_depth > 0.0 && cfg.vna_depth < 1.0))
    throw std::invalid_argument("backaction generator: bad VNA shape");

  // dwell points: half-integer multiples of the step inside the range (the
  // centers of the downstream detuning bins)
  std::vector<double> dwell;
  for (long long mstep = static_cast<long long>(
           std::ceil(cfg.detuning_lo_hz / cfg.detuning_step_hz - 0.5));
       (mstep + 0.5) * cfg.detuning_step_hz <= cfg.detuning_hi_hz; ++mstep)
    dwell.push_back((mstep + 0.5) * cfg.detuning_step_hz);
  if (dwell.empty())
    throw std::invalid_argument("backaction generator: range shorter than one step");
  const std::size_t per_dwell =
      std::max<std::size_t>(static_cast<std::size_t>(cfg.n_groups) / dwell.size(), 1);

  const double n_th = thermal_occupation(cfg.temperature_k, mech.omega_m);
  MeasurementRun run;
  run.meta.run_type = "backaction";
  run.meta.flux_label = "drift";
  run.meta.temperature_k = cfg.temperature_k;
  run.meta.pump_freq_hz = cfg.pump_freq_hz;
  run.meta.cal = CalibrationTone::near(mech.omega_m, cfg.f_dev_hz);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double jitter = cfg.with_noise ? cfg.detuning_jitter_hz : 0.0;
  const double vna_sigma = cfg.with_noise ? cfg.vna_noise : 0.0;
  const double dip = 1.0 - std::sqrt(1.0 - cfg.vna_depth); // complex-amplitude depth

  SynthesisConfig sc = cfg.synth;
  sc.center_hz = mech.omega_m;
  sc.with_noise = cfg.with_noise;

  const double vna_lo = cfg.pump_freq_hz - 0.5 * cfg.vna_span_hz;
  const double vna_step = cfg.vna_span_hz / (cfg.vna_points - 1);

  std::size_t trace_index = 0;
  for (int g = 0; g < cfg.n_groups; ++g) {
    const std::size_t d =
        std::min(static_cast<std::size_t>(g) / per_dwell, dwell.size() - 1);
    for (int k = 0; k < cfg.group_size; ++k, ++trace_index) {
      const double detuning = dwell[d] + jitter * gauss(rng);

      const BackactionResult ba = backaction(
          cav, mech, DriveConfig{detuning, cfg.n_photons, cfg.g0_hz},
          cfg.temperature_k);
      MechSpectrumFit line;
      line.noise_floor_dbm = -120.0;
      if (ba.stable) {
        line.omega_m_hz = mech.omega_m + ba.omega_shift_hz;
        line.gamma_m_hz = ba.gamma_eff_hz;
        line.g0_sqrt_n_hz = cfg.g0_hz * std::sqrt(ba.n_final);
      } else {
        // limit cycle: bright line at the intrinsic linewidth
        line.omega_m_hz = mech.omega_m;
        line.gamma_m_hz = mech.gamma_m;
        line.g0_sqrt_n_hz = cfg.g0_hz * std::sqrt(1000.0 * n_th);
      }
      sc.seed = mix_seed(cfg.seed, trace_index);
      run.traces.push_back(synthesize_spectrum(line, run.meta.cal, sc));

      // VNA trace: dip at the drifted cavity, pump leakage, mixer spur
      const double f_c = cfg.pump_freq_hz - detuning;
      ComplexTrace vna;
      vna.freqs.resize(cfg.vna_points);
      vna.s21.resize(cfg.vna_points);
      for (int i = 0; i < cfg.vna_points; ++i) {
        const double fr = vna_lo + vna_step * i;
        vna.freqs[i] = fr;
        const std::complex<double> lor =
            1.0 - dip / std::complex<double>(1.0, 2.0 * (fr - f_c) / cav.kappa());
        const double du_pump = (fr - cfg.pump_freq_hz) / 2e5;
        const double du_spur = (fr - (cfg.pump_freq_hz - 6e6)) / 1e5;
        std::complex<double> v = lor + 0.5 * std::exp(-du_pump * du_pump) +
                                 0.3 * std::exp(-du_spur * du_spur);
        if (vna_sigma > 0.0)
          v += std::complex<double>(vna_sigma * gauss(rng), vna_sigma * gauss(rng));
        vna.s21[i] = v;
      }
      run.vna_traces.push_back(std::move(vna));
    }
  }
  return run;
}

} // namespace fluxmech
