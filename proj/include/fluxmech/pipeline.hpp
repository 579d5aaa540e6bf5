#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fluxmech/optomech.hpp"
#include "fluxmech/resonator_fit.hpp"
#include "fluxmech/spectra.hpp"
#include "fluxmech/squid_cavity.hpp"

namespace fluxmech {

// ---------------------------------------------------------------------------
// Measurement runs

struct RunMeta {
  std::string run_type;       // "backaction" | "coupling" | "temperature_ramp"
  std::string flux_label;     // operator label for the flux bias point
  double temperature_k = 0.0;
  double input_power_dbm = 0.0;
  double pump_freq_hz = 0.0;  // 0 = no pump (coupling / ramp runs)
  CalibrationTone cal;        // f_mod 0 = no calibration tone
};

// One measurement window: consecutive displacement spectra, optionally a VNA
// cavity trace per spectrum (backaction runs, where the cavity drifts).
struct MeasurementRun {
  std::vector<SpectrumTrace> traces;
  std::vector<ComplexTrace> vna_traces; // empty, or one per trace
  RunMeta meta;
};

void validate(const MeasurementRun& run);

// Directory layout: `meta.cfg` plus trace_NNNN.csv (+ sidecars) and, when
// present, vna_NNNN.csv.
void write_run(const std::string& dir, const MeasurementRun& run);
MeasurementRun read_run(const std::string& dir);

// ---------------------------------------------------------------------------
// Averaging and rejection

// Bin-wise mean in linear power over consecutive non-overlapping groups;
// trailing partial group dropped; n_averages multiplied by group_size.
std::vector<SpectrumTrace> average_groups(const MeasurementRun& run, int group_size);

struct RejectionPolicy {
  double max_fit_gap_db = 4.0;          // data max at most this far above fit max
  double min_peak_above_floor_db = 4.0; // fit peak at least this far above floor
  double max_group_failure_frac = 0.25; // beyond this the whole set is discarded
  int min_groups = 7;                   // survivors required (1 for backaction runs)
  double min_cal_peak_dbm = -130.0;     // calibration-bin power threshold
  int group_size = 4;
};

// Spectrum fit outcome kept alongside its trace; fit_ok false when the fit
// itself failed (reason carries the error).
struct FittedTrace {
  SpectrumTrace trace;
  SpectrumFit fit;
  bool fit_ok = false;
  std::string fail_reason;
};

// fit_spectrum wrapper that never throws on fit failure.
FittedTrace fit_trace(const SpectrumTrace& trace, const FitHints& hints = {});

struct TraceVerdict {
  std::size_t index = 0;
  bool accepted = false;
  std::string reason; // empty when accepted
};

struct RejectionReport {
  std::vector<TraceVerdict> verdicts;
  bool set_discarded = false; // failure fraction exceeded the policy limit
  std::string reason;
  std::size_t n_failed = 0;
};

// Per-trace criteria: (a) data max no more than max_fit_gap_db above the fit
// max, (b) fit peak at least min_peak_above_floor_db above the fitted floor,
// (c) calibration bin at least min_cal_peak_dbm (when `cal` has a tone).
// When the failure fraction exceeds max_group_failure_frac the accepted list
// is emptied and set_discarded is raised. min_groups is enforced by callers.
std::pair<std::vector<FittedTrace>, RejectionReport> apply_rejection(
    const std::vector<FittedTrace>& fits, const RejectionPolicy& policy,
    const CalibrationTone& cal = {});

// Mean and scatter of the per-group g0 sqrt(n) observable for one run:
// average in groups, fit, reject, extract the calibration-tone observable
// from each survivor. ok is false when the set was discarded or fewer than
// policy.min_groups survive.
struct RunObservable {
  double mean_hz = 0.0;
  double std_hz = 0.0; // sample standard deviation over the groups
  int n_used = 0;
  bool ok = false;
  std::string reason;
  RejectionReport rejection;
};
RunObservable run_g0_sqrt_n(const MeasurementRun& run, const RejectionPolicy& policy);

// ---------------------------------------------------------------------------
// Temperature ramp

// One-parameter fit of g0 * sqrt(thermal_occupation(T, omega_m)) to
// (temperature K, g0 sqrt(n) Hz) points. Temperatures must lie in
// [50 mK, 1 K]; all-equal temperatures raise FitError.
struct RampFitResult {
  double g0_hz = 0.0;
  FitReport report; // name: g0
};
RampFitResult temperature_ramp_fit(const std::vector<std::pair<double, double>>& points,
                                   double omega_m_hz);

// ---------------------------------------------------------------------------
// Coupling sweep (g0 vs flux point)

struct FluxPointCoupling {
  std::string flux_label;
  double g0_mean_hz = 0.0;
  double g0_std_hz = 0.0;
  int n_used = 0;
  bool excluded = false;  // run failed rejection / min_groups
  std::string reason;
  double predicted_g0_hz = 0.0; // flux-map prediction when the label parses
                                // as a flux value, else 0
};

// Per run: average in groups, fit, reject, extract g0 per survivor with
// n = thermal_occupation(temp, omega_m); report mean and standard deviation.
std::vector<FluxPointCoupling> coupling_sweep_analysis(
    const std::vector<MeasurementRun>& runs, const CavityParams& cav,
    const MechanicalParams& mech, double temp_k,
    const RejectionPolicy& policy = {});

// ---------------------------------------------------------------------------
// Cavity tracking (backaction runs)

struct CavityTrackResult {
  double f_cavity_hz = 0.0;
  FitReport report; // names: f0, fwhm, depth, base
};

// Lorentzian dip fit of |S21|^2 after excising +-1 MHz around the pump and a
// 1 MHz window centered 6 MHz below it. Excision removing more than 60% of
// the points raises std::invalid_argument.
CavityTrackResult cavity_track_fit(const ComplexTrace& vna, double pump_freq_hz);

// ---------------------------------------------------------------------------
// Detuning binning and backaction model fit

struct DetunedFit {
  double detuning_hz = 0.0;
  MechSpectrumFit fit;      // g0_sqrt_n_hz filled from the calibration tone
  double y_error_hz = 0.0;  // standard error of g0_sqrt_n_hz
};

struct BinnedPoint {
  double detuning_mean_hz = 0.0;
  double detuning_std_hz = 0.0; // x-error: std of the detunings in the bin
  MechSpectrumFit fit;          // field-wise mean over the bin
  double y_error_hz = 0.0;      // error of the mean of g0_sqrt_n_hz
  int n_traces = 0;
};

// Fixed-width bins anchored at detuning 0 (edges at integer multiples of
// bin_width); bins with fewer than min_traces points are dropped.
std::vector<BinnedPoint> backaction_binning(const std::vector<DetunedFit>& points,
                                            double bin_width_hz = 1e6,
                                            int min_traces = 4);

struct BackactionFitResult {
  double n_photons = 0.0;
  double g0_hz = 0.0;
  double freq_offset_hz = 0.0;
  FitReport report;                  // names: n_photons, g0, freq_offset
  std::vector<int> excluded_bins;    // indices into the input: unstable /
                                     // limit-cycle bins kept out of the fit
  double n_thermal = 0.0;
};

// Weighted fit of the steady-state phonon number n(detuning + freq_offset;
// n_photons, g0) to the binned transduction observable: per bin the measured
// phonon number is (g0_sqrt_n / g0)^2 with the running fit g0, so residuals
// are (g0^2 n_model - g0_sqrt_n^2) / sigma with sigma the propagated error
// of g0_sqrt_n^2. gamma_m stays fixed at mech.gamma_m. Bins that the model
// marks dynamically unstable (gamma_eff <= 0), or whose implied occupation
// exceeds 10x thermal at the initial g0 (limit cycles), are excluded; the
// exclusion set is iterated to a fixed point. All bins unstable raises
// FitError.
BackactionFitResult backaction_model_fit(const std::vector<BinnedPoint>& binned,
                                         const CavityParams& cav,
                                         const MechanicalParams& mech,
                                         double temp_k);

// Full backaction-run analysis: per-trace cavity tracking (detuning = pump -
// cavity), group averaging (detunings averaged alongside), spectrum fits,
// rejection (min_groups from the policy), g0 sqrt(n) extraction, binning,
// model fit.
struct BackactionAnalysis {
  std::vector<DetunedFit> points;
  std::vector<BinnedPoint> bins;
  BackactionFitResult fit;
  RejectionReport rejection;
};
BackactionAnalysis analyze_backaction_run(const MeasurementRun& run,
                                          const CavityParams& cav,
                                          const MechanicalParams& mech,
                                          const RejectionPolicy& policy,
                                          double bin_width_hz = 1e6);

// ---------------------------------------------------------------------------
// Synthetic run generators (fixtures and CLI simulate/emit paths)

struct RampPoint {
  double temperature_k = 0.0;
  double g0_sqrt_n_hz = 0.0;
};

// g0 sqrt(n_th(T)) with multiplicative Gaussian noise of relative size
// rel_noise, one point per temperature.
std::vector<RampPoint> synthesize_temperature_ramp(double g0_hz, double omega_m_hz,
                                                   const std::vector<double>& temps_k,
                                                   double rel_noise,
                                                   std::uint64_t seed);

struct CouplingRunConfig {
  double phi_ext = 0.0;          // flux bias point
  double temperature_k = 0.1;
  int n_traces = 40;
  std::uint64_t seed = 1;
  double f_dev_hz = 2000.0;
  SynthesisConfig synth = {800.0, 8001, 1, 0.0, 0.1, 25, true, 5e-19};
};

MeasurementRun synthesize_coupling_run(const CavityParams& cav,
                                       const MechanicalParams& mech,
                                       const CouplingRunConfig& cfg);

struct BackactionRunConfig {
  double n_photons = 0.9;
  double g0_hz = 2460.0;
  double temperature_k = 0.1;
  double detuning_lo_hz = -8.5e6;  // cavity drift endpoints (pump fixed)
  double detuning_hi_hz = 3.5e6;
  double detuning_step_hz = 1e6;   // drift dwells at half-integer multiples
                                   // of this step (the bin centers)
  int n_groups = 65;               // groups of group_size raw traces, spread
                                   // evenly over the dwell points
  int group_size = 4;
  double detuning_jitter_hz = 1.5e5; // trace-to-trace drift scatter (noisy runs)
  std::uint64_t seed = 1;
  double f_dev_hz = 2000.0;
  double pump_freq_hz = 8.1e9;
  bool with_noise = true;
  SynthesisConfig synth = {800.0, 8001, 1, 0.0, 0.1, 100, true, 5e-19};
  // VNA trace shape
  double vna_span_hz = 3.0e7;
  int vna_points = 1201;
  double vna_depth = 0.8;          // |S21|^2 dip depth at resonance
  double vna_noise = 2e-3;         // additive per-quadrature sigma (noisy runs)
};

// Pump fixed, cavity drifting so the detuning dwells at points walking from
// detuning_lo to detuning_hi; one VNA trace per spectrum carrying the cavity
// position plus pump leakage and a mixer spur 6 MHz below the pump (removed
// downstream by the excision windows). Dynamically unstable points emit a
// limit-cycle placeholder line (occupation 1000x thermal at the intrinsic
// linewidth).
MeasurementRun synthesize_backaction_run(const CavityParams& cav,
                                         const MechanicalParams& mech,
                                         const BackactionRunConfig& cfg);

} // namespace fluxmech
