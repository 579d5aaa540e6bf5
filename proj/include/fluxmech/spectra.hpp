#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fluxmech/config.hpp"
#include "fluxmech/fit.hpp"

namespace fluxmech {

// Displacement spectrum as reported by the instrument: dBm per bin on a
// uniform frequency grid with equivalent noise bandwidth enbw_hz.
struct SpectrumTrace {
  std::vector<double> freqs;   // Hz, uniform, strictly increasing
  std::vector<double> psd_dbm; // dBm per bin
  double enbw_hz = 0.0;
  int n_averages = 1;          // periodogram averages folded into each bin
};

void validate(const SpectrumTrace& trace);

// Phase-modulation calibration tone injected next to the mechanical peak.
struct CalibrationTone {
  double f_mod_hz = 0.0; // tone frequency
  double f_dev_hz = 0.0; // frequency deviation of the modulation

  double mod_index() const; // f_dev / f_mod
  // Tone placed `detuning_hz` above the mechanical frequency (instrument
  // default 215 Hz).
  static CalibrationTone near(double omega_m_hz, double f_dev_hz,
                              double detuning_hz = 215.0);
};

// Damped-oscillator fit of one spectrum; amplitude and noise floor in the
// instrument's linear power units (mW), frequencies in Hz.
struct MechSpectrumFit {
  double omega_m_hz = 0.0;
  double gamma_m_hz = 0.0;
  double amplitude = 0.0;       // scale of the 2 gamma/((f^2-w^2)^2+gamma^2 f^2) term
  double noise_floor_dbm = 0.0;
  double g0_sqrt_n_hz = 0.0;    // transduction observable g0 sqrt(n_phonons)
};

// psd_model(f) = amplitude * 2 gamma / ((f^2 - omega_m^2)^2 + gamma^2 f^2), mW
double psd_model(double freq_hz, double omega_m_hz, double gamma_m_hz,
                 double amplitude);
void psd_model(const std::vector<double>& freqs, std::vector<double>& out_mw,
               double omega_m_hz, double gamma_m_hz, double amplitude,
               double floor_mw = 0.0);

struct SynthesisConfig {
  double span_hz = 800.0;
  int n_points = 8001;
  std::uint64_t seed = 1;
  double center_hz = 0.0;   // 0 = center on omega_m
  double enbw_hz = 0.1;
  int n_averages = 1;
  bool with_noise = true;   // multiplicative Gamma(n_averages) per bin
  double gain = 5e-19;      // instrument transduction, mW per (Hz^2/Hz)
};

// Forward model of a measured spectrum: mechanical line of strength
// g0_sqrt_n_hz, flat noise floor, calibration tone in the single bin nearest
// f_mod (its integrated power spread over one ENBW). The calibration bins do
// not depend on the mechanical parameters and vice versa. g0 extraction from
// a synthesized trace inverts exactly in the noiseless limit.
SpectrumTrace synthesize_spectrum(const MechSpectrumFit& mech, const CalibrationTone& cal,
                                  const SynthesisConfig& cfg);

struct FitHints {
  double omega_m_hz = 0.0;          // 0 = from the highest bin
  double gamma_m_hz = 0.0;          // 0 = from the 3 dB width
  double exclude_center_hz = 0.0;   // 0 = nothing masked (set to the
                                    // calibration tone to keep it out)
  double exclude_halfwidth_hz = 0.0; // 0 = 3 bins
};

struct SpectrumFit {
  MechSpectrumFit fit;
  FitReport report; // names: omega_m, gamma_m, amplitude, floor_mw
};

// Least-squares fit of psd_model + flat floor in linear power, residuals
// weighted by the Gamma(n_averages) noise model (two passes, model-based
// weights). Throws FitError("peak < 4 dB above floor") when the trace has no
// usable peak.
SpectrumFit fit_spectrum(const SpectrumTrace& trace, const FitHints& hints = {});

struct G0Estimate {
  double g0_hz = 0.0;
  double stderr_hz = 0.0;
};

// Calibration-tone g0 extraction:
//   g0^2 = (1 / 2 n) (f_dev^2 / 2) (S_peak gamma / 4) / (S_cal ENBW)
// with S_peak the fitted peak power and S_cal the calibration-bin power after
// subtracting the fitted mechanical model and floor. Throws CalibrationError
// when the tone is absent.
G0Estimate extract_g0(const SpectrumTrace& trace, const SpectrumFit& fit,
                      const CalibrationTone& cal, double n_phonons);

// extract_g0 with n = 1: the bare transduction observable g0 sqrt(n).
G0Estimate g0_sqrt_n(const SpectrumTrace& trace, const SpectrumFit& fit,
                     const CalibrationTone& cal);

// CSV `freq_hz,psd_dbm` plus key-value sidecar `<path>.meta` carrying
// enbw_hz, n_averages, cal_f_mod_hz, cal_f_dev_hz and any extra metadata.
void write_spectrum_csv(const std::string& path, const SpectrumTrace& trace,
                        const FlatConfig& meta);
// Stream form embeds the metadata as leading `# key = value` lines.
void write_spectrum_csv(std::ostream& out, const SpectrumTrace& trace,
                        const FlatConfig& meta);
SpectrumTrace read_spectrum_csv(const std::string& path, FlatConfig* meta_out = nullptr);
SpectrumTrace read_spectrum_csv(std::istream& in, FlatConfig* meta_out = nullptr);

} // namespace fluxmech
