// Acceptance suite: one reported line per criterion. Criterion 5's
// simple-reciprocal Q value is reported honestly (see README); its line may
// read FAIL without failing the binary, and the computed value is pinned so
// any drift in the bookkeeping still breaks the build.
#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "json.hpp"

#include "fluxmech/cli.hpp"
#include "fluxmech/optomech.hpp"
#include "fluxmech/pipeline.hpp"
#include "fluxmech/resonator_fit.hpp"
#include "fluxmech/spectra.hpp"
#include "fluxmech/squid_cavity.hpp"

using namespace fluxmech;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string g_cli;
std::string g_repo;
fs::path g_work;
std::chrono::steady_clock::time_point g_start;

bool report(const char* label, bool ok, const std::string& detail) {
  std::printf("[%s] %s: %s\n", ok ? "PASS" : "FAIL", label, detail.c_str());
  std::fflush(stdout);
  return ok;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

CavityParams fixture_cavity() { return {8.1676e9, 1.0, 1.4e6, 1.4e6, 0.23}; }

MechanicalParams fixture_mech() {
  MechanicalParams m;
  m.omega_m = 274383.13;
  m.gamma_m = 0.3;
  m.mass_eff = 1.3996e-11;
  m.x_zpm = zero_point_motion(m.mass_eff, m.omega_m);
  m.flux_per_zpm = 1.6e-6;
  return m;
}

int run_cmd(const std::string& snippet) {
  const std::string cmd = snippet + " >" + (g_work / "cmd_out.txt").string() + " 2>" +
                          (g_work / "cmd_err.txt").string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// shipped fixture corpus: one drifting-cavity sweep from the shipped config
// plus one coupling run; reused by criteria 8 and 11
fs::path ensure_fixture_corpus() {
  const fs::path root = g_work / "runs";
  if (fs::exists(root / "run_backaction" / "meta.cfg") &&
      fs::exists(root / "run_coupling" / "meta.cfg"))
    return root;
  fs::create_directories(root);
  const int rc = run_cmd(g_cli + " backaction-sweep --emit-run " +
                         (root / "run_backaction").string() + " --run-config " + g_repo +
                         "/configs/backaction_run.cfg");
  if (rc != 0) throw std::runtime_error("failed to emit the shipped sweep fixture");
  CouplingRunConfig cc;
  cc.phi_ext = 0.2;
  cc.seed = 1;
  write_run((root / "run_coupling").string(),
            synthesize_coupling_run(fixture_cavity(), fixture_mech(), cc));
  return root;
}

} // namespace

TEST_CASE("criterion 1: thermal occupation at the base-temperature operating point") {
  const auto t0 = std::chrono::steady_clock::now();
  double acc = 0.0;
  for (int i = 0; i < 1000; ++i) acc += thermal_occupation(0.1, 274383.0 + i * 1e-9);
  const double us_per_call =
      std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0)
          .count() /
      1000.0;
  const double n_th = thermal_occupation(0.1, 274383.0);
  const bool ok = n_th >= 7400.0 && n_th <= 7800.0 && us_per_call < 1000.0 &&
                  std::isfinite(acc);
  CHECK(report("criterion 1", ok,
               fmt("thermal_occupation(100 mK, 274.383 kHz) = %.1f (gate [7400, 7800]), "
                   "%.3g us/call",
                   n_th, us_per_call)));
}

TEST_CASE("criterion 2: bad-cavity cooling floor") {
  const double floor = min_phonon_bad_cavity(2.8e6, 274383.0);
  CHECK(report("criterion 2", std::abs(floor - 6.5) <= 0.1,
               fmt("min_phonon_bad_cavity(2.8 MHz, 274.383 kHz) = %.4f (gate 6.5 +- 0.1)",
                   floor)));
}

TEST_CASE("criterion 3: single-photon cooperativity") {
  const double c_main = cooperativity(2460.0, 2.8e6, 0.3);
  const double c_alt = cooperativity(3000.0, 1e7, 0.3);
  const bool ok = std::abs(c_main - 28.8) <= 0.1 && std::abs(c_alt - 12.0) <= 0.1 &&
                  c_main > 1.0 && c_alt > 1.0;
  CHECK(report("criterion 3", ok,
               fmt("C0(2.46 kHz, 2.8 MHz, 0.3 Hz) = %.4f (gate 28.8 +- 0.1), "
                   "C0(3 kHz, 10 MHz, 0.3 Hz) = %.4f (gate 12.0 +- 0.1)",
                   c_main, c_alt)));
}

TEST_CASE("criterion 4: circle-fit roundtrip, noiseless and under noise") {
  const NotchParams notch{2913.0, 5758.0, 0.23, 8.1672e9};
  const EnvironmentParams env{0.32, -0.56, 6.98e-8};
  const double half_span = 3.0 * notch.f_res / notch.q_loaded;

  const ComplexTrace clean = synthesize_s21(notch, env, notch.f_res - half_span,
                                            notch.f_res + half_span, 2001);
  const auto t0 = std::chrono::steady_clock::now();
  const CircleFitResult res = circle_fit(clean);
  const double fit_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  double worst = 0.0;
  worst = std::max(worst, rel_err(res.env.amp, env.amp));
  worst = std::max(worst, std::abs(res.env.alpha - env.alpha));
  worst = std::max(worst, rel_err(res.env.tau, env.tau));
  worst = std::max(worst, rel_err(res.notch.f_res, notch.f_res));
  worst = std::max(worst, rel_err(res.notch.q_loaded, notch.q_loaded));
  worst = std::max(worst, rel_err(res.notch.q_coupling_abs, notch.q_coupling_abs));
  worst = std::max(worst, std::abs(res.notch.phi0 - notch.phi0));

  int covered = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const ComplexTrace noisy = synthesize_s21(notch, env, notch.f_res - half_span,
                                              notch.f_res + half_span, 2001, 0.01, seed);
    try {
      const CircleFitResult r = circle_fit(noisy);
      if (std::abs(r.notch.f_res - notch.f_res) <= 3.0 * r.report.stderror("f_res") &&
          std::abs(r.notch.q_loaded - notch.q_loaded) <=
              3.0 * r.report.stderror("q_loaded"))
        ++covered;
    } catch (const FitError&) {
    }
  }
  const bool ok = worst < 1e-4 && covered >= 95 && fit_seconds < 1.0;
  CHECK(report("criterion 4", ok,
               fmt("noiseless worst relative error %.2e (gate 1e-4), noisy 3-sigma "
                   "coverage %d/100 (gate >= 95), %.3f s/fit (gate < 1 s)",
                   worst, covered, fit_seconds)));
}

TEST_CASE("criterion 5: internal-Q bookkeeping on the reference resonator") {
  const NotchParams notch{2913.0, 5758.0, 0.23, 8.1672e9};
  const double qi_simple = q_internal(notch, QConvention::simple_reciprocal);
  const double qi_diam = q_internal(notch, QConvention::diameter_correction);

  // 5a: the quoted 5898 +- 1 is not reachable from the quoted Q_l and |Q_c|;
  // 1/(1/2913 - 1/5758) = 5895.63. Reported honestly, never gamed green.
  const bool in_quoted_gate = std::abs(qi_simple - 5898.0) <= 1.0;
  report("criterion 5a", in_quoted_gate,
         fmt("q_internal(simple-reciprocal) = %.2f vs quoted gate 5898 +- 1 "
             "(documented discrepancy: the quoted Q_l = 2913 and |Q_c| = 5758 imply "
             "5895.63; see README)",
             qi_simple));
  WARN_MESSAGE(in_quoted_gate,
               "criterion 5a reported FAIL by design: quoted gate unreachable from the "
               "quoted inputs");
  // pin the independently derived value so drift still fails the build
  CHECK(rel_err(qi_simple, 5895.625307557118) < 1e-12);

  const double kappa_l = kappa_from_q(notch.f_res, notch.q_loaded);
  const double kappa_c = notch.f_res * std::cos(notch.phi0) / notch.q_coupling_abs;
  const double kappa_i = kappa_from_q(notch.f_res, qi_diam);
  const double decomp_rel = std::abs(kappa_c + kappa_i - kappa_l) / kappa_l;
  const bool ok_b = std::abs(qi_diam - 5741.0) <= 5.0 && decomp_rel < 1e-12;
  CHECK(report("criterion 5b", ok_b,
               fmt("q_internal(diameter-correction) = %.2f (gate 5741 +- 5), "
                   "kappa decomposition residual %.2e (gate 1e-12)",
                   qi_diam, decomp_rel)));
}

TEST_CASE("criterion 6: calibration-tone g0 extraction roundtrip") {
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int clean_ok = 0, noisy_ok = 0;
  const int n_draws = 50;
  for (int i = 0; i < n_draws; ++i) {
    MechSpectrumFit mech;
    mech.omega_m_hz = 274383.13;
    mech.gamma_m_hz = 0.3 * std::pow(10.0, u(rng));          // 0.3 .. 3 Hz
    mech.noise_floor_dbm = -125.0;
    const double g0 = 30.0 * std::pow(5.0, u(rng));          // 30 .. 150 Hz
    const double n_ph = 3e3 * std::pow(10.0, u(rng));        // 3e3 .. 3e4
    mech.g0_sqrt_n_hz = g0 * std::sqrt(n_ph);
    const CalibrationTone cal = CalibrationTone::near(mech.omega_m_hz, 2000.0);
    FitHints hints;
    hints.exclude_center_hz = cal.f_mod_hz;

    SynthesisConfig clean_cfg;
    clean_cfg.with_noise = false;
    const SpectrumTrace clean = synthesize_spectrum(mech, cal, clean_cfg);
    const G0Estimate est = extract_g0(clean, fit_spectrum(clean, hints), cal, n_ph);
    if (rel_err(est.g0_hz, g0) < 0.02) ++clean_ok;

    SynthesisConfig noisy_cfg;
    noisy_cfg.n_averages = 4; // Gamma(4) multiplicative noise
    noisy_cfg.seed = 1000 + i;
    const SpectrumTrace noisy = synthesize_spectrum(mech, cal, noisy_cfg);
    try {
      const G0Estimate e = extract_g0(noisy, fit_spectrum(noisy, hints), cal, n_ph);
      if (std::abs(e.g0_hz - g0) <= 3.0 * e.stderr_hz) ++noisy_ok;
    } catch (const FitError&) {
    }
  }

  // fixed fixture at the headline operating point
  MechSpectrumFit op;
  op.omega_m_hz = 274383.13;
  op.gamma_m_hz = 0.3;
  op.noise_floor_dbm = -120.0;
  op.g0_sqrt_n_hz = 48.0 * std::sqrt(7592.0);
  const CalibrationTone cal = CalibrationTone::near(op.omega_m_hz, 2000.0);
  FitHints hints;
  hints.exclude_center_hz = cal.f_mod_hz;
  SynthesisConfig cfg;
  cfg.with_noise = false;
  const SpectrumTrace trace = synthesize_spectrum(op, cal, cfg);
  const G0Estimate fixed = extract_g0(trace, fit_spectrum(trace, hints), cal, 7592.0);
  const bool fixed_ok = rel_err(fixed.g0_hz, 48.0) < 0.02;

  const bool ok = clean_ok == n_draws && noisy_ok == n_draws && fixed_ok;
  CHECK(report("criterion 6", ok,
               fmt("noiseless within 2%%: %d/%d, Gamma(4) within 3 sigma: %d/%d, "
                   "operating-point fixture g0 = %.2f Hz (truth 48)",
                   clean_ok, n_draws, noisy_ok, n_draws, fixed.g0_hz)));
}

TEST_CASE("criterion 7: temperature-ramp coupling recovery under noise") {
  const double omega_m = 274383.13;
  std::vector<double> temps(14);
  for (int i = 0; i < 14; ++i) temps[i] = 0.08 + (0.7 - 0.08) * i / 13.0;
  int within = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto pts = synthesize_temperature_ramp(48.0, omega_m, temps, 0.02, seed);
    std::vector<std::pair<double, double>> xy;
    for (const RampPoint& p : pts) xy.emplace_back(p.temperature_k, p.g0_sqrt_n_hz);
    const RampFitResult fit = temperature_ramp_fit(xy, omega_m);
    const double dev = std::abs(fit.g0_hz - 48.0);
    worst = std::max(worst, dev);
    if (dev <= 1.5) ++within;
  }
  CHECK(report("criterion 7", within >= 95,
               fmt("g0 within 48 +- 1.5 Hz in %d/100 seeds (gate >= 95), worst "
                   "deviation %.3f Hz",
                   within, worst)));
}

TEST_CASE("criterion 8: shipped sweep recovers the generator and flags instability") {
  const fs::path root = ensure_fixture_corpus();
  const fs::path out = g_work / "fit8.json";
  const int rc = run_cmd(g_cli + " fit-backaction --in " +
                         (root / "run_backaction").string() + " --out " + out.string());
  REQUIRE(rc == 0);
  const json j = json::parse(slurp(out));
  const double n_ph = j.at("n_photons").get<double>();
  const double g0 = j.at("g0_hz").get<double>();
  const auto& excluded = j.at("excluded_bins");
  bool excluded_blue = !excluded.empty();
  for (const auto& idx : excluded) {
    const json& bin = j.at("bins").at(idx.get<int>());
    if (!(bin.at("detuning_mean_hz").get<double>() > 0.0) ||
        !bin.at("excluded").get<bool>())
      excluded_blue = false;
  }
  const bool ok = std::abs(n_ph - 0.9) <= 0.2 && std::abs(g0 - 2460.0) <= 80.0 &&
                  excluded_blue;
  CHECK(report("criterion 8", ok,
               fmt("n_photons = %.4f (gate 0.9 +- 0.2), g0 = %.1f Hz (gate 2460 +- 80), "
                   "%zu blue-detuned bins flagged and excluded",
                   n_ph, g0, excluded.size())));
}

TEST_CASE("criterion 9: cooling-record properties in place of measured records") {
  const CavityParams cav = fixture_cavity();
  const MechanicalParams mech = fixture_mech();
  const double n_th = thermal_occupation(0.1, mech.omega_m);

  // monotone deepening with photon number at fixed optimal red detuning
  bool monotone = true;
  double prev = n_th + 1.0;
  for (double n = 1e-3; n < 2e3; n *= 1.5) {
    const BackactionResult b =
        backaction(cav, mech, {-0.5 * cav.kappa(), n, 2460.0}, 0.1);
    if (!b.stable || !(b.n_final < prev)) monotone = false;
    prev = b.n_final;
  }

  // exact thermal limit at zero drive
  const BackactionResult off = backaction(cav, mech, {-0.5 * cav.kappa(), 0.0, 2460.0}, 0.1);
  const bool exact_limit = off.n_final == n_th;

  // energy bookkeeping identity over 1e4 random draws
  std::mt19937_64 rng(91);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0, violations = 0;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    MechanicalParams m = mech;
    m.omega_m = 1e5 + 9e5 * u(rng);
    m.gamma_m = 0.01 + 10.0 * u(rng);
    const DriveConfig drive{-1e7 + 2e7 * u(rng), 100.0 * u(rng), 1.0 + 4999.0 * u(rng)};
    const double temp_k = 0.02 + 0.98 * u(rng);
    const BackactionResult b = backaction(cav, m, drive, temp_k);
    if (!b.stable) continue;
    ++checked;
    const ScatteringRates r = scattering_rates(cav, m, drive);
    const double lhs = m.gamma_m * thermal_occupation(temp_k, m.omega_m) + r.stokes_hz;
    const double rel = std::abs(lhs - b.gamma_eff_hz * b.n_final) / std::abs(lhs);
    worst = std::max(worst, rel);
    if (!(rel <= 1e-12)) ++violations;
  }

  const bool ok = monotone && exact_limit && violations == 0 && checked > 5000;
  CHECK(report("criterion 9", ok,
               fmt("monotone cooling %s, n_final(n->0) == n_th %s, bookkeeping identity "
                   "worst %.2e over %d stable draws (gate 1e-12)",
                   monotone ? "yes" : "NO", exact_limit ? "exact" : "NOT EXACT", worst,
                   checked)));
}

TEST_CASE("criterion 10: rejection protocol on a constructed 10-trace set") {
  MechSpectrumFit line;
  line.omega_m_hz = 274383.13;
  line.gamma_m_hz = 1.8;
  line.noise_floor_dbm = -120.0;
  line.g0_sqrt_n_hz = 2460.0;
  const CalibrationTone cal = CalibrationTone::near(line.omega_m_hz, 2000.0);
  SynthesisConfig cfg;
  cfg.with_noise = false;
  FitHints hints;
  hints.exclude_center_hz = cal.f_mod_hz;
  const FittedTrace good = fit_trace(synthesize_spectrum(line, cal, cfg), hints);

  MechSpectrumFit dead = line;
  dead.g0_sqrt_n_hz = 0.0;
  CalibrationTone no_tone = cal;
  no_tone.f_dev_hz = 0.0;
  const FittedTrace bad = fit_trace(synthesize_spectrum(dead, no_tone, cfg), hints);

  auto serialize = [](const RejectionReport& rep) {
    std::ostringstream s;
    s << rep.set_discarded << '|' << rep.n_failed << '|' << rep.reason;
    for (const TraceVerdict& v : rep.verdicts)
      s << ';' << v.index << ',' << v.accepted << ',' << v.reason;
    return s.str();
  };

  std::vector<FittedTrace> three(10, good);
  three[1] = bad;
  three[4] = bad;
  three[8] = bad;
  const auto [acc3a, rep3a] = apply_rejection(three, RejectionPolicy{}, cal);
  const auto [acc3b, rep3b] = apply_rejection(three, RejectionPolicy{}, cal);
  const bool discard_ok = rep3a.set_discarded && acc3a.empty() && rep3a.n_failed == 3;

  std::vector<FittedTrace> two(10, good);
  two[1] = bad;
  two[4] = bad;
  const auto [acc2a, rep2a] = apply_rejection(two, RejectionPolicy{}, cal);
  const auto [acc2b, rep2b] = apply_rejection(two, RejectionPolicy{}, cal);
  const bool survive_ok = !rep2a.set_discarded && acc2a.size() == 8 && rep2a.n_failed == 2;

  const bool deterministic =
      serialize(rep3a) == serialize(rep3b) && serialize(rep2a) == serialize(rep2b);
  const bool ok = discard_ok && survive_ok && deterministic;
  CHECK(report("criterion 10", ok,
               fmt("3 of 10 failing -> wholesale discard %s; 2 of 10 failing -> %zu "
                   "survive; byte-deterministic %s",
                   discard_ok ? "yes" : "NO", acc2a.size(), deterministic ? "yes" : "NO")));
}

TEST_CASE("criterion 11: pipeline determinism on the shipped fixtures") {
  const fs::path root = ensure_fixture_corpus();
  const fs::path out1 = g_work / "pipe1";
  const fs::path out2 = g_work / "pipe2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  REQUIRE(run_cmd(g_cli + " run-pipeline --in " + root.string() + " --out " +
                  out1.string()) == 0);
  REQUIRE(run_cmd(g_cli + " run-pipeline --in " + root.string() + " --out " +
                  out2.string()) == 0);

  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(out1))
    names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  bool identical = !names.empty();
  for (const std::string& name : names)
    if (!fs::exists(out2 / name) || slurp(out1 / name) != slurp(out2 / name))
      identical = false;

  const json results = json::parse(slurp(out1 / "results.json"));
  const bool shaped = results.at("schema") == "fluxmech-results-1" &&
                      results.count("backaction") == 1 && results.count("coupling") == 1;

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count();
  const bool in_budget = elapsed < 120.0;
  const bool ok = identical && shaped && in_budget;
  CHECK(report("criterion 11", ok,
               fmt("%zu result files byte-identical across two runs: %s; suite elapsed "
                   "%.1f s (gate < 120 s)",
                   names.size(), identical ? "yes" : "NO", elapsed)));
}

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr, "usage: acceptance [doctest args] <cli-path> <repo-root>\n");
    return 64;
  }
  g_start = std::chrono::steady_clock::now();
  g_cli = argv[argc - 2];
  g_repo = argv[argc - 1];
  g_work = fs::temp_directory_path() / "fluxmech_acceptance";
  fs::create_directories(g_work);
  doctest::Context ctx;
  ctx.applyCommandLine(argc - 2, argv);
  const int rc = ctx.run();
  fs::remove_all(g_work);
  return rc;
}
