#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <cstring>
#include <sstream>
#include <vector>

#include "fluxmech/resonator_fit.hpp"

using namespace fluxmech;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

NotchParams fixture_notch() { return {2913.0, 5758.0, 0.23, 8.1672e9}; }

EnvironmentParams fixture_env() { return {0.32, -0.56, 6.98e-8}; }

ComplexTrace fixture_trace(int n_points = 2001, double noise_sigma = 0.0,
                           std::uint64_t seed = 0) {
  const NotchParams notch = fixture_notch();
  const double half_span = 3.0 * notch.f_res / notch.q_loaded;
  return synthesize_s21(notch, fixture_env(), notch.f_res - half_span,
                        notch.f_res + half_span, n_points, noise_sigma, seed);
}

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

} // namespace

TEST_CASE("s21_ideal at resonance reduces to 1 - d e^{i phi0}") {
  const NotchParams notch = fixture_notch();
  const double d = notch.q_loaded / notch.q_coupling_abs;
  const std::complex<double> got = s21_ideal(notch, notch.f_res);
  CHECK(got.real() == doctest::Approx(1.0 - d * std::cos(notch.phi0)).epsilon(1e-15));
  CHECK(got.imag() == doctest::Approx(-d * std::sin(notch.phi0)).epsilon(1e-15));
}

TEST_CASE("s21_ideal matches the frozen oracle half a linewidth off resonance") {
  const NotchParams notch = fixture_notch();
  // (1 - d e^{i 0.23} / (1 + 2i Q_l df/f)) at f = f_res + 0.5 MHz, 25-digit arithmetic
  const std::complex<double> got = s21_ideal(notch, notch.f_res + 0.5e6);
  CHECK(rel_err(got.real(), 0.52651479531144406) < 1e-14);
  CHECK(rel_err(got.imag(), 0.053543314993240642) < 1e-14);
}

TEST_CASE("s21_ideal rejects bad inputs") {
  CHECK_THROWS_AS((void)s21_ideal(fixture_notch(), 0.0), std::invalid_argument);
  NotchParams bad = fixture_notch();
  bad.q_loaded = 0.0;
  CHECK_THROWS_AS((void)s21_ideal(bad, 8.1672e9), std::invalid_argument);
}

TEST_CASE("s21_full applies the instrument prefactor") {
  const NotchParams notch = fixture_notch();
  const EnvironmentParams env = fixture_env();
  const double f = notch.f_res + 1.3e6;
  const std::complex<double> pre =
      env.amp * std::exp(std::complex<double>(0.0, env.alpha - kTwoPi * f * env.tau));
  const std::complex<double> want = pre * s21_ideal(notch, f);
  const std::complex<double> got = s21_full(notch, env, f);
  CHECK(got.real() == doctest::Approx(want.real()).epsilon(1e-15));
  CHECK(got.imag() == doctest::Approx(want.imag()).epsilon(1e-15));
}

TEST_CASE("synthesize_s21 noiseless equals the model on the same grid") {
  const ComplexTrace trace = fixture_trace();
  REQUIRE(trace.freqs.size() == 2001);
  std::vector<std::complex<double>> model;
  s21_full(fixture_notch(), fixture_env(), trace.freqs, model);
  REQUIRE(model.size() == trace.s21.size());
  CHECK(std::memcmp(model.data(), trace.s21.data(),
                    model.size() * sizeof(model[0])) == 0);
}

TEST_CASE("synthesize_s21 is deterministic per seed and seed-sensitive") {
  const ComplexTrace a = fixture_trace(501, 0.01, 7);
  const ComplexTrace b = fixture_trace(501, 0.01, 7);
  const ComplexTrace c = fixture_trace(501, 0.01, 8);
  CHECK(std::memcmp(a.s21.data(), b.s21.data(), a.s21.size() * sizeof(a.s21[0])) == 0);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.s21.size(); ++i) any_diff |= (a.s21[i] != c.s21[i]);
  CHECK(any_diff);
}

TEST_CASE("validate rejects malformed traces") {
  ComplexTrace t = fixture_trace(16);
  CHECK_NOTHROW(validate(t));

  ComplexTrace short_t = t;
  short_t.freqs.resize(7);
  short_t.s21.resize(7);
  CHECK_THROWS_AS(validate(short_t), std::invalid_argument);

  ComplexTrace mismatch = t;
  mismatch.s21.pop_back();
  CHECK_THROWS_AS(validate(mismatch), std::invalid_argument);

  ComplexTrace unsorted = t;
  std::swap(unsorted.freqs[3], unsorted.freqs[4]);
  CHECK_THROWS_AS(validate(unsorted), std::invalid_argument);

  ComplexTrace nan_t = t;
  nan_t.s21[5] = {std::nan(""), 0.0};
  CHECK_THROWS_AS(validate(nan_t), std::invalid_argument);
}

TEST_CASE("circle_fit recovers all seven parameters from a noiseless trace") {
  const ComplexTrace trace = fixture_trace();
  const CircleFitResult res = circle_fit(trace);
  CHECK(res.report.converged);
  CHECK(rel_err(res.env.amp, 0.32) < 1e-9);
  CHECK(std::abs(res.env.alpha - (-0.56)) < 1e-9);
  CHECK(rel_err(res.env.tau, 6.98e-8) < 1e-9);
  CHECK(rel_err(res.notch.f_res, 8.1672e9) < 1e-12);
  CHECK(rel_err(res.notch.q_loaded, 2913.0) < 1e-9);
  CHECK(rel_err(res.notch.q_coupling_abs, 5758.0) < 1e-9);
  CHECK(std::abs(res.notch.phi0 - 0.23) < 1e-9);
  // residual at the fitted point must not exceed the residual at the truth
  CHECK(res.report.residual_norm < 1e-9);
}

TEST_CASE("circle_fit noisy trace covers the truth within three stderrs") {
  const ComplexTrace trace = fixture_trace(2001, 0.01, 42);
  const CircleFitResult res = circle_fit(trace);
  CHECK(res.report.converged);
  const double f_sigma = res.report.stderror("f_res");
  const double ql_sigma = res.report.stderror("q_loaded");
  REQUIRE(f_sigma > 0.0);
  REQUIRE(ql_sigma > 0.0);
  CHECK(std::abs(res.notch.f_res - 8.1672e9) < 3.0 * f_sigma);
  CHECK(std::abs(res.notch.q_loaded - 2913.0) < 3.0 * ql_sigma);
}

TEST_CASE("circle_fit rejects traces with no circle") {
  ComplexTrace flat;
  for (int i = 0; i < 64; ++i) {
    flat.freqs.push_back(8.16e9 + 1e5 * i);
    flat.s21.push_back({0.32, 0.0});
  }
  CHECK_THROWS_AS((void)circle_fit(flat), FitError);
}

TEST_CASE("q_internal matches frozen values under both conventions") {
  const NotchParams notch = fixture_notch();
  // 1/(1/2913 - 1/5758) and 1/(1/2913 - cos(0.23)/5758), 25-digit arithmetic
  CHECK(rel_err(q_internal(notch, QConvention::simple_reciprocal),
                5895.625307557118) < 1e-12);
  CHECK(rel_err(q_internal(notch, QConvention::diameter_correction),
                5740.835058177918) < 1e-12);
}

TEST_CASE("q_internal throws when the coupling bookkeeping is inconsistent") {
  NotchParams notch = fixture_notch();
  notch.q_loaded = 6000.0; // Q_l > |Q_c| makes 1/Q_int negative
  CHECK_THROWS_AS((void)q_internal(notch, QConvention::simple_reciprocal), FitError);
}

TEST_CASE("loaded linewidth decomposes into coupling plus internal") {
  const NotchParams notch = fixture_notch();
  const double kappa_l = kappa_from_q(notch.f_res, notch.q_loaded);
  const double kappa_c =
      notch.f_res * std::cos(notch.phi0) / notch.q_coupling_abs;
  const double kappa_i = kappa_from_q(
      notch.f_res, q_internal(notch, QConvention::diameter_correction));
  CHECK(rel_err(kappa_c + kappa_i, kappa_l) < 1e-12);
}

TEST_CASE("kappa_from_q divides and rejects non-positive inputs") {
  CHECK(kappa_from_q(8.1672e9, 2913.0) == doctest::Approx(8.1672e9 / 2913.0).epsilon(1e-15));
  CHECK_THROWS_AS((void)kappa_from_q(-1.0, 2913.0), std::invalid_argument);
  CHECK_THROWS_AS((void)kappa_from_q(8.1672e9, 0.0), std::invalid_argument);
}

TEST_CASE("complex trace CSV roundtrips exactly") {
  const ComplexTrace trace = fixture_trace(64, 0.01, 3);
  std::ostringstream out;
  write_complex_trace_csv(out, trace);
  std::istringstream in(out.str());
  const ComplexTrace back = read_complex_trace_csv(in);
  REQUIRE(back.freqs.size() == trace.freqs.size());
  CHECK(std::memcmp(back.freqs.data(), trace.freqs.data(),
                    trace.freqs.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(back.s21.data(), trace.s21.data(),
                    trace.s21.size() * sizeof(trace.s21[0])) == 0);
}

TEST_CASE("complex trace CSV rejects malformed input") {
  std::istringstream bad_header("a,b,c\n1,2,3\n");
  CHECK_THROWS_AS((void)read_complex_trace_csv(bad_header), std::invalid_argument);
  std::istringstream bad_row("freq_hz,re,im\n1e9,0.5\n");
  CHECK_THROWS_AS((void)read_complex_trace_csv(bad_row), std::invalid_argument);
  std::istringstream empty("");
  CHECK_THROWS_AS((void)read_complex_trace_csv(empty), std::invalid_argument);
}

TEST_CASE("taubin circle fit recovers an exact circle") {
  std::vector<double> xs, ys;
  const double cx = 0.31, cy = -0.12, r = 0.27;
  for (int i = 0; i < 40; ++i) {
    const double th = kTwoPi * i / 40.0;
    xs.push_back(cx + r * std::cos(th));
    ys.push_back(cy + r * std::sin(th));
  }
  const detail::Circle c = detail::taubin_circle_fit(xs, ys);
  CHECK(std::abs(c.x - cx) < 1e-12);
  CHECK(std::abs(c.y - cy) < 1e-12);
  CHECK(std::abs(c.r - r) < 1e-12);
}

TEST_CASE("taubin circle fit throws on degenerate input") {
  std::vector<double> xs(20, 0.5), ys(20, 0.5); // all points coincide
  CHECK_THROWS_AS((void)detail::taubin_circle_fit(xs, ys), FitError);
}
