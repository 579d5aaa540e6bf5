#include "fluxmech/resonator_fit.hpp"

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

double wrap_angle(double a) {
  // (-pi, pi]
  double w = std::remainder(a, kTwoPi);
  if (w <= -kPi) w += kTwoPi;
  return w;
}

std::vector<double> unwrap(std::vector<double> phase) {
  for (std::size_t i = 1; i < phase.size(); ++i) {
    double d = phase[i] - phase[i - 1];
    while (d > kPi) {
      phase[i] -= kTwoPi;
      d = phase[i] - phase[i - 1];
    }
    while (d < -kPi) {
      phase[i] += kTwoPi;
      d = phase[i] - phase[i - 1];
    }
  }
  return phase;
}

// least-squares line y = b + m x over the given index set
void line_fit(const std::vector<double>& x, const std::vector<double>& y,
              const std::vector<std::size_t>& idx, double& m, double& b) {
  double sx = 0, sy = 0;
  for (auto i : idx) {
    sx += x[i];
    sy += y[i];
  }
  const double n = static_cast<double>(idx.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0;
  for (auto i : idx) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  m = sxx > 0 ? sxy / sxx : 0.0;
  b = my - m * mx;
}

kernels::NotchShape shape_of(const NotchParams& notch) {
  return {notch.f_res, notch.q_loaded, notch.q_loaded / notch.q_coupling_abs,
          std::cos(notch.phi0), std::sin(notch.phi0)};
}

void check_notch(const NotchParams& notch) {
  if (!(notch.f_res > 0.0) || !(notch.q_loaded > 0.0) || !(notch.q_coupling_abs > 0.0))
    throw std::invalid_argument("notch params: f_res and Q factors must be positive");
}

} // namespace

void validate(const ComplexTrace& trace) {
  if (trace.freqs.size() != trace.s21.size())
    throw std::invalid_argument("trace: frequency/value size mismatch");
  if (trace.freqs.size() < 8)
    throw std::invalid_argument("trace: need at least 8 points");
  for (std::size_t i = 0; i < trace.freqs.size(); ++i) {
    if (!std::isfinite(trace.freqs[i]) || !std::isfinite(trace.s21[i].real()) ||
        !std::isfinite(trace.s21[i].imag()))
      throw std::invalid_argument("trace: non-finite entry");
    if (i > 0 && !(trace.freqs[i] > trace.freqs[i - 1]))
      throw std::invalid_argument("trace: frequencies must be strictly increasing");
  }
}

std::complex<double> s21_ideal(const NotchParams& notch, double freq_hz) {
  check_notch(notch);
  if (!(freq_hz > 0.0)) throw std::invalid_argument("s21_ideal: frequency must be positive");
  const double d = notch.q_loaded / notch.q_coupling_abs;
  const std::complex<double> den(1.0, 2.0 * notch.q_loaded * (freq_hz - notch.f_res) / notch.f_res);
  return 1.0 - d * std::exp(std::complex<double>(0.0, notch.phi0)) / den;
}

std::complex<double> s21_full(const NotchParams& notch, const EnvironmentParams& env,
                              double freq_hz) {
  const std::complex<double> pre =
      env.amp * std::exp(std::complex<double>(0.0, env.alpha - kTwoPi * freq_hz * env.tau));
  return pre * s21_ideal(notch, freq_hz);
}

void s21_full(const NotchParams& notch, const EnvironmentParams& env,
              const std::vector<double>& freqs, std::vector<std::complex<double>>& out) {
  check_notch(notch);
  const std::size_t n = freqs.size();
  out.resize(n);
  std::vector<double> re(n), im(n);
  kernels::notch_s21(freqs.data(), re.data(), im.data(), n, shape_of(notch));
  for (std::size_t i = 0; i < n; ++i) {
    const double ph = env.alpha - kTwoPi * freqs[i] * env.tau;
    const double c = std::cos(ph), s = std::sin(ph);
    out[i] = {env.amp * (re[i] * c - im[i] * s), env.amp * (re[i] * s + im[i] * c)};
  }
}

ComplexTrace synthesize_s21(const NotchParams& notch, const EnvironmentParams& env,
                            double f_start_hz, double f_stop_hz, int n_points,
                            double noise_sigma, std::uint64_t seed) {
  if (!(f_stop_hz > f_start_hz) || n_points < 8)
    throw std::invalid_argument("synthesize_s21: bad grid");
  ComplexTrace trace;
  trace.freqs.resize(n_points);
  const double step = (f_stop_hz - f_start_hz) / (n_points - 1);
  for (int i = 0; i < n_points; ++i) trace.freqs[i] = f_start_hz + step * i;
  s21_full(notch, env, trace.freqs, trace.s21);
  if (noise_sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, noise_sigma); // per quadrature
    for (auto& z : trace.s21) {
      const double dre = gauss(rng);
      const double dim = gauss(rng);
      z += std::complex<double>(dre, dim);
    }
  }
  return trace;
}

namespace detail {

Circle taubin_circle_fit(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = xs.size();
  if (n < 3 || ys.size() != n)
    throw std::invalid_argument("circle fit: need at least 3 points");
  double mean_x = 0, mean_y = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_x += xs[i];
    mean_y += ys[i];
  }
  mean_x /= n;
  mean_y /= n;

  double mxx = 0, myy = 0, mxy = 0, mxz = 0, myz = 0, mzz = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xs[i] - mean_x;
    const double v = ys[i] - mean_y;
    const double z = u * u + v * v;
    mxx += u * u;
    myy += v * v;
    mxy += u * v;
    mxz += u * z;
    myz += v * z;
    mzz += z * z;
  }
  mxx /= n;
  myy /= n;
  mxy /= n;
  mxz /= n;
  myz /= n;
  mzz /= n;

  const double mz = mxx + myy;
  const double scale = std::max({std::abs(mean_x), std::abs(mean_y), 1.0});
  if (mz < 1e-24 * scale * scale)
    throw FitError("no discernible circle: data collapses to a point");

  const double cov_xy = mxx * myy - mxy * mxy;
  const double var_z = mzz - mz * mz;
  const double a3 = 4.0 * mz;
  const double a2 = -3.0 * mz * mz - mzz;
  const double a1 = var_z * mz + 4.0 * cov_xy * mz - mxz * mxz - myz * myz;
  const double a0 = mxz * (mxz * myy - myz * mxy) + myz * (myz * mxx - mxz * mxy) -
                    var_z * cov_xy;
  const double a22 = a2 + a2;
  const double a33 = a3 + a3 + a3;

  // Newton on the characteristic polynomial, seeded at 0 (Taubin's root is the
  // one nearest zero)
  double x = 0.0, y = a0;
  for (int iter = 0; iter < 99; ++iter) {
    const double dy = a1 + x * (a22 + x * a33);
    if (dy == 0.0) break;
    const double xnew = x - y / dy;
    if (xnew == x || !std::isfinite(xnew)) break;
    const double ynew = a0 + xnew * (a1 + xnew * (a2 + xnew * a3));
    if (std::abs(ynew) >= std::abs(y)) break;
    x = xnew;
    y = ynew;
  }

  const double det = x * x - x * mz + cov_xy;
  if (det == 0.0 || !std::isfinite(det))
    throw FitError("no discernible circle: degenerate moment matrix");
  const double xc = (mxz * (myy - x) - myz * mxy) / det / 2.0;
  const double yc = (myz * (mxx - x) - mxz * mxy) / det / 2.0;

  Circle c;
  c.x = xc + mean_x;
  c.y = yc + mean_y;
  c.r = std::sqrt(xc * xc + yc * yc + mz);
  return c;
}

} // namespace detail

CircleFitResult circle_fit(const ComplexTrace& trace) {
  validate(trace);
  const std::size_t n = trace.freqs.size();
  const std::vector<double>& f = trace.freqs;

  // (1) cable delay from the off-resonant phase slope
  std::vector<double> raw_phase(n);
  for (std::size_t i = 0; i < n; ++i) raw_phase[i] = std::arg(trace.s21[i]);
  raw_phase = unwrap(std::move(raw_phase));
  const std::size_t wing = std::max<std::size_t>(n / 5, 2);
  std::vector<std::size_t> wing_idx;
  for (std::size_t i = 0; i < wing; ++i) wing_idx.push_back(i);
  for (std::size_t i = n - wing; i < n; ++i) wing_idx.push_back(i);
  double slope = 0, intercept = 0;
  line_fit(f, raw_phase, wing_idx, slope, intercept);
  const double tau0 = -slope / kTwoPi;

  // (2) remove the delay, fit the circle
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double ph = kTwoPi * f[i] * tau0;
    const double c = std::cos(ph), s = std::sin(ph);
    xs[i] = trace.s21[i].real() * c - trace.s21[i].imag() * s;
    ys[i] = trace.s21[i].real() * s + trace.s21[i].imag() * c;
  }
  const detail::Circle circle = detail::taubin_circle_fit(xs, ys);
  double scatter2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dr =
        std::hypot(xs[i] - circle.x, ys[i] - circle.y) - circle.r;
    scatter2 += dr * dr;
  }
  const double scatter = std::sqrt(scatter2 / n);
  if (circle.r < 5.0 * scatter)
    throw FitError("no discernible circle: radius below 5x radial scatter");

  // (3) phase of the centered data vs frequency
  std::vector<double> theta(n);
  for (std::size_t i = 0; i < n; ++i)
    theta[i] = std::atan2(ys[i] - circle.y, xs[i] - circle.x);
  theta = unwrap(std::move(theta));

  double th_lo = 0, th_hi = 0;
  for (std::size_t i = 0; i < wing; ++i) {
    th_lo += theta[i];
    th_hi += theta[n - 1 - i];
  }
  th_lo /= wing;
  th_hi /= wing;
  const double th_mid = 0.5 * (th_lo + th_hi);
  std::size_t i_res = 0;
  double best = std::abs(theta[0] - th_mid);
  for (std::size_t i = 1; i < n; ++i) {
    const double d = std::abs(theta[i] - th_mid);
    if (d < best) {
      best = d;
      i_res = i;
    }
  }
  const std::size_t halfwin = std::max<std::size_t>(n / 50, 3);
  std::vector<std::size_t> res_idx;
  for (std::size_t i = (i_res > halfwin ? i_res - halfwin : 0);
       i <= std::min(i_res + halfwin, n - 1); ++i)
    res_idx.push_back(i);
  double local_slope = 0, local_b = 0;
  line_fit(f, theta, res_idx, local_slope, local_b);
  // d theta/df at resonance = -4 Q_l / f_res
  double q0 = std::abs(local_slope) * f[i_res] / 4.0;
  q0 = std::clamp(q0, 1.0, 1e9);
  double fr0 = f[i_res];
  double th0 = theta[i_res];

  const auto phase_model_u = [](double q, double fr, double freq) {
    return 2.0 * q * (1.0 - freq / fr);
  };
  ResidualFn phase_res = [&](const std::vector<double>& p) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i)
      r[i] = theta[i] - (p[0] + 2.0 * std::atan(phase_model_u(p[1], p[2], f[i])));
    return r;
  };
  JacobianFn phase_jac = [&](const std::vector<double>& p) {
    std::vector<std::vector<double>> cols(3, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double u = phase_model_u(p[1], p[2], f[i]);
      const double den = 1.0 + u * u;
      cols[0][i] = -1.0;
      cols[1][i] = -2.0 * (2.0 * (1.0 - f[i] / p[2])) / den;
      cols[2][i] = -2.0 * (2.0 * p[1] * f[i] / (p[2] * p[2])) / den;
    }
    return cols;
  };
  LeastSquaresOptions phase_opt;
  phase_opt.typical_scale = {1.0, q0, fr0};
  phase_opt.lower = {-1e4, 1e-3, f.front()};
  phase_opt.upper = {1e4, 1e12, f.back()};
  const FitReport phase_fit = least_squares(phase_res, {th0, q0, fr0}, phase_opt,
                                            phase_jac, {"theta0", "q_loaded", "f_res"});
  const double theta0 = phase_fit.params[0];
  const double q_l = phase_fit.params[1];
  const double f_res = phase_fit.params[2];

  // (4) environment and coupling from the circle geometry; the off-resonant
  // point sits diametrically opposite the resonance angle theta0
  const std::complex<double> center(circle.x, circle.y);
  const std::complex<double> p_inf =
      center - circle.r * std::exp(std::complex<double>(0.0, theta0));
  double amp0 = std::abs(p_inf);
  double alpha0 = std::arg(p_inf);
  if (!(amp0 > 0.0)) throw FitError("no discernible circle: off-resonant point at origin");
  double qc0 = q_l * amp0 / (2.0 * circle.r);
  double phi0 = wrap_angle(theta0 - kPi - alpha0);

  // (5) joint refinement on the complex data. The phase is referenced to the
  // span center first: alpha at f = 0 and tau are nearly degenerate over a
  // narrow span GHz away from dc, and LM stalls in that valley. After the
  // centered fit converges, one polish pass in the dc-referenced basis
  // produces the reported parameters and uncertainties.
  // p = {amp, alpha_ref, tau, f_res, q_loaded, q_coupling_abs, phi0}
  const auto model_at = [&](const std::vector<double>& p, double f_ref,
                            std::size_t i) -> std::complex<double> {
    const double d = p[4] / p[5];
    const double t = 2.0 * p[4] * (f[i] - p[3]) / p[3];
    const std::complex<double> den(1.0, t);
    const std::complex<double> notch =
        1.0 - d * std::exp(std::complex<double>(0.0, p[6])) / den;
    const double ph = p[1] - kTwoPi * (f[i] - f_ref) * p[2];
    return p[0] * std::exp(std::complex<double>(0.0, ph)) * notch;
  };
  const auto full_res_at = [&](double f_ref) {
    return [&, f_ref](const std::vector<double>& p) {
      std::vector<double> r(2 * n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::complex<double> m = model_at(p, f_ref, i);
        r[i] = m.real() - trace.s21[i].real();
        r[n + i] = m.imag() - trace.s21[i].imag();
      }
      return r;
    };
  };
  const auto full_jac_at = [&](double f_ref) {
    return [&, f_ref](const std::vector<double>& p) {
      std::vector<std::vector<double>> cols(7, std::vector<double>(2 * n));
      const double d = p[4] / p[5];
      const std::complex<double> ephi =
          std::exp(std::complex<double>(0.0, p[6]));
      for (std::size_t i = 0; i < n; ++i) {
        const double t = 2.0 * p[4] * (f[i] - p[3]) / p[3];
        const std::complex<double> den(1.0, t);
        const std::complex<double> lor = d * ephi / den;
        const std::complex<double> notch = 1.0 - lor;
        const double ph = p[1] - kTwoPi * (f[i] - f_ref) * p[2];
        const std::complex<double> pre =
            p[0] * std::exp(std::complex<double>(0.0, ph));
        const std::complex<double> m = pre * notch;
        const std::complex<double> ii(0.0, 1.0);
        const std::complex<double> dm[7] = {
            m / p[0],
            ii * m,
            -kTwoPi * (f[i] - f_ref) * ii * m,
            -pre * ii * lor / den * 2.0 * p[4] * f[i] / (p[3] * p[3]),
            pre * (-lor / p[4] + ii * lor / den * t / p[4]),
            pre * lor / p[5],
            -pre * ii * lor,
        };
        for (int j = 0; j < 7; ++j) {
          cols[j][i] = dm[j].real();
          cols[j][n + i] = dm[j].imag();
        }
      }
      return cols;
    };
  };

  const double f_mid = 0.5 * (f.front() + f.back());
  LeastSquaresOptions full_opt;
  full_opt.typical_scale = {std::max(amp0, 1e-3), 1.0, std::max(std::abs(tau0), 1e-9),
                            f_res, q_l, qc0, 1.0};
  full_opt.lower = {1e-12, -12.6, -1e-3, f.front(), 1e-3, 1e-3, -12.6};
  full_opt.upper = {1e12, 12.6, 1e-3, f.back(), 1e12, 1e12, 12.6};
  const double alpha_mid0 = wrap_angle(alpha0 - kTwoPi * f_mid * tau0);
  const FitReport centered = least_squares(
      full_res_at(f_mid), {amp0, alpha_mid0, tau0, f_res, q_l, qc0, phi0}, full_opt,
      full_jac_at(f_mid), {"amp", "alpha", "tau", "f_res", "q_loaded",
                           "q_coupling_abs", "phi0"});

  std::vector<double> init = centered.params;
  init[1] = wrap_angle(init[1] + kTwoPi * f_mid * init[2]);
  FitReport report = least_squares(
      full_res_at(0.0), init, full_opt, full_jac_at(0.0),
      {"amp", "alpha", "tau", "f_res", "q_loaded", "q_coupling_abs", "phi0"});
  report.params[1] = wrap_angle(report.params[1]);
  report.params[6] = wrap_angle(report.params[6]);

  CircleFitResult out;
  out.env = {report.params[0], report.params[1], report.params[2]};
  out.notch = {report.params[4], report.params[5], report.params[6], report.params[3]};
  out.report = std::move(report);
  return out;
}

double q_internal(const NotchParams& notch, QConvention convention) {
  check_notch(notch);
  const double coupling_term = convention == QConvention::diameter_correction
                                   ? std::cos(notch.phi0) / notch.q_coupling_abs
                                   : 1.0 / notch.q_coupling_abs;
  const double inv = 1.0 / notch.q_loaded - coupling_term;
  if (!(inv > 0.0))
    throw FitError("q_internal <= 0: coupling bookkeeping inconsistent");
  return 1.0 / inv;
}

double kappa_from_q(double f_res_hz, double q) {
  if (!(f_res_hz > 0.0) || !(q > 0.0))
    throw std::invalid_argument("kappa_from_q: inputs must be positive");
  return f_res_hz / q;
}

void write_complex_trace_csv(std::ostream& out, const ComplexTrace& trace) {
  out << "freq_hz,re,im\n";
  char buf[128];
  for (std::size_t i = 0; i < trace.freqs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", trace.freqs[i],
                  trace.s21[i].real(), trace.s21[i].imag());
    out << buf;
  }
}

void write_complex_trace_csv(const std::string& path, const ComplexTrace& trace) {
  std::ofstream out(path);
  if (!out) throw std::invalid_argument("cannot write '" + path + "'");
  write_complex_trace_csv(out, trace);
}

ComplexTrace read_complex_trace_csv(std::istream& in) {
  ComplexTrace trace;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line.rfind("freq_hz,re,im", 0) != 0)
        throw std::invalid_argument("complex trace CSV: bad header '" + line + "'");
      header_seen = true;
      continue;
    }
    double fr, re, im;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &fr, &re, &im) != 3)
      throw std::invalid_argument("complex trace CSV: bad row '" + line + "'");
    trace.freqs.push_back(fr);
    trace.s21.emplace_back(re, im);
  }
  if (!header_seen) throw std::invalid_argument("complex trace CSV: empty input");
  return trace;
}

ComplexTrace read_complex_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  return read_complex_trace_csv(in);
}

} // namespace fluxmech
