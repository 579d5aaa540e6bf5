#include "fluxmech/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fluxmech/kernels.hpp"

namespace fluxmech {

namespace {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double diff_step(double x, double scale) {
  return 1e-6 * std::max(std::abs(x), scale);
}

std::vector<std::vector<double>> numeric_jacobian(const ResidualFn& residual,
                                                  const std::vector<double>& x,
                                                  const std::vector<double>& scales,
                                                  std::size_t n_res,
                                                  const std::vector<double>& lo,
                                                  const std::vector<double>& hi) {
  const std::size_t p = x.size();
  std::vector<std::vector<double>> cols(p);
  std::vector<double> xp = x;
  for (std::size_t j = 0; j < p; ++j) {
    const double h = diff_step(x[j], scales[j]);
    // fall back to a one-sided stencil at an active bound so the residual is
    // never evaluated outside the feasible region
    const bool clip_hi = !hi.empty() && x[j] + h > hi[j];
    const bool clip_lo = !lo.empty() && x[j] - h < lo[j];
    if (clip_hi && clip_lo) { // pinned: interval narrower than the stencil
      cols[j].assign(n_res, 0.0);
      continue;
    }
    xp[j] = clip_hi ? x[j] : x[j] + h;
    std::vector<double> rp = residual(xp);
    xp[j] = clip_lo ? x[j] : x[j] - h;
    std::vector<double> rm = residual(xp);
    xp[j] = x[j];
    if (rp.size() != n_res || rm.size() != n_res)
      throw std::invalid_argument("residual size changed during differentiation");
    cols[j].resize(n_res);
    const double inv = 1.0 / ((clip_hi || clip_lo) ? h : 2.0 * h);
    for (std::size_t i = 0; i < n_res; ++i) cols[j][i] = (rp[i] - rm[i]) * inv;
  }
  return cols;
}

void clamp(std::vector<double>& x, const std::vector<double>& lo,
           const std::vector<double>& hi) {
  if (!lo.empty())
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = std::max(x[j], lo[j]);
  if (!hi.empty())
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = std::min(x[j], hi[j]);
}

} // namespace

namespace detail {

bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, int n) {
  // in-place LL^T, then two triangular solves
  for (int j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) return false;
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (int i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
  }
  for (int i = 0; i < n; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
    b[i] = s / a[i * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (int k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
    b[i] = s / a[i * n + i];
  }
  return true;
}

bool spd_inverse(std::vector<double>& a, int n) {
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> acopy;
  for (int c = 0; c < n; ++c) {
    acopy = a;
    std::vector<double> e(n, 0.0);
    e[c] = 1.0;
    if (!cholesky_solve(acopy, e, n)) return false;
    for (int r = 0; r < n; ++r) inv[r * n + c] = e[r];
  }
  a = inv;
  return true;
}

} // namespace detail

double FitReport::param(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return params[i];
  throw std::out_of_range("no fit parameter named '" + std::string(name) + "'");
}

double FitReport::stderror(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return stderrors[i];
  throw std::out_of_range("no fit parameter named '" + std::string(name) + "'");
}

double numeric_derivative(const std::function<double(double)>& f, double x,
                          double h) {
  if (!(h > 0.0) || !std::isfinite(h))
    throw std::invalid_argument("numeric_derivative: step must be positive and finite");
  const double fp = f(x + h);
  const double fm = f(x - h);
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw std::invalid_argument("numeric_derivative: non-finite function value");
  return (fp - fm) / (2.0 * h);
}

FitReport least_squares(const ResidualFn& residual, std::vector<double> init,
                        const LeastSquaresOptions& options,
                        const JacobianFn& jacobian,
                        std::vector<std::string> names) {
  const std::size_t p = init.size();
  if (p == 0) throw std::invalid_argument("least_squares: empty parameter vector");
  if (!options.lower.empty() && options.lower.size() != p)
    throw std::invalid_argument("least_squares: lower bound size mismatch");
  if (!options.upper.empty() && options.upper.size() != p)
    throw std::invalid_argument("least_squares: upper bound size mismatch");

  std::vector<double> scales = options.typical_scale;
  if (scales.empty()) scales.assign(p, 1.0);
  if (scales.size() != p)
    throw std::invalid_argument("least_squares: typical_scale size mismatch");

  FitReport report;
  report.names = std::move(names);
  if (report.names.empty())
    for (std::size_t j = 0; j < p; ++j) report.names.push_back("p" + std::to_string(j));
  if (report.names.size() != p)
    throw std::invalid_argument("least_squares: parameter name count mismatch");

  std::vector<double> x = std::move(init);
  clamp(x, options.lower, options.upper);
  std::vector<double> r = residual(x);
  if (r.empty() || !all_finite(r))
    throw std::invalid_argument("least_squares: residual non-finite at initial point");
  const std::size_t m = r.size();
  double ssr = kernels::dot(r.data(), r.data(), m);

  double lambda = options.lambda_init;
  bool converged = false;
  int iter = 0;
  std::vector<std::vector<double>> cols;

  auto eval_jacobian = [&](const std::vector<double>& at) {
    if (jacobian) {
      auto j = jacobian(at);
      if (j.size() != p) throw std::invalid_argument("least_squares: jacobian column count mismatch");
      for (const auto& col : j)
        if (col.size() != m) throw std::invalid_argument("least_squares: jacobian column size mismatch");
      return j;
    }
    return numeric_jacobian(residual, at, scales, m, options.lower, options.upper);
  };

  while (iter < options.max_iterations && !converged) {
    ++iter;
    cols = eval_jacobian(x);

    std::vector<double> g(p); // J^T r
    for (std::size_t j = 0; j < p; ++j) g[j] = kernels::dot(cols[j].data(), r.data(), m);
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax < options.gradient_tol) {
      converged = true;
      break;
    }

    std::vector<double> a(p * p); // J^T J
    for (std::size_t j = 0; j < p; ++j)
      for (std::size_t k = j; k < p; ++k) {
        const double v = kernels::dot(cols[j].data(), cols[k].data(), m);
        a[j * p + k] = v;
        a[k * p + j] = v;
      }

    // column scaling keeps the solve well conditioned across parameters of
    // wildly different magnitude (Hz vs seconds vs dimensionless)
    std::vector<double> d(p);
    for (std::size_t j = 0; j < p; ++j)
      d[j] = std::max(std::sqrt(a[j * p + j]), 1e-300);

    bool stepped = false;
    bool stalled = false;
    while (!stepped) {
      std::vector<double> as(p * p);
      std::vector<double> bs(p);
      for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t k = 0; k < p; ++k)
          as[j * p + k] = a[j * p + k] / (d[j] * d[k]);
        as[j * p + j] += lambda;
        bs[j] = -g[j] / d[j];
      }
      const bool solved = detail::cholesky_solve(as, bs, static_cast<int>(p));
      if (solved) {
        std::vector<double> xn = x;
        for (std::size_t j = 0; j < p; ++j) xn[j] += bs[j] / d[j];
        clamp(xn, options.lower, options.upper);
        std::vector<double> rn = residual(xn);
        if (rn.size() == m && all_finite(rn)) {
          const double ssrn = kernels::dot(rn.data(), rn.data(), m);
          if (ssrn < ssr) {
            double rel_step = 0.0;
            for (std::size_t j = 0; j < p; ++j)
              rel_step = std::max(rel_step, std::abs(xn[j] - x[j]) /
                                                std::max(std::abs(xn[j]), scales[j]));
            x = std::move(xn);
            r = std::move(rn);
            ssr = ssrn;
            lambda = std::max(lambda / 10.0, 1e-14);
            stepped = true;
            if (rel_step < options.step_tol) converged = true;
            break;
          }
          // a heavily damped (tiny) step that cannot change the cost beyond
          // machine-level precision means we sit at a numerical minimum
          if (lambda >= 1e3 && ssrn - ssr <= 1e-12 * ssr) {
            stalled = true;
            break;
          }
        }
      }
      lambda *= 10.0;
      if (lambda > 1e15) break; // damped out: no downhill step exists at this scale
    }
    if (stalled) {
      converged = true;
      break;
    }
    if (!stepped) break;
  }

  report.params = x;
  report.residual_norm = ssr;
  report.converged = converged;
  report.n_iter = iter;

  // covariance at the solution: (J^T J)^-1 * ssr/(m-p), through the same
  // column scaling as the solve
  cols = eval_jacobian(x);
  std::vector<double> a(p * p);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = j; k < p; ++k) {
      const double v = kernels::dot(cols[j].data(), cols[k].data(), m);
      a[j * p + k] = v;
      a[k * p + j] = v;
    }
  std::vector<double> d(p);
  for (std::size_t j = 0; j < p; ++j) d[j] = std::max(std::sqrt(a[j * p + j]), 1e-300);
  std::vector<double> as(p * p);
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = 0; k < p; ++k) as[j * p + k] = a[j * p + k] / (d[j] * d[k]);
  const double s2 = ssr / static_cast<double>(std::max<std::size_t>(m > p ? m - p : 1, 1));
  report.stderrors.assign(p, std::numeric_limits<double>::infinity());
  if (detail::spd_inverse(as, static_cast<int>(p))) {
    for (std::size_t j = 0; j < p; ++j) {
      const double var = as[j * p + j] / (d[j] * d[j]) * s2;
      report.stderrors[j] = std::sqrt(std::max(var, 0.0));
    }
  }
  return report;
}

} // namespace fluxmech
