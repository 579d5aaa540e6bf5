#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fluxmech {

// Raised when a fit cannot produce a usable result (degenerate data, missing
// peak, no discernible circle, ...). Distinct from std::invalid_argument /
// std::domain_error, which flag malformed inputs.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a calibration tone is required but absent or unusable.
class CalibrationError : public FitError {
 public:
  using FitError::FitError;
};

struct FitReport {
  std::vector<std::string> names;   // parameter names, fit order
  std::vector<double> params;       // estimates (last iterate if not converged)
  std::vector<double> stderrors;    // sqrt(diag((J^T J)^-1 s^2)), non-negative
  double residual_norm = 0.0;       // sum of squared residuals at `params`
  bool converged = false;
  int n_iter = 0;

  double param(std::string_view name) const;
  double stderror(std::string_view name) const;
};

struct LeastSquaresOptions {
  int max_iterations = 500;
  double gradient_tol = 1e-10;    // on max |J^T r|
  double step_tol = 1e-10;        // on max relative parameter step
  double lambda_init = 1e-3;      // LM damping; x10 on reject, /10 on accept
  std::vector<double> lower;      // optional box clamps; empty = unbounded
  std::vector<double> upper;
  std::vector<double> typical_scale; // characteristic magnitudes, used for
                                     // numeric differentiation steps and the
                                     // relative-step convergence test
};

// residual(params) -> r, minimized as sum r_i^2
using ResidualFn = std::function<std::vector<double>(const std::vector<double>&)>;
// jacobian(params) -> columns[j][i] = d r_i / d params_j
using JacobianFn =
    std::function<std::vector<std::vector<double>>(const std::vector<double>&)>;

// Levenberg-Marquardt. When no Jacobian is supplied, central differences with
// per-parameter steps 1e-6 * max(|x_j|, typical_scale_j) are used. The run is
// deterministic: identical inputs give bit-identical reports.
FitReport least_squares(const ResidualFn& residual, std::vector<double> init,
                        const LeastSquaresOptions& options = {},
                        const JacobianFn& jacobian = nullptr,
                        std::vector<std::string> names = {});

// Central difference (f(x+h) - f(x-h)) / 2h. Throws std::invalid_argument on
// h <= 0 or non-finite samples.
double numeric_derivative(const std::function<double(double)>& f, double x,
                          double h);

namespace detail {
// Solves A x = b for symmetric positive definite A (n x n, row-major, both
// overwritten). Returns false when the Cholesky factorization breaks down.
bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, int n);
// Inverse via Cholesky; returns false when not positive definite.
bool spd_inverse(std::vector<double>& a, int n);
} // namespace detail

} // namespace fluxmech
