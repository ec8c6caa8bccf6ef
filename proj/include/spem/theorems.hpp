#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "spem/entropy.hpp"

namespace spem {

// Numerical verification harness for the entropy-manipulation bounds on
// analytic (diagonal) Gaussian instances. Every check reports one
// BoundCheck; the randomized suite asserts holds == true across the board,
// so a violation is an implementation bug, not an experiment outcome.

enum class CheckMethod { analytic, monte_carlo };

struct BoundCheck {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;  // lower interval edge for interval checks
  double rhs_hi = std::numeric_limits<double>::quiet_NaN();  // upper edge, NaN
                                                             // for one-sided
  bool holds = false;
  double slack = 0.0;    // lhs - rhs
  std::string instance;  // human-readable parameters (comma-free)
  CheckMethod method = CheckMethod::analytic;
  double tolerance = 0.0;
};

// Increment of the expected log-likelihood gap when the model is scored on
// pure noise instead of perturbed samples, split into its entropy and
// KL-divergence parts. The identity delta == delta_e + delta_kl holds to
// 1e-10 on analytic instances. c is the unperturbed expected gap
// E_P[log m] - E_Q[log m].
struct DeltaDecomposition {
  double delta = 0.0;
  double delta_e = 0.0;
  double delta_kl = 0.0;
  double c = 0.0;
};

// All expectations closed-form: Z ~ N(0, var_p I), Z' ~ N(0, var_q I),
// P' = P * Z, Q' = Q * Z'.
//   delta    = [E_Z - E_Z'](log m) - [E_P' - E_Q'](log m)
//   delta_e  = [H(Z') - H(Z)] - [H(Q') - H(P')]
//   delta_kl = [KL(Z'||m) - KL(Z||m)] - [KL(Q'||m) - KL(P'||m)]
DeltaDecomposition delta_decomposition(const GaussianSpec& p,
                                       const GaussianSpec& q,
                                       const GaussianSpec& model, double var_p,
                                       double var_q);

// Expected log-likelihood gap E_P[log m] - E_Q[log m], estimated by Monte
// Carlo (n >= 2 draws per side), against the analytic identity
//   KL(Q||m) - KL(P||m) + H(Q) - H(P).
// Interval check within 3 combined standard errors. Each side's draw stream
// is keyed on the distribution's parameters, so swapping P and Q flips the
// estimate exactly and P = Q gives exactly zero.
BoundCheck check_loglik_decomposition(const GaussianSpec& p,
                                      const GaussianSpec& q,
                                      const GaussianSpec& model, std::size_t n,
                                      std::uint64_t seed);

// Lower bound on E_P[log m] - E_Q'[log m] where Q' = Q * N(0, sigma^2 I):
//   (d/2) log(e^{2 H(Q)/d} + 2 pi e sigma^2) - H(P) - KL(P||m).
// The entropy-power inequality makes this hold for every Gaussian instance.
// n = 0 evaluates the left side in closed form (tolerance 1e-9); n > 0
// estimates it by Monte Carlo (tolerance 3 combined standard errors).
BoundCheck check_entropy_lower_bound(const GaussianSpec& p,
                                     const GaussianSpec& q,
                                     const GaussianSpec& model, double sigma,
                                     std::size_t n = 0, std::uint64_t seed = 0);

// Lower bound on E_P'[log m] - E_Q'[log m] with both sides perturbed,
// P' = P * N(0, sigma_p^2 I) and Q' = Q * N(0, sigma_q^2 I):
//   (d/2) log[(e^{2 H(Q)/d} + 2 pi e sigma_q^2)
//             / (2 pi e (prod_i(lambda_i + sigma_p^2))^{1/d})] - KL(P'||m)
// where lambda_i are the eigenvalues of P's covariance (its diagonal here).
// Noise scales enter as fixed constants (the point-mass case of the bound's
// random-scale statement).
BoundCheck check_scaled_noise_lower_bound(const GaussianSpec& p,
                                          const GaussianSpec& q,
                                          const GaussianSpec& model,
                                          double sigma_p, double sigma_q,
                                          std::size_t n = 0,
                                          std::uint64_t seed = 0);

// Entropy increment delta_e for isotropic X ~ N(mu, var_x I) and diagonal
// Y with per-coordinate variances var_y (means drop out of every entropy):
//   (d/2) log(var_q/var_p) - (1/2) sum_i log(var_y_i + var_q)
//                          + (d/2) log(var_x + var_p).
double delta_e_analytic(double var_x, const std::vector<double>& var_y,
                        double var_p, double var_q);
// Isotropic-Y convenience form.
double delta_e_analytic(double var_x, double var_y, double var_p, double var_q,
                        std::size_t d);

// Sufficient variance-ratio threshold for delta_e > 0:
//   var_q/var_p > 2 pi e tr(Sigma_Y) / (d e^{2 H(X)/d}),
// which for isotropic Gaussian X reduces to mean(var_y) / var_x.
double delta_e_threshold(double var_x, const std::vector<double>& var_y);

// Checks the implication "ratio above threshold => delta_e > 0". When Y is
// isotropic the threshold is also necessary, so a ratio strictly below it
// asserts delta_e < 0 (encoded as lhs = -delta_e >= 0). Ratios below the
// threshold for anisotropic Y assert nothing (the condition is one-sided)
// and report holds = true.
BoundCheck check_delta_e_condition(double var_x,
                                   const std::vector<double>& var_y,
                                   double var_p, double var_q);

struct DeltaEInstance {
  double var_x = 1.0;
  std::vector<double> var_y;
  double var_p = 0.01;
  double var_q = 1.0;
};

// Strict monotonicity of delta_e in the noise variances:
//   d(delta_e)/d(var_p) = (d/2) (1/(var_x + var_p) - 1/var_p)      < 0
//   d(delta_e)/d(var_q) = d/(2 var_q) - (1/2) sum_i 1/(var_y_i + var_q) > 0.
// Central finite differences with step h are compared against the closed
// forms (agreement within 1e-6 relative, floored at 1e-6 absolute). lhs is
// the smallest of the two sign margins and the two agreement margins.
BoundCheck check_delta_e_monotonicity(const DeltaEInstance& inst, double h = 1e-6);

// Two-sided interval for delta under an isotropic Gaussian model
// m = N(0, s^2 I): the negative log-density has Hessian I/s^2, so it is
// convex (semiconvexity parameter 0) and L-smooth with L = 1/s^2, giving
//   delta in [-C - d L (var_p + var_q)/2, -C + d L (var_p + var_q)/2],
// C = E_P[log m] - E_Q[log m]. Whenever -2C/(dL) > var_p + var_q the check
// additionally asserts delta > 0. n = 0 is fully analytic; n > 0 estimates
// delta by Monte Carlo.
BoundCheck check_semiconvex_interval(const GaussianSpec& p,
                                     const GaussianSpec& q, double s,
                                     double var_p, double var_q,
                                     std::size_t n = 0, std::uint64_t seed = 0);

// Diagnostic only: |delta| <= L (W2(P,Q) + 2 sqrt(d) |sigma_q - sigma_p|)
// with L taken as the maximum gradient norm of log m over n points sampled
// uniformly in the ball of radius R (the log-density of a Gaussian has no
// global Lipschitz constant, so this is reported, never asserted).
// Encoded as lhs = bound - |delta| with rhs = 0.
BoundCheck check_lipschitz_delta_bound(const GaussianSpec& p,
                                       const GaussianSpec& q,
                                       const GaussianSpec& model,
                                       double sigma_p, double sigma_q,
                                       double radius, std::size_t n,
                                       std::uint64_t seed);

// Randomized verification suite: per instance index, one check from each of
// the five proved-bound families (entropy lower bound, scaled-noise lower
// bound, delta_e sufficient condition, delta_e monotonicity, semiconvex
// interval), on analytic Gaussians with variances log-uniform in
// [1e-2, 1e2] and d drawn from {1, 2, 4, 8}. Deterministic per seed.
std::vector<BoundCheck> run_theorem_suite(std::size_t instances_per_family,
                                          std::uint64_t seed);

// Columns: name,lhs,rhs,rhs_hi,holds,slack,method,tolerance,instance.
// rhs_hi is blank for one-sided checks. Written atomically.
void save_bound_checks_csv(const std::filesystem::path& path,
                           const std::vector<BoundCheck>& checks);

}  // namespace spem
