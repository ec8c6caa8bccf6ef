#include "spem/theorems.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "spem/matrix.hpp"
#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {

namespace {

constexpr double kTwoPiE = 2.0 * 3.14159265358979323846 * 2.718281828459045235;
constexpr double kAnalyticTol = 1e-9;

std::string method_name(CheckMethod m) {
  return m == CheckMethod::analytic ? "analytic" : "monte_carlo";
}

// Draw stream keyed on the distribution's parameters, so that identical
// specs reuse identical draws (exact cancellation for P = Q) and swapped
// arguments swap their estimates exactly.
std::uint64_t spec_key(const GaussianSpec& g, std::uint64_t seed) {
  std::uint64_t hm = fnv1a64(g.mean.data(), g.mean.size() * sizeof(double));
  std::uint64_t hv = fnv1a64(g.var.data(), g.var.size() * sizeof(double));
  return splitmix64(seed ^ splitmix64(hm ^ (hv * 0x9e3779b97f4a7c15ULL)));
}

McEstimate mc_side(const GaussianSpec& g, const GaussianSpec& model,
                   std::size_t n, std::uint64_t seed) {
  auto sampler = [&g](Rng& rng) {
    std::vector<double> x(g.dim());
    for (std::size_t i = 0; i < g.dim(); ++i) {
      x[i] = g.mean[i] + std::sqrt(g.var[i]) * rng.normal();
    }
    return x;
  };
  auto log_density = [&model](const std::vector<double>& x) {
    return gaussian_logpdf(model, x.data());
  };
  return mc_expected_loglik(sampler, log_density, n, spec_key(g, seed));
}

struct GapEstimate {
  double value = 0.0;
  double combined_se = 0.0;
};

// E_a[log m] - E_b[log m] by Monte Carlo, with the combined standard error.
GapEstimate mc_gap(const GaussianSpec& a, const GaussianSpec& b,
                   const GaussianSpec& model, std::size_t n,
                   std::uint64_t seed) {
  McEstimate ea = mc_side(a, model, n, seed);
  McEstimate eb = mc_side(b, model, n, seed);
  return {ea.mean - eb.mean, std::hypot(ea.std_error, eb.std_error)};
}

void check_same_dim(const GaussianSpec& a, const GaussianSpec& b,
                    const char* msg) {
  require(a.dim() == b.dim() && a.dim() > 0, msg);
}

void check_positive(double v, const char* msg) {
  require(std::isfinite(v) && v > 0.0, msg);
}

std::string dim_tag(std::size_t d) { return "d=" + std::to_string(d); }

void finish(BoundCheck& c) {
  c.slack = c.lhs - c.rhs;
  bool above = c.lhs >= c.rhs - c.tolerance;
  bool below = std::isnan(c.rhs_hi) || c.lhs <= c.rhs_hi + c.tolerance;
  c.holds = above && below;
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

GaussianSpec random_diag(Rng& rng, std::size_t d, bool zero_mean) {
  std::vector<double> mean(d, 0.0), var(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (!zero_mean) mean[i] = rng.normal();
    var[i] = log_uniform(rng, 1e-2, 1e2);
  }
  return GaussianSpec::diagonal(std::move(mean), std::move(var));
}

}  // namespace

DeltaDecomposition delta_decomposition(const GaussianSpec& p,
                                       const GaussianSpec& q,
                                       const GaussianSpec& model, double var_p,
                                       double var_q) {
  check_same_dim(p, q, "delta_decomposition: P/Q dimension mismatch");
  check_same_dim(p, model, "delta_decomposition: model dimension mismatch");
  check_positive(var_p, "delta_decomposition: var_p must be positive");
  check_positive(var_q, "delta_decomposition: var_q must be positive");
  std::size_t d = p.dim();
  GaussianSpec z = GaussianSpec::isotropic(d, var_p);
  GaussianSpec zq = GaussianSpec::isotropic(d, var_q);
  GaussianSpec pp = p.convolved(var_p);
  GaussianSpec qp = q.convolved(var_q);

  DeltaDecomposition out;
  double noise_gap = expected_gaussian_loglik(z, model) -
                     expected_gaussian_loglik(zq, model);
  double perturbed_gap = expected_gaussian_loglik(pp, model) -
                         expected_gaussian_loglik(qp, model);
  out.delta = noise_gap - perturbed_gap;
  out.delta_e = (gaussian_entropy(zq) - gaussian_entropy(z)) -
                (gaussian_entropy(qp) - gaussian_entropy(pp));
  out.delta_kl = (kl_gaussians(zq, model) - kl_gaussians(z, model)) -
                 (kl_gaussians(qp, model) - kl_gaussians(pp, model));
  out.c = expected_gaussian_loglik(p, model) -
          expected_gaussian_loglik(q, model);
  return out;
}

BoundCheck check_loglik_decomposition(const GaussianSpec& p,
                                      const GaussianSpec& q,
                                      const GaussianSpec& model, std::size_t n,
                                      std::uint64_t seed) {
  check_same_dim(p, q, "loglik_decomposition: P/Q dimension mismatch");
  check_same_dim(p, model, "loglik_decomposition: model dimension mismatch");
  require(n >= 2, "loglik_decomposition: need at least two draws per side");

  BoundCheck c;
  c.name = "loglik_decomposition";
  c.method = CheckMethod::monte_carlo;
  GapEstimate gap = mc_gap(p, q, model, n, seed);
  c.lhs = gap.value;
  c.rhs = kl_gaussians(q, model) - kl_gaussians(p, model) +
          gaussian_entropy(q) - gaussian_entropy(p);
  c.rhs_hi = c.rhs;
  c.tolerance = 3.0 * gap.combined_se;
  c.instance = dim_tag(p.dim()) + " n=" + std::to_string(n) +
               " se=" + format_double(gap.combined_se);
  finish(c);
  return c;
}

BoundCheck check_entropy_lower_bound(const GaussianSpec& p,
                                     const GaussianSpec& q,
                                     const GaussianSpec& model, double sigma,
                                     std::size_t n, std::uint64_t seed) {
  check_same_dim(p, q, "entropy_lower_bound: P/Q dimension mismatch");
  check_same_dim(p, model, "entropy_lower_bound: model dimension mismatch");
  require(std::isfinite(sigma) && sigma >= 0.0,
          "entropy_lower_bound: sigma must be nonnegative");

  std::size_t d = p.dim();
  GaussianSpec q_pert = q.convolved(sigma * sigma);

  BoundCheck c;
  c.name = "entropy_lower_bound";
  double hq = gaussian_entropy(q);
  c.rhs = 0.5 * static_cast<double>(d) *
              std::log(std::exp(2.0 * hq / static_cast<double>(d)) +
                       kTwoPiE * sigma * sigma) -
          gaussian_entropy(p) - kl_gaussians(p, model);
  if (n == 0) {
    c.method = CheckMethod::analytic;
    c.lhs = expected_gaussian_loglik(p, model) -
            expected_gaussian_loglik(q_pert, model);
    c.tolerance = kAnalyticTol;
  } else {
    c.method = CheckMethod::monte_carlo;
    GapEstimate gap = mc_gap(p, q_pert, model, n, seed);
    c.lhs = gap.value;
    c.tolerance = 3.0 * gap.combined_se;
  }
  c.instance = dim_tag(d) + " sigma=" + format_double(sigma) +
               " n=" + std::to_string(n);
  finish(c);
  return c;
}

BoundCheck check_scaled_noise_lower_bound(const GaussianSpec& p,
                                          const GaussianSpec& q,
                                          const GaussianSpec& model,
                                          double sigma_p, double sigma_q,
                                          std::size_t n, std::uint64_t seed) {
  check_same_dim(p, q, "scaled_noise_lower_bound: P/Q dimension mismatch");
  check_same_dim(p, model, "scaled_noise_lower_bound: model dimension mismatch");
  check_positive(sigma_p, "scaled_noise_lower_bound: sigma_p must be positive");
  check_positive(sigma_q, "scaled_noise_lower_bound: sigma_q must be positive");

  std::size_t d = p.dim();
  double var_p = sigma_p * sigma_p;
  double var_q = sigma_q * sigma_q;
  GaussianSpec p_pert = p.convolved(var_p);
  GaussianSpec q_pert = q.convolved(var_q);

  // Geometric mean of (lambda_i + sigma_p^2) over P's covariance spectrum,
  // computed in log space.
  double mean_log = 0.0;
  for (double v : p.var) mean_log += std::log(v + var_p);
  mean_log /= static_cast<double>(d);

  double hq = gaussian_entropy(q);
  double numerator =
      std::exp(2.0 * hq / static_cast<double>(d)) + kTwoPiE * var_q;
  double denominator = kTwoPiE * std::exp(mean_log);

  BoundCheck c;
  c.name = "scaled_noise_lower_bound";
  c.rhs = 0.5 * static_cast<double>(d) * std::log(numerator / denominator) -
          kl_gaussians(p_pert, model);
  if (n == 0) {
    c.method = CheckMethod::analytic;
    c.lhs = expected_gaussian_loglik(p_pert, model) -
            expected_gaussian_loglik(q_pert, model);
    c.tolerance = kAnalyticTol;
  } else {
    c.method = CheckMethod::monte_carlo;
    GapEstimate gap = mc_gap(p_pert, q_pert, model, n, seed);
    c.lhs = gap.value;
    c.tolerance = 3.0 * gap.combined_se;
  }
  c.instance = dim_tag(d) + " sigma_p=" + format_double(sigma_p) +
               " sigma_q=" + format_double(sigma_q) + " n=" + std::to_string(n);
  finish(c);
  return c;
}

double delta_e_analytic(double var_x, const std::vector<double>& var_y,
                        double var_p, double var_q) {
  check_positive(var_x, "delta_e_analytic: var_x must be positive");
  check_positive(var_p, "delta_e_analytic: var_p must be positive");
  check_positive(var_q, "delta_e_analytic: var_q must be positive");
  require(!var_y.empty(), "delta_e_analytic: var_y must be nonempty");
  double d = static_cast<double>(var_y.size());
  double sum_log = 0.0;
  for (double v : var_y) {
    check_positive(v, "delta_e_analytic: var_y entries must be positive");
    sum_log += std::log(v + var_q);
  }
  return 0.5 * d * std::log(var_q / var_p) - 0.5 * sum_log +
         0.5 * d * std::log(var_x + var_p);
}

double delta_e_analytic(double var_x, double var_y, double var_p, double var_q,
                        std::size_t d) {
  require(d > 0, "delta_e_analytic: d must be positive");
  return delta_e_analytic(var_x, std::vector<double>(d, var_y), var_p, var_q);
}

double delta_e_threshold(double var_x, const std::vector<double>& var_y) {
  check_positive(var_x, "delta_e_threshold: var_x must be positive");
  require(!var_y.empty(), "delta_e_threshold: var_y must be nonempty");
  // 2 pi e tr(Sigma_Y) / (d e^{2 H(X)/d}) with isotropic Gaussian X, where
  // e^{2 H(X)/d} = 2 pi e var_x: the constants cancel to mean(var_y)/var_x.
  double sum = 0.0;
  for (double v : var_y) {
    check_positive(v, "delta_e_threshold: var_y entries must be positive");
    sum += v;
  }
  return sum / (static_cast<double>(var_y.size()) * var_x);
}

BoundCheck check_delta_e_condition(double var_x,
                                   const std::vector<double>& var_y,
                                   double var_p, double var_q) {
  double de = delta_e_analytic(var_x, var_y, var_p, var_q);
  double thr = delta_e_threshold(var_x, var_y);
  double ratio = var_q / var_p;

  double lo = *std::min_element(var_y.begin(), var_y.end());
  double hi = *std::max_element(var_y.begin(), var_y.end());
  bool iso_y = (hi - lo) <= 1e-12 * hi;

  BoundCheck c;
  c.name = "delta_e_condition";
  c.method = CheckMethod::analytic;
  c.tolerance = kAnalyticTol;
  std::string base = dim_tag(var_y.size()) + " ratio=" + format_double(ratio) +
                     " threshold=" + format_double(thr);
  if (ratio > thr) {
    c.lhs = de;
    c.rhs = 0.0;
    c.instance = base + " branch=above";
  } else if (iso_y && ratio < thr) {
    // For isotropic Y the threshold is exact, so below it delta_e < 0.
    c.lhs = -de;
    c.rhs = 0.0;
    c.instance = base + " branch=below_isotropic";
  } else {
    // One-sided condition: nothing is claimed below the threshold for
    // anisotropic Y (or exactly at it).
    c.lhs = 0.0;
    c.rhs = 0.0;
    c.instance = base + " branch=vacuous";
  }
  finish(c);
  return c;
}

BoundCheck check_delta_e_monotonicity(const DeltaEInstance& inst, double h) {
  check_positive(h, "delta_e_monotonicity: h must be positive");
  require(h < inst.var_p && h < inst.var_q,
          "delta_e_monotonicity: step exceeds a variance");
  double d = static_cast<double>(inst.var_y.size());

  auto f = [&inst](double vp, double vq) {
    return delta_e_analytic(inst.var_x, inst.var_y, vp, vq);
  };
  double fd_p = (f(inst.var_p + h, inst.var_q) - f(inst.var_p - h, inst.var_q)) /
                (2.0 * h);
  double fd_q = (f(inst.var_p, inst.var_q + h) - f(inst.var_p, inst.var_q - h)) /
                (2.0 * h);

  double analytic_p =
      0.5 * d * (1.0 / (inst.var_x + inst.var_p) - 1.0 / inst.var_p);
  double analytic_q = 0.5 * d / inst.var_q;
  for (double v : inst.var_y) analytic_q -= 0.5 / (v + inst.var_q);

  double tol_p = 1e-6 * std::max(1.0, std::fabs(analytic_p));
  double tol_q = 1e-6 * std::max(1.0, std::fabs(analytic_q));

  BoundCheck c;
  c.name = "delta_e_monotonicity";
  c.method = CheckMethod::analytic;
  c.tolerance = kAnalyticTol;
  // Smallest of: strict decrease in var_p, strict increase in var_q, and the
  // two finite-difference-vs-closed-form agreement margins.
  c.lhs = std::min(std::min(-fd_p, fd_q),
                   std::min(tol_p - std::fabs(fd_p - analytic_p),
                            tol_q - std::fabs(fd_q - analytic_q)));
  c.rhs = 0.0;
  c.instance = dim_tag(inst.var_y.size()) + " h=" + format_double(h) +
               " dp=" + format_double(analytic_p) +
               " dq=" + format_double(analytic_q);
  finish(c);
  return c;
}

BoundCheck check_semiconvex_interval(const GaussianSpec& p,
                                     const GaussianSpec& q, double s,
                                     double var_p, double var_q,
                                     std::size_t n, std::uint64_t seed) {
  check_same_dim(p, q, "semiconvex_interval: P/Q dimension mismatch");
  check_positive(s, "semiconvex_interval: s must be positive");
  check_positive(var_p, "semiconvex_interval: var_p must be positive");
  check_positive(var_q, "semiconvex_interval: var_q must be positive");

  std::size_t d = p.dim();
  GaussianSpec model = GaussianSpec::isotropic(d, s * s);
  // -log model has Hessian I/s^2: convex (semiconvexity constant 0) and
  // L-smooth with L = 1/s^2.
  double smooth_l = 1.0 / (s * s);
  double c_gap = expected_gaussian_loglik(p, model) -
                 expected_gaussian_loglik(q, model);
  double half = 0.5 * static_cast<double>(d) * smooth_l * (var_p + var_q);

  GaussianSpec z = GaussianSpec::isotropic(d, var_p);
  GaussianSpec zq = GaussianSpec::isotropic(d, var_q);
  GaussianSpec pp = p.convolved(var_p);
  GaussianSpec qp = q.convolved(var_q);

  BoundCheck c;
  c.name = "semiconvex_interval";
  c.rhs = -c_gap - half;
  c.rhs_hi = -c_gap + half;
  if (n == 0) {
    c.method = CheckMethod::analytic;
    c.lhs = (expected_gaussian_loglik(z, model) -
             expected_gaussian_loglik(zq, model)) -
            (expected_gaussian_loglik(pp, model) -
             expected_gaussian_loglik(qp, model));
    c.tolerance = kAnalyticTol;
  } else {
    c.method = CheckMethod::monte_carlo;
    McEstimate ez = mc_side(z, model, n, seed);
    McEstimate ezq = mc_side(zq, model, n, seed);
    McEstimate epp = mc_side(pp, model, n, seed);
    McEstimate eqp = mc_side(qp, model, n, seed);
    c.lhs = (ez.mean - ezq.mean) - (epp.mean - eqp.mean);
    c.tolerance = 3.0 * std::sqrt(ez.std_error * ez.std_error +
                                  ezq.std_error * ezq.std_error +
                                  epp.std_error * epp.std_error +
                                  eqp.std_error * eqp.std_error);
  }
  bool positivity_required =
      -2.0 * c_gap / (static_cast<double>(d) * smooth_l) > var_p + var_q;
  c.instance = dim_tag(d) + " s=" + format_double(s) +
               " c=" + format_double(c_gap) + " n=" + std::to_string(n) +
               (positivity_required ? " positive=required" : "");
  finish(c);
  if (positivity_required && !(c.lhs > 0.0)) c.holds = false;
  return c;
}

BoundCheck check_lipschitz_delta_bound(const GaussianSpec& p,
                                       const GaussianSpec& q,
                                       const GaussianSpec& model,
                                       double sigma_p, double sigma_q,
                                       double radius, std::size_t n,
                                       std::uint64_t seed) {
  check_same_dim(p, q, "lipschitz_delta_bound: P/Q dimension mismatch");
  check_same_dim(p, model, "lipschitz_delta_bound: model dimension mismatch");
  check_positive(sigma_p, "lipschitz_delta_bound: sigma_p must be positive");
  check_positive(sigma_q, "lipschitz_delta_bound: sigma_q must be positive");
  check_positive(radius, "lipschitz_delta_bound: radius must be positive");
  require(n > 0, "lipschitz_delta_bound: need at least one ball sample");

  std::size_t d = p.dim();
  DeltaDecomposition dec =
      delta_decomposition(p, q, model, sigma_p * sigma_p, sigma_q * sigma_q);

  // Empirical Lipschitz scale: max gradient norm of log model over points
  // drawn uniformly from the ball of the given radius.
  double max_grad = 0.0;
  std::vector<double> x(d);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::for_sample(seed, "lipschitz.ball", i);
    double norm_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = rng.normal();
      norm_sq += x[j] * x[j];
    }
    double r = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
    double scale = norm_sq > 0.0 ? r / std::sqrt(norm_sq) : 0.0;
    double grad_sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double g = (x[j] * scale - model.mean[j]) / model.var[j];
      grad_sq += g * g;
    }
    max_grad = std::max(max_grad, std::sqrt(grad_sq));
  }

  double bound = max_grad * (w2_diagonal(p, q) +
                             2.0 * std::sqrt(static_cast<double>(d)) *
                                 std::fabs(sigma_q - sigma_p));

  BoundCheck c;
  c.name = "lipschitz_delta_diagnostic";
  c.method = CheckMethod::monte_carlo;
  c.tolerance = kAnalyticTol;
  c.lhs = bound - std::fabs(dec.delta);
  c.rhs = 0.0;
  c.instance = dim_tag(d) + " delta=" + format_double(dec.delta) +
               " bound=" + format_double(bound) +
               " lipschitz=" + format_double(max_grad) +
               " radius=" + format_double(radius) + " n=" + std::to_string(n);
  finish(c);
  return c;
}

std::vector<BoundCheck> run_theorem_suite(std::size_t instances_per_family,
                                          std::uint64_t seed) {
  static const std::size_t dims[] = {1, 2, 4, 8};
  std::vector<BoundCheck> out;
  out.reserve(instances_per_family * 5);
  for (std::size_t i = 0; i < instances_per_family; ++i) {
    {
      Rng rng = Rng::for_sample(seed, "suite.entropy_bound", i);
      std::size_t d = dims[rng.uniform_index(4)];
      GaussianSpec p = random_diag(rng, d, false);
      GaussianSpec q = random_diag(rng, d, false);
      GaussianSpec m = random_diag(rng, d, false);
      double sigma = std::sqrt(log_uniform(rng, 1e-2, 1e2));
      out.push_back(check_entropy_lower_bound(p, q, m, sigma));
    }
    {
      Rng rng = Rng::for_sample(seed, "suite.scaled_noise", i);
      std::size_t d = dims[rng.uniform_index(4)];
      GaussianSpec p = random_diag(rng, d, false);
      GaussianSpec q = random_diag(rng, d, false);
      GaussianSpec m = random_diag(rng, d, false);
      double sigma_p = std::sqrt(log_uniform(rng, 1e-2, 1e2));
      double sigma_q = std::sqrt(log_uniform(rng, 1e-2, 1e2));
      out.push_back(check_scaled_noise_lower_bound(p, q, m, sigma_p, sigma_q));
    }
    {
      Rng rng = Rng::for_sample(seed, "suite.delta_condition", i);
      std::size_t d = dims[rng.uniform_index(4)];
      double var_x = log_uniform(rng, 1e-2, 1e2);
      double var_p = log_uniform(rng, 1e-2, 1e2);
      std::vector<double> var_y(d);
      double var_q;
      if (i % 2 == 0) {
        for (double& v : var_y) v = log_uniform(rng, 1e-2, 1e2);
        double thr = delta_e_threshold(var_x, var_y);
        var_q = var_p * thr * rng.uniform(1.05, 8.0);
      } else {
        // Isotropic Y probes the necessary direction below the threshold.
        double vy = log_uniform(rng, 1e-2, 1e2);
        var_y.assign(d, vy);
        double thr = delta_e_threshold(var_x, var_y);
        var_q = var_p * thr * rng.uniform(0.05, 0.95);
      }
      out.push_back(check_delta_e_condition(var_x, var_y, var_p, var_q));
    }
    {
      Rng rng = Rng::for_sample(seed, "suite.monotonicity", i);
      std::size_t d = dims[rng.uniform_index(4)];
      DeltaEInstance inst;
      inst.var_x = log_uniform(rng, 1e-2, 1e2);
      inst.var_y.resize(d);
      for (double& v : inst.var_y) v = log_uniform(rng, 1e-2, 1e2);
      inst.var_p = log_uniform(rng, 1e-2, 1e2);
      inst.var_q = log_uniform(rng, 1e-2, 1e2);
      out.push_back(check_delta_e_monotonicity(inst));
    }
    {
      Rng rng = Rng::for_sample(seed, "suite.semiconvex", i);
      std::size_t d = dims[rng.uniform_index(4)];
      GaussianSpec p = random_diag(rng, d, false);
      GaussianSpec q = random_diag(rng, d, false);
      double s = std::sqrt(log_uniform(rng, 1e-2, 1e2));
      double var_p = log_uniform(rng, 1e-2, 1e2);
      double var_q = log_uniform(rng, 1e-2, 1e2);
      out.push_back(check_semiconvex_interval(p, q, s, var_p, var_q));
    }
  }
  return out;
}

void save_bound_checks_csv(const std::filesystem::path& path,
                           const std::vector<BoundCheck>& checks) {
  for (const BoundCheck& c : checks) {
    require(c.name.find(',') == std::string::npos &&
                c.instance.find(',') == std::string::npos,
            "save_bound_checks_csv: fields must not contain commas");
  }
  AtomicFileWriter writer(path);
  auto& out = writer.stream();
  out << "name,lhs,rhs,rhs_hi,holds,slack,method,tolerance,instance\n";
  for (const BoundCheck& c : checks) {
    out << c.name << ',' << format_double(c.lhs) << ',' << format_double(c.rhs)
        << ',' << (std::isnan(c.rhs_hi) ? std::string() : format_double(c.rhs_hi))
        << ',' << (c.holds ? "true" : "false") << ',' << format_double(c.slack)
        << ',' << method_name(c.method) << ',' << format_double(c.tolerance)
        << ',' << c.instance << '\n';
  }
  writer.commit();
}

}  // namespace spem
