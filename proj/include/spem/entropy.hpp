#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "spem/matrix.hpp"
#include "spem/rng.hpp"

namespace spem {

// Diagonal-covariance Gaussian, the analytic workhorse for the bound checks.
// All entropies are in nats.
struct GaussianSpec {
  std::vector<double> mean;
  std::vector<double> var;  // per-coordinate variances, strictly positive

  static GaussianSpec isotropic(std::size_t d, double variance,
                                double mean_value = 0.0);
  static GaussianSpec diagonal(std::vector<double> mean, std::vector<double> var);

  std::size_t dim() const { return mean.size(); }

  // Distribution of X + N(0, noise_var * I).
  GaussianSpec convolved(double noise_var) const;
};

// H(N(mu, diag(var))) = 1/2 sum_i log(2 pi e var_i).
double gaussian_entropy(const GaussianSpec& g);

// Entropy power N(X) = exp(2 H / d) / (2 pi e).
double entropy_power(double entropy_nats, std::size_t d);

// KL(p || q) for diagonal Gaussians, closed form.
double kl_gaussians(const GaussianSpec& p, const GaussianSpec& q);

double gaussian_logpdf(const GaussianSpec& g, const double* x);

// E_{x~p}[log q(x)], closed form: -H(p) - KL(p||q).
double expected_gaussian_loglik(const GaussianSpec& p, const GaussianSpec& q);

// One draw appended per call; row-major samples.
Matrix sample_gaussian(const GaussianSpec& g, std::size_t n, Rng& rng);

// Kozachenko-Leonenko estimator with the k-th neighbor generalization:
//   H ~= psi(n) - psi(k) + log V_d + (d/n) sum_i log eps_i
// where eps_i is the Euclidean distance from sample i to its k-th nearest
// neighbor (self excluded) and V_d the unit-ball volume. Duplicate points
// produce eps = 0; those are floored at 1e-12 with a warning on stderr.
double knn_entropy(const Matrix& samples, int k = 5);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

// Sample mean of log_density over n draws from sampler, with its standard
// error. n = 1 yields an infinite standard error.
McEstimate mc_expected_loglik(
    const std::function<std::vector<double>(Rng&)>& sampler,
    const std::function<double(const std::vector<double>&)>& log_density,
    std::size_t n, std::uint64_t seed);

// W2 distance between N(0, s1^2 I_d) and N(0, s2^2 I_d): sqrt(d) |s1 - s2|.
double w2_isotropic(double sigma1, double sigma2, std::size_t d);

// W2 for diagonal Gaussians:
// sqrt(|mu_p - mu_q|^2 + sum_i (sqrt(var_p_i) - sqrt(var_q_i))^2).
double w2_diagonal(const GaussianSpec& p, const GaussianSpec& q);

double digamma(double x);
double log_unit_ball_volume(std::size_t d);

}  // namespace spem
