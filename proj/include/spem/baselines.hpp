#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spem/flow.hpp"
#include "spem/matrix.hpp"

namespace spem {

// All baseline scores share the "higher = more anomalous" orientation.

double likelihood_score(const FlowModel& model, const double* x);

// Bit length of the deterministic lossless compression of an 8-bit
// quantized sample. Empty input is an error.
std::size_t compress_length_bits(const std::vector<std::uint8_t>& bytes);

// Identifies the exact compressor (library, version, level) used for
// compress_length_bits, recorded in outputs for reproducibility.
std::string codec_id();

// S(x) = -log2 p(x) - L(x): likelihood converted to bits so both terms share
// a unit, minus the compressed bit length.
double complexity_score(const FlowModel& model, const double* x,
                        const std::vector<std::uint8_t>& x_quantized);

// Thin-shell typicality in latent space, |sqrt(d) - ||z||^2|, implemented
// exactly as stated. The dimensionally consistent |d - ||z||^2| form is
// available behind the explicit flag.
double typicality_latent_score(const FlowModel& model, const double* x,
                               bool use_d_variant = false);

// |E_P[log p] - log p(x)| with the expectation cached from the training set.
double mean_train_loglik(const FlowModel& model, const Matrix& id_train);
double typicality_entropy_score(const FlowModel& model, double cached_mean_loglik,
                                const double* x);

struct BackgroundConfig {
  double mu = 0.2;        // per-coordinate replacement probability
  double range_lo = 0.0;  // replacement range; equal bounds = derive from data
  double range_hi = 0.0;
  std::size_t n_layers = 2;  // architecture of the background flow
  std::size_t hidden = 32;
  TrainConfig train;
};

// Replaces each coordinate with probability mu by a uniform draw over the
// range. Per-sample streams keyed on bg.train.seed, so the corruption mask
// is deterministic and independent of batch order.
Matrix corrupt_data(const Matrix& id_data, const BackgroundConfig& bg);

// Trains a fresh flow of the configured architecture on the corrupted data.
FlowModel train_background_model(const Matrix& id_data, const BackgroundConfig& bg);

// S(x) = -(log p(x) - log p_b(x)).
double likelihood_ratio_score(const FlowModel& model, const FlowModel& bg_model,
                              const double* x);

struct GmmComponent {
  double weight = 0.0;
  std::vector<double> mean;
  Matrix cov;  // full covariance, symmetric positive-definite
};

struct GmmModel {
  std::size_t dim = 0;
  std::vector<GmmComponent> components;
};

struct GmmFit {
  GmmModel model;
  std::vector<double> trace;  // EM mean log-likelihood per iteration
};

// EM with k-means++-style seeding; 100 iterations or 1e-6 tolerance on the
// trace. Needs at least 10*k points. Singular covariances get a 1e-6 ridge
// with a warning on stderr.
GmmFit fit_gmm(const Matrix& points, std::size_t k, std::uint64_t seed);

double gmm_logpdf(const GmmModel& gmm, const double* x);
double gmm_score(const GmmModel& gmm, const double* x);  // negated log density

// Versioned plain-text serialization, lossless for 64-bit floats.
void save_gmm(const GmmModel& gmm, const std::filesystem::path& path);
GmmModel load_gmm(const std::filesystem::path& path);

}  // namespace spem
