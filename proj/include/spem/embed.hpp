#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include "spem/matrix.hpp"

namespace spem {

enum class EmbedderKind { identity, random_projection, pca };

// Fixed feature extractor g: R^d -> R^d'. All kinds are linear (up to the
// PCA centering), deterministic given their parameters.
struct Embedder {
  EmbedderKind kind = EmbedderKind::identity;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Matrix projection;         // random_projection: out_dim x in_dim, N(0, 1/d')
  std::vector<double> mean;  // pca centering
  Matrix components;         // pca: out_dim x in_dim, orthonormal rows
};

// identity requires out_dim == in_dim; pca requires out_dim <= in_dim and
// nonempty data. PCA components come from a Jacobi eigen-decomposition of the
// sample covariance, sorted by descending eigenvalue with a deterministic
// sign convention (largest-magnitude entry positive).
Embedder fit_embedder(const Matrix& id_data, EmbedderKind kind,
                      std::size_t out_dim, std::uint64_t seed = 0);

std::vector<double> embed(const Embedder& e, const double* x);
std::vector<double> embed(const Embedder& e, const std::vector<double>& x);

// Maps an embedding back to input space. Exact inverse on the fitted
// subspace for pca, identity for identity; unsupported for random_projection.
std::vector<double> reconstruct(const Embedder& e, const std::vector<double>& y);

// Stable 64-bit hash of kind, dims, and parameters; stored in bank files so
// a bank is never silently queried through a different extractor.
std::uint64_t embedder_fingerprint(const Embedder& e);

struct ReActConfig {
  double p = 0.9;
  std::size_t sample_count = 1000;
  double beta = std::numeric_limits<double>::quiet_NaN();  // set by calibration
};

// Nearest-rank p-quantile of the pooled scalar activations of sample_count
// embeddings drawn from id_data (all rows when the data is smaller).
double calibrate_react(const Embedder& e, const Matrix& id_data, double p,
                       std::size_t sample_count, std::uint64_t seed);

std::vector<double> rectify(std::vector<double> v, double beta);

struct MemoryBank {
  std::size_t dim = 0;
  double beta = 0.0;
  std::uint64_t fingerprint = 0;
  Matrix rows;                // rectified embeddings, zero-norm rows dropped
  std::vector<double> norms;  // cached row norms
};

// Embeds and rectifies every row of id_data. Zero-norm embeddings are
// dropped with a warning on stderr; an all-zero bank is an error.
// react.beta must be calibrated (finite) beforehand.
MemoryBank build_memory_bank(const Matrix& id_data, const Embedder& e,
                             const ReActConfig& react);

// Exact maximum over all rows; lambda in [-1, 1]. A zero-norm test
// embedding carries no evidence of ID membership and defines lambda = 0.
double max_cosine_similarity(const MemoryBank& bank,
                             const std::vector<double>& h_test);

void save_bank(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_bank(const std::filesystem::path& path);
// Also verifies the stored fingerprint against the supplied embedder.
MemoryBank load_bank(const std::filesystem::path& path, const Embedder& e);

// Symmetric eigen-decomposition by cyclic Jacobi rotations. Eigenvalues
// descending; eigenvectors returned as rows. Exposed for the PCA tests.
void jacobi_eigen(Matrix symmetric, std::vector<double>& eigenvalues,
                  Matrix& eigenvectors_rows);

}  // namespace spem
