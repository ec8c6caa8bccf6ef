#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spem/matrix.hpp"
#include "spem/rng.hpp"

namespace spem {

enum class DatasetKind { gaussian, gaussian_mixture, inversion_pair };

struct ComponentSpec {
  std::vector<double> mean;
  std::vector<double> var;  // diagonal covariance
  double weight = 1.0;
};

// Synthetic data generator spec. For inversion_pair the ID side is a mixture
// of broad components whose means sit on a ring in the leading coordinate
// plane(s) plus, when core_weight > 0, one much sharper component at the
// origin that carries a minority of the ID mass. The OOD side is an even
// narrower Gaussian sitting on that sharp core. A density model fit to the ID
// data then rates the OOD samples as more likely than typical ID samples --
// the low-entropy OOD hugs the sharpest peak the model has learned -- while
// small input perturbations destroy exactly that advantage, because the peak
// falls off much faster than the broad components do.
//
// For dim >= 4 the ring lives in span{(e0-e1)/sqrt2, (e2-e3)/sqrt2} and the
// default OOD mean points along (1,...,1)/sqrt(d), which is orthogonal to
// every component mean; embeddings of ID and OOD samples then differ in
// direction, not just radius, which is what the similarity term keys on.
struct SyntheticDatasetSpec {
  DatasetKind kind = DatasetKind::gaussian;
  std::size_t dim = 2;
  std::vector<ComponentSpec> components;  // used by gaussian / gaussian_mixture

  // inversion_pair geometry. The defaults are the shipped benchmark values,
  // calibrated so that (at dim 16 and the default training budget) the fitted
  // flow ranks OOD above ID at zero noise yet flips decisively once inputs
  // are perturbed at the similarity-scaled operating point. Neighboring ring
  // components overlap (separation ~3 component sigmas), which keeps the
  // mixture inside the capacity of a small coupling flow.
  std::size_t ring_components = 16;
  double ring_radius = 0.24;
  double sigma_plane = 0.03;   // component std in the ring plane coordinates
  double sigma_perp = 0.03;    // component std in the remaining coordinates
  double core_weight = 0.1;    // ID mass of the sharp centered component; 0 disables
  double core_sigma = 0.004;   // std of the sharp centered component
  std::vector<double> ood_mean;  // empty = default offset along the diagonal
  double ood_offset = 0.005;     // norm of the default OOD mean
  double ood_sigma = 0.002;      // OOD isotropic std
  bool ood_broad = false;        // true swaps in a high-entropy OOD (non-inversion)
  double ood_broad_sigma = 0.6;

  std::size_t n_train = 2048;
  std::size_t n_test = 512;
  std::uint64_t seed = 1;
};

struct GeneratedData {
  Matrix train;  // ID training samples
  Matrix test;   // ID held-out samples
  Matrix ood;    // OOD samples; empty unless kind == inversion_pair
};

// The ID mixture components implied by an inversion_pair spec; also the
// analytic density oracle for entropy computations.
std::vector<ComponentSpec> inversion_id_components(const SyntheticDatasetSpec& spec);
ComponentSpec inversion_ood_component(const SyntheticDatasetSpec& spec);

double mixture_logpdf(const std::vector<ComponentSpec>& components, const double* x);

// H = -E[log p] for the analytic mixture density, by Monte Carlo with the
// exact density. Standard error shrinks as 1/sqrt(n).
double mixture_entropy_mc(const std::vector<ComponentSpec>& components,
                          std::size_t n, std::uint64_t seed);

GeneratedData generate(const SyntheticDatasetSpec& spec);

struct DequantConfig {
  double bin_width = 1.0 / 256.0;
  std::uint64_t seed = 0;
};

// input + u, u iid U(0, bin_width), for inputs on the {0..255}/255 grid.
Matrix dequantize(const Matrix& x_quantized, const DequantConfig& cfg);

// clamp to [0,1], scale by 255, round half to even.
std::vector<std::uint8_t> quantize(const double* x, std::size_t d);
std::vector<std::uint8_t> quantize_row(const Matrix& m, std::size_t i);

struct CsvTable {
  std::vector<std::string> columns;
  Matrix values;
  std::vector<std::string> split;  // empty when no split column present
};

// Columns col_0..col_{d-1}, optional trailing split column. Doubles are
// written in shortest round-trip form, so load(save(x)) == x bitwise.
void save_csv(const std::filesystem::path& path, const Matrix& batch,
              const std::vector<std::string>& split = {});
void save_csv(const std::filesystem::path& path, const GeneratedData& data);
CsvTable load_csv(const std::filesystem::path& path);

// Regroups a split-labeled table into train/test/ood batches.
GeneratedData regroup(const CsvTable& table);

}  // namespace spem
