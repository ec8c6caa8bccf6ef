#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spem/baselines.hpp"
#include "spem/config.hpp"
#include "spem/embed.hpp"
#include "spem/flow.hpp"
#include "spem/matrix.hpp"
#include "spem/scoring.hpp"

namespace spem {

// Detection scores oriented so that higher = more anomalous; the OOD side is
// the positive class. Both sides must be nonempty and finite.
struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
};

// P(ood > id) + 1/2 P(ood = id) over all cross pairs (Mann-Whitney, ties get
// half credit). Implemented with mid-ranks in O(n log n); mid-ranks and their
// sums are exact dyadic rationals, so the result matches exhaustive pair
// counting bit for bit, ties included.
double auroc(const ScoreSet& s);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

// Threshold sweep from strictest to loosest: starts at (0,0), one point per
// distinct score value, ends at (1,1). Trapezoidal area under the returned
// polyline equals auroc(s) up to rounding (1e-12).
std::vector<RocPoint> roc_curve(const ScoreSet& s);
double trapezoid_area(const std::vector<RocPoint>& curve);

struct SweepResult {
  std::vector<double> grid;
  std::vector<double> auroc_values;  // one per grid point, grid order
  std::string detector;
  std::uint64_t seed = 0;
  bool plateau = false;  // set by alpha_sweep
};

// max - min over the last quarter of the sequence (at least one value).
bool last_quartile_plateau(const std::vector<double>& values, double tol = 0.02);

// Likelihood AUROC after adding N(0, sigma^2 I) noise to the OOD samples
// only; the ID side is scored untouched. sigma = 0 draws nothing and
// reproduces the plain likelihood AUROC bit for bit. Each (grid point,
// sample) pair has its own noise stream, so grid points are independent and
// the result ordering is fixed by the grid order.
SweepResult sigma_sweep(const FlowModel& model, const Matrix& id_test,
                        const Matrix& ood_test,
                        const std::vector<double>& sigma_grid, std::uint64_t seed);

// The fitted pieces a similarity-scaled perturbation detector needs.
struct SpemPipeline {
  const FlowModel* model = nullptr;
  const MemoryBank* bank = nullptr;
  const Embedder* embedder = nullptr;
};

// Similarity-scaled perturbation AUROC per alpha, both sides perturbed by
// their own similarity-scaled noise. alpha = 0 reproduces the plain
// likelihood AUROC bit for bit. plateau reports whether the last quarter of
// the AUROC sequence stays within 0.02.
SweepResult alpha_sweep(const SpemPipeline& p, const Matrix& id_test,
                        const Matrix& ood_test,
                        const std::vector<double>& alpha_grid, std::uint64_t seed);

struct ControlledLambdaRepeat {
  double lambda_only_auroc = 0.0;
  double spem_auroc = 0.0;
};

struct ControlledLambdaResult {
  std::vector<ControlledLambdaRepeat> repeats;
  double mean_lambda_only = 0.0;
  double mean_spem = 0.0;
};

// Similarities are injected rather than computed: each ID sample draws
// lambda ~ N(mu_id, sd^2) and each OOD sample lambda ~ N(mu_ood, sd^2), both
// clipped to [0,1]. The lambda-only detector scores -lambda; the
// perturbation detector applies the usual scaled-noise rule with the
// injected lambda. Repeats use disjoint draw streams; means are over repeats.
ControlledLambdaResult controlled_lambda_experiment(
    const FlowModel& model, const Matrix& id_test, const Matrix& ood_test,
    double alpha, std::size_t n_repeats, std::uint64_t seed,
    double mu_id = 0.65, double mu_ood = 0.60, double lambda_sd = 0.05);

// Everything the detector dispatch needs. Optional assets may stay null;
// asking for a detector whose asset is missing raises invalid_argument.
struct DetectorContext {
  const FlowModel* model = nullptr;
  const Embedder* embedder = nullptr;    // spem / spem_noise / similarity
  const MemoryBank* bank = nullptr;      // spem / spem_noise / similarity
  const FlowModel* background = nullptr; // likelihood_ratio
  const GmmModel* gmm = nullptr;         // gmm
  SpemConfig spem;
  double mean_loglik = 0.0;  // typicality_entropy reference point
  bool has_mean_loglik = false;
  double quant_lo = 0.0;  // affine map onto [0,1] before 8-bit quantization,
  double quant_hi = 1.0;  // used by the compression-corrected detector
  std::uint64_t seed = 0;
};

// Detector names: likelihood, spem, spem_noise, similarity, complexity,
// typicality, typicality_entropy, likelihood_ratio, gmm. sample_index drives
// the per-sample noise streams, so scoring is batch-order independent.
ScoreRow score_row(const DetectorContext& ctx, const std::string& detector,
                   const std::vector<double>& x, std::uint64_t sample_index,
                   const std::string& sample_id);
double score_sample(const DetectorContext& ctx, const std::string& detector,
                    const std::vector<double>& x, std::uint64_t sample_index);

// Scores both sides of a pair. Sample indices are id row i -> offset + i and
// ood row j -> offset + n_id + j; pass distinct offsets to keep repeated
// evaluations on disjoint noise streams.
ScoreSet score_pair(const DetectorContext& ctx, const std::string& detector,
                    const Matrix& id_test, const Matrix& ood_test,
                    std::uint64_t index_offset = 0);

struct BenchmarkRow {
  std::string pair;
  std::string detector;
  double auroc_value = 0.0;
  std::uint64_t seed = 0;
  std::string codec;
};

// Full synthetic benchmark: generates the configured dataset, trains the
// flow and every auxiliary asset the detector roster needs, then scores all
// configured ID/OOD pairs with all configured detectors. One row per
// (pair, detector), pairs outermost, roster order within a pair.
std::vector<BenchmarkRow> benchmark_run(const ExperimentConfig& cfg);

// CSV writers (atomic, shortest round-trip doubles).
// sweep.csv columns:     grid,auroc,detector,seed
// benchmark.csv columns: pair,detector,auroc,seed,codec_id
void save_sweep_csv(const std::filesystem::path& path,
                    const std::vector<SweepResult>& sweeps);
void save_benchmark_csv(const std::filesystem::path& path,
                        const std::vector<BenchmarkRow>& rows);

}  // namespace spem
