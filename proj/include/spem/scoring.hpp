#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spem/embed.hpp"
#include "spem/flow.hpp"

namespace spem {

// All detectors share one orientation: higher score = more anomalous.
struct SpemConfig {
  double alpha = 0.4;        // similarity-scaled perturbation strength
  double alpha_noise = 0.1;  // noise-only variant strength
};

struct SpemResult {
  double score = 0.0;
  double lambda = 0.0;  // similarity after clamping to [0,1]
  double sigma = 0.0;   // perturbation std actually applied
};

// sigma = (1 - lambda) * alpha. lambda must already be clamped to [0,1].
double perturbation_sigma(double lambda, double alpha);

// Raw cosine similarity can be negative; the perturbation rule treats any
// non-positive similarity as "no ID evidence" and uses the full strength.
double clamp_lambda(double raw);

// Score of -log p(x + z), z ~ N(0, sigma^2 I) with sigma = (1 - lambda(x)) alpha.
// When sigma == 0 no noise is drawn at all, so alpha = 0 or lambda = 1
// reproduces the raw likelihood score bit for bit. The draw is a pure
// function of (seed, sample_index), never of batch order.
SpemResult spem_score(const FlowModel& model, const MemoryBank& bank,
                      const Embedder& e, const SpemConfig& cfg,
                      const std::vector<double>& x, std::uint64_t seed,
                      std::uint64_t sample_index);

// Noise-only variant: the test point is used only to compute lambda, then
// discarded; the model scores z ~ N(0, ((1 - lambda) alpha_noise)^2 I).
// lambda = 1 evaluates the zero vector.
SpemResult spem_noise_score(const FlowModel& model, const MemoryBank& bank,
                            const Embedder& e, const SpemConfig& cfg,
                            const std::vector<double>& x, std::uint64_t seed,
                            std::uint64_t sample_index);

// Similarity-only detector: score = -lambda (raw, unclamped).
SpemResult similarity_score(const MemoryBank& bank, const Embedder& e,
                            const std::vector<double>& x);

// Same rule as spem_score with lambda supplied externally (clipped to [0,1])
// instead of computed from a bank.
SpemResult controlled_lambda_spem_score(const FlowModel& model,
                                        const SpemConfig& cfg,
                                        const std::vector<double>& x,
                                        double lambda_external,
                                        std::uint64_t seed,
                                        std::uint64_t sample_index);

struct ScoreRow {
  std::string sample_id;
  std::string detector;
  double score = 0.0;
  double lambda = 0.0;
  double sigma = 0.0;
};

// Columns: sample_id, detector, score, lambda, sigma. Doubles in shortest
// round-trip form; written atomically.
void save_scores_csv(const std::filesystem::path& path,
                     const std::vector<ScoreRow>& rows);

}  // namespace spem
