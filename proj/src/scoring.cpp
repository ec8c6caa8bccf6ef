#include "spem/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {

namespace {

// Applies the similarity-scaled rule given a clamped lambda. sigma == 0 must
// not consume any randomness so the degenerate cases stay bitwise equal to
// the plain likelihood score.
SpemResult perturbed_score(const FlowModel& model, const std::vector<double>& x,
                           double lambda, double alpha, std::uint64_t seed,
                           std::uint64_t sample_index) {
  SpemResult r;
  r.lambda = lambda;
  r.sigma = perturbation_sigma(lambda, alpha);
  if (r.sigma == 0.0) {
    r.score = -log_likelihood(model, x);
    return r;
  }
  Rng rng = Rng::for_sample(seed, "spem.perturb", sample_index);
  std::vector<double> shifted(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    shifted[j] = x[j] + r.sigma * rng.normal();
  r.score = -log_likelihood(model, shifted);
  return r;
}

double bank_lambda(const MemoryBank& bank, const Embedder& e,
                   const std::vector<double>& x) {
  require(x.size() == e.in_dim, "scoring: input dim mismatch");
  return max_cosine_similarity(bank, embed(e, x));
}

}  // namespace

double perturbation_sigma(double lambda, double alpha) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("perturbation_sigma: lambda must lie in [0,1]");
  if (!(alpha >= 0.0))
    throw std::invalid_argument("perturbation_sigma: alpha must be nonnegative");
  return (1.0 - lambda) * alpha;
}

double clamp_lambda(double raw) { return std::clamp(raw, 0.0, 1.0); }

SpemResult spem_score(const FlowModel& model, const MemoryBank& bank,
                      const Embedder& e, const SpemConfig& cfg,
                      const std::vector<double>& x, std::uint64_t seed,
                      std::uint64_t sample_index) {
  double lambda = clamp_lambda(bank_lambda(bank, e, x));
  return perturbed_score(model, x, lambda, cfg.alpha, seed, sample_index);
}

SpemResult spem_noise_score(const FlowModel& model, const MemoryBank& bank,
                            const Embedder& e, const SpemConfig& cfg,
                            const std::vector<double>& x, std::uint64_t seed,
                            std::uint64_t sample_index) {
  SpemResult r;
  r.lambda = clamp_lambda(bank_lambda(bank, e, x));
  r.sigma = perturbation_sigma(r.lambda, cfg.alpha_noise);
  std::vector<double> z(model.dim, 0.0);
  if (r.sigma > 0.0) {
    Rng rng = Rng::for_sample(seed, "spem.noise", sample_index);
    for (auto& v : z) v = r.sigma * rng.normal();
  }
  r.score = -log_likelihood(model, z);
  return r;
}

SpemResult similarity_score(const MemoryBank& bank, const Embedder& e,
                            const std::vector<double>& x) {
  SpemResult r;
  double raw = bank_lambda(bank, e, x);
  r.lambda = raw;
  r.sigma = 0.0;
  r.score = -raw;
  return r;
}

SpemResult controlled_lambda_spem_score(const FlowModel& model,
                                        const SpemConfig& cfg,
                                        const std::vector<double>& x,
                                        double lambda_external,
                                        std::uint64_t seed,
                                        std::uint64_t sample_index) {
  double lambda = clamp_lambda(lambda_external);
  return perturbed_score(model, x, lambda, cfg.alpha, seed, sample_index);
}

void save_scores_csv(const std::filesystem::path& path,
                     const std::vector<ScoreRow>& rows) {
  AtomicFileWriter writer(path);
  auto& os = writer.stream();
  os << "sample_id,detector,score,lambda,sigma\n";
  for (const auto& row : rows)
    os << row.sample_id << ',' << row.detector << ',' << format_double(row.score)
       << ',' << format_double(row.lambda) << ',' << format_double(row.sigma)
       << '\n';
  writer.commit();
}

}  // namespace spem
