#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "spem/entropy.hpp"
#include "spem/scoring.hpp"

using namespace spem;

namespace {

// Identity embedder over R^2 with a huge clipping threshold and a single
// axis-aligned bank row, so lambda values are exact in floating point.
struct Fixture {
  Embedder e;
  MemoryBank bank;
  FlowModel model;

  Fixture() {
    Matrix id_row(1, 2);
    id_row.at(0, 0) = 2.0;
    e = fit_embedder(id_row, EmbedderKind::identity, 2);
    ReActConfig react;
    react.beta = 1e9;
    bank = build_memory_bank(id_row, e, react);
    model = make_flow(2, 2, 32, 0);  // exact standard normal density
  }
};

FlowModel wiggly_model(std::uint64_t seed) {
  FlowModel m = make_flow(2, 2, 32, seed);
  Rng rng(splitmix64(seed) + 2, 1);
  for (auto& layer : m.layers) {
    for (auto& v : layer.w2.data) v = rng.normal(0.0, 0.1);
    for (auto& v : layer.b2) v = rng.normal(0.0, 0.1);
  }
  return m;
}

}  // namespace

TEST_CASE("perturbation sigma follows the linear rule") {
  CHECK(perturbation_sigma(1.0, 0.4) == 0.0);
  CHECK(perturbation_sigma(0.0, 0.4) == 0.4);
  CHECK(perturbation_sigma(0.5, 0.4) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(perturbation_sigma(0.3, 0.4) >= perturbation_sigma(0.7, 0.4));
  CHECK_THROWS_AS(perturbation_sigma(-0.1, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(perturbation_sigma(1.1, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(perturbation_sigma(0.5, -0.1), std::invalid_argument);
}

TEST_CASE("lambda clamp") {
  CHECK(clamp_lambda(-0.7) == 0.0);
  CHECK(clamp_lambda(0.31) == 0.31);
  CHECK(clamp_lambda(1.3) == 1.0);
}

TEST_CASE("alpha = 0 reproduces the likelihood score bitwise") {
  Fixture f;
  FlowModel m = wiggly_model(3);
  SpemConfig cfg;
  cfg.alpha = 0.0;
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> x = {rng.normal(), rng.normal()};
    auto r = spem_score(m, f.bank, f.e, cfg, x, 99, static_cast<std::uint64_t>(t));
    CHECK(r.sigma == 0.0);
    CHECK(r.score == -log_likelihood(m, x));
  }
}

TEST_CASE("lambda = 1 reproduces the likelihood score bitwise") {
  Fixture f;
  SpemConfig cfg;  // alpha 0.4
  // Any positive multiple of the axis-aligned bank row gives cosine exactly 1.
  std::vector<double> x = {3.0, 0.0};
  auto r = spem_score(f.model, f.bank, f.e, cfg, x, 7, 0);
  CHECK(r.lambda == 1.0);
  CHECK(r.sigma == 0.0);
  CHECK(r.score == -log_likelihood(f.model, x));

  auto c = controlled_lambda_spem_score(f.model, cfg, x, 1.0, 7, 0);
  CHECK(c.score == -log_likelihood(f.model, x));
  auto over = controlled_lambda_spem_score(f.model, cfg, x, 2.5, 7, 0);
  CHECK(over.lambda == 1.0);
  CHECK(over.score == c.score);
}

TEST_CASE("perturbed scores are deterministic per sample and order independent") {
  Fixture f;
  SpemConfig cfg;
  std::vector<double> x = {0.0, 1.5};  // orthogonal to the bank row: lambda 0
  auto a = spem_score(f.model, f.bank, f.e, cfg, x, 11, 4);
  auto b = spem_score(f.model, f.bank, f.e, cfg, x, 11, 4);
  CHECK(a.lambda == 0.0);
  CHECK(a.sigma == doctest::Approx(0.4));
  CHECK(a.score == b.score);

  auto other_index = spem_score(f.model, f.bank, f.e, cfg, x, 11, 5);
  CHECK(other_index.score != a.score);
  auto other_seed = spem_score(f.model, f.bank, f.e, cfg, x, 12, 4);
  CHECK(other_seed.score != a.score);
  // the perturbation actually moved the point
  CHECK(a.score != -log_likelihood(f.model, x));
}

TEST_CASE("noise-only variant depends on x only through lambda") {
  Fixture f;
  SpemConfig cfg;
  std::vector<double> x = {1.0, 1.0};
  std::vector<double> scaled = {2.5, 2.5};  // same direction, same lambda
  auto a = spem_noise_score(f.model, f.bank, f.e, cfg, x, 3, 8);
  auto b = spem_noise_score(f.model, f.bank, f.e, cfg, scaled, 3, 8);
  CHECK(a.lambda == b.lambda);
  CHECK(a.score == b.score);

  auto reseeded = spem_noise_score(f.model, f.bank, f.e, cfg, x, 4, 8);
  CHECK(reseeded.score != a.score);  // stochastic by design

  // lambda = 1: evaluates the zero vector exactly
  std::vector<double> on_row = {5.0, 0.0};
  auto z = spem_noise_score(f.model, f.bank, f.e, cfg, on_row, 3, 8);
  std::vector<double> zero = {0.0, 0.0};
  CHECK(z.score == -log_likelihood(f.model, zero));
}

TEST_CASE("similarity-only score is the negated raw cosine") {
  Fixture f;
  auto in_bank = similarity_score(f.bank, f.e, {4.0, 0.0});
  CHECK(in_bank.score == -1.0);
  auto orthogonal = similarity_score(f.bank, f.e, {0.0, 2.0});
  CHECK(orthogonal.score == 0.0);
  auto opposite = similarity_score(f.bank, f.e, {-1.0, 0.0});
  CHECK(opposite.score == 1.0);  // raw lambda, not clamped

  // ordering matches -lambda ordering
  Rng rng(13);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> u = {rng.normal(), rng.normal()};
    std::vector<double> v = {rng.normal(), rng.normal()};
    double lu = max_cosine_similarity(f.bank, embed(f.e, u));
    double lv = max_cosine_similarity(f.bank, embed(f.e, v));
    CHECK((similarity_score(f.bank, f.e, u).score < similarity_score(f.bank, f.e, v).score) ==
          (lu > lv));
  }
}

TEST_CASE("monte carlo score means match the analytic gaussian expectations") {
  Fixture f;  // identity model: p_theta = N(0, I_2)
  SpemConfig cfg;
  GaussianSpec model_spec = GaussianSpec::isotropic(2, 1.0);

  const double var_x = 0.49;                      // ID side P
  GaussianSpec p = GaussianSpec::isotropic(2, var_x);
  GaussianSpec q = GaussianSpec::diagonal({0.3, -0.2}, {0.25, 0.25});  // OOD side Q

  const double lambda_p = 0.5, lambda_q = 0.25;
  const double sigma_p = perturbation_sigma(lambda_p, cfg.alpha);
  const double sigma_q = perturbation_sigma(lambda_q, cfg.alpha);

  const std::size_t n = 30000;
  Rng prng(101), qrng(102);
  Matrix xs = sample_gaussian(p, n, prng);
  Matrix ys = sample_gaussian(q, n, qrng);

  double mean_p = 0.0, mean_q = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_p += controlled_lambda_spem_score(f.model, cfg, xs.row_vec(i), lambda_p,
                                           7, i).score;
    mean_q += controlled_lambda_spem_score(f.model, cfg, ys.row_vec(i), lambda_q,
                                           7, n + i).score;
  }
  mean_p /= static_cast<double>(n);
  mean_q /= static_cast<double>(n);

  // score = -log p_theta(x + z), so its mean estimates -E_{P'}[log p_theta]
  double e_p = expected_gaussian_loglik(p.convolved(sigma_p * sigma_p), model_spec);
  double e_q = expected_gaussian_loglik(q.convolved(sigma_q * sigma_q), model_spec);
  CHECK(std::fabs(-mean_p - e_p) < 0.03);
  CHECK(std::fabs(-mean_q - e_q) < 0.03);

  // noise-only sides through the bank, constant-angle inputs pin lambda
  double lam_cos = 1.0 / std::sqrt(2.0);
  Rng arng(103);
  double mean_zp = 0.0, mean_zq = 0.0;
  double measured_lp = 0.0, measured_lq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double a = arng.uniform(0.5, 2.0);
    std::vector<double> xp = {a, a};  // cosine against e0 ray: 1/sqrt(2)
    auto rp = spem_noise_score(f.model, f.bank, f.e, cfg, xp, 9, i);
    mean_zp += rp.score;
    measured_lp = rp.lambda;
    std::vector<double> xq = {0.25 * a, 0.9682458365518543 * a};  // cosine 0.25
    auto rq = spem_noise_score(f.model, f.bank, f.e, cfg, xq, 9, n + i);
    mean_zq += rq.score;
    measured_lq = rq.lambda;
  }
  mean_zp /= static_cast<double>(n);
  mean_zq /= static_cast<double>(n);
  CHECK(measured_lp == doctest::Approx(lam_cos).epsilon(1e-12));
  CHECK(measured_lq == doctest::Approx(0.25).epsilon(1e-12));

  double sig_zp = perturbation_sigma(measured_lp, cfg.alpha_noise);
  double sig_zq = perturbation_sigma(measured_lq, cfg.alpha_noise);
  double e_zp = expected_gaussian_loglik(GaussianSpec::isotropic(2, sig_zp * sig_zp),
                                         model_spec);
  double e_zq = expected_gaussian_loglik(GaussianSpec::isotropic(2, sig_zq * sig_zq),
                                         model_spec);
  CHECK(std::fabs(-mean_zp - e_zp) < 0.03);
  CHECK(std::fabs(-mean_zq - e_zq) < 0.03);

  // the full gap-of-gaps statistic against its closed form
  double delta_mc = (-mean_zp - (-mean_zq)) - (-mean_p - (-mean_q));
  double delta_an = (e_zp - e_zq) - (e_p - e_q);
  CHECK(std::fabs(delta_mc - delta_an) < 0.06);
}

TEST_CASE("scores csv has the fixed schema and stable bytes") {
  std::vector<ScoreRow> rows = {
      {"test_0", "spem", 1.25, 0.5, 0.2},
      {"ood_1", "likelihood", -3.75, 0.0, 0.0},
  };
  auto path = std::filesystem::temp_directory_path() / "spem_test_scores.csv";
  save_scores_csv(path, rows);
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  CHECK(ss.str() ==
        "sample_id,detector,score,lambda,sigma\n"
        "test_0,spem,1.25,0.5,0.2\n"
        "ood_1,likelihood,-3.75,0,0\n");
  CHECK(!std::filesystem::exists(path.string() + ".tmp"));
  std::filesystem::remove(path);
}
