#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spem/data.hpp"
#include "spem/embed.hpp"
#include "spem/eval.hpp"
#include "spem/flow.hpp"
#include "spem/rng.hpp"
#include "spem/scoring.hpp"

using namespace spem;

namespace {

// Independent oracle: exhaustive O(n^2) pair counting with half credit for
// ties. The production implementation must agree bit for bit.
double pair_count_auroc(const std::vector<double>& id,
                        const std::vector<double>& ood) {
  double num = 0.0;
  for (double o : ood)
    for (double i : id) {
      if (o > i)
        num += 1.0;
      else if (o == i)
        num += 0.5;
    }
  return num / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

Matrix gauss_rows(std::size_t n, const std::vector<double>& mean, double sd,
                  std::uint64_t seed, const char* tag) {
  Matrix m(n, mean.size());
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::for_sample(seed, tag, i);
    for (std::size_t j = 0; j < mean.size(); ++j)
      m.at(i, j) = mean[j] + sd * rng.normal();
  }
  return m;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("spem_eval_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

struct BankFixture {
  Embedder embedder;
  MemoryBank bank;
  BankFixture(const Matrix& train, std::uint64_t seed) {
    embedder = fit_embedder(train, EmbedderKind::identity, train.cols, seed);
    ReActConfig react;
    react.beta = calibrate_react(embedder, train, react.p, react.sample_count, seed);
    bank = build_memory_bank(train, embedder, react);
  }
};

}  // namespace

TEST_CASE("auroc matches the worked examples") {
  CHECK(auroc({{0.0, 1.0}, {2.0, 3.0}}) == 1.0);
  CHECK(auroc({{1.0}, {1.0}}) == 0.5);
  CHECK(auroc({{0.0, 2.0}, {1.0, 3.0}}) == 0.75);
  CHECK(auroc({{2.0, 3.0}, {0.0, 1.0}}) == 0.0);
}

TEST_CASE("auroc equals exhaustive pair counting, ties included") {
  const std::pair<std::size_t, std::size_t> shapes[] = {
      {3, 5}, {10, 10}, {128, 77}, {1000, 1000}};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (auto [n_i, n_o] : shapes) {
      ScoreSet tied;
      ScoreSet cont;
      Rng rng(seed, 42);
      for (std::size_t i = 0; i < n_i; ++i) {
        tied.id_scores.push_back(static_cast<double>(rng.uniform_index(8)) / 4.0);
        cont.id_scores.push_back(rng.normal());
      }
      for (std::size_t j = 0; j < n_o; ++j) {
        tied.ood_scores.push_back(static_cast<double>(rng.uniform_index(8)) / 4.0);
        cont.ood_scores.push_back(rng.normal(0.5, 1.0));
      }
      INFO("seed ", seed, " n_i ", n_i, " n_o ", n_o);
      double a_tied = auroc(tied);
      double a_cont = auroc(cont);
      CHECK(a_tied == pair_count_auroc(tied.id_scores, tied.ood_scores));
      CHECK(a_cont == pair_count_auroc(cont.id_scores, cont.ood_scores));
      CHECK(a_tied >= 0.0);
      CHECK(a_tied <= 1.0);
      CHECK(a_cont >= 0.0);
      CHECK(a_cont <= 1.0);
    }
  }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  ScoreSet s;
  Rng rng(7, 0);
  for (int i = 0; i < 100; ++i)
    s.id_scores.push_back(static_cast<double>(rng.uniform_index(6)));
  for (int i = 0; i < 80; ++i)
    s.ood_scores.push_back(static_cast<double>(rng.uniform_index(6)) + 1.0);
  const double base = auroc(s);

  ScoreSet mapped = s;
  for (double& v : mapped.id_scores) v = std::exp(0.5 * v) + 3.0;
  for (double& v : mapped.ood_scores) v = std::exp(0.5 * v) + 3.0;
  CHECK(auroc(mapped) == base);  // rank data identical, so bitwise equal

  ScoreSet negated = s;
  for (double& v : negated.id_scores) v = -v;
  for (double& v : negated.ood_scores) v = -v;
  CHECK(auroc(negated) == doctest::Approx(1.0 - base).epsilon(1e-12));
}

TEST_CASE("auroc rejects empty and non-finite input") {
  CHECK_THROWS_AS(auroc({{}, {1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(auroc({{1.0}, {}}), std::invalid_argument);
  CHECK_THROWS_AS(auroc({{std::nan("")}, {1.0}}), std::invalid_argument);
  CHECK_THROWS_AS(auroc({{0.0}, {std::numeric_limits<double>::infinity()}}),
                  std::invalid_argument);
}

TEST_CASE("roc curve area reproduces auroc") {
  SUBCASE("random sets with and without ties") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      ScoreSet s;
      Rng rng(seed, 9);
      for (int i = 0; i < 157; ++i)
        s.id_scores.push_back(static_cast<double>(rng.uniform_index(12)) / 8.0);
      for (int j = 0; j < 211; ++j)
        s.ood_scores.push_back(static_cast<double>(rng.uniform_index(12)) / 8.0 +
                               0.125);
      auto curve = roc_curve(s);
      CHECK(curve.front().fpr == 0.0);
      CHECK(curve.front().tpr == 0.0);
      CHECK(curve.back().fpr == 1.0);
      CHECK(curve.back().tpr == 1.0);
      for (std::size_t i = 1; i < curve.size(); ++i) {
        CHECK(curve[i].fpr >= curve[i - 1].fpr);
        CHECK(curve[i].tpr >= curve[i - 1].tpr);
      }
      CHECK(std::fabs(trapezoid_area(curve) - auroc(s)) < 1e-12);
    }
  }
  SUBCASE("perfect separation passes through (0,1)") {
    ScoreSet s{{0.0, 0.5, 1.0}, {2.0, 3.0, 4.0}};
    auto curve = roc_curve(s);
    bool hits_corner = false;
    for (const auto& p : curve)
      if (p.fpr == 0.0 && p.tpr == 1.0) hits_corner = true;
    CHECK(hits_corner);
    CHECK(trapezoid_area(curve) == 1.0);
  }
  SUBCASE("single-point sets give a 3-point curve") {
    auto curve = roc_curve({{0.0}, {1.0}});
    REQUIRE(curve.size() == 3);
    CHECK(curve[0].fpr == 0.0);
    CHECK(curve[0].tpr == 0.0);
    CHECK(curve[1].fpr == 0.0);
    CHECK(curve[1].tpr == 1.0);
    CHECK(curve[2].fpr == 1.0);
    CHECK(curve[2].tpr == 1.0);
  }
  SUBCASE("identical distributions give area near one half") {
    ScoreSet s;
    Rng rng(11, 0);
    for (int i = 0; i < 3000; ++i) s.id_scores.push_back(rng.normal());
    for (int j = 0; j < 3000; ++j) s.ood_scores.push_back(rng.normal());
    CHECK(std::fabs(trapezoid_area(roc_curve(s)) - 0.5) < 0.03);
  }
}

TEST_CASE("last-quartile plateau rule") {
  CHECK(last_quartile_plateau({0.5, 0.6, 0.9, 0.905, 0.91, 0.915, 0.92, 0.93}));
  CHECK_FALSE(
      last_quartile_plateau({0.5, 0.6, 0.9, 0.905, 0.91, 0.915, 0.90, 0.93}));
  CHECK(last_quartile_plateau({0.7}));  // single value has zero range
  CHECK_FALSE(last_quartile_plateau({}));
}

TEST_CASE("sigma sweep: zero sigma is bitwise the likelihood auroc") {
  FlowModel model = make_flow(2, 2, 8, 5);
  Matrix id_test = gauss_rows(40, {0.0, 0.0}, 1.0, 3, "ev.id");
  Matrix ood_test = gauss_rows(30, {0.0, 0.0}, 0.05, 3, "ev.ood");

  ScoreSet direct;
  for (std::size_t i = 0; i < id_test.rows; ++i)
    direct.id_scores.push_back(likelihood_score(model, id_test.row(i)));
  for (std::size_t j = 0; j < ood_test.rows; ++j)
    direct.ood_scores.push_back(likelihood_score(model, ood_test.row(j)));

  SweepResult res = sigma_sweep(model, id_test, ood_test, {0.0, 0.1}, 77);
  REQUIRE(res.auroc_values.size() == 2);
  CHECK(res.auroc_values[0] == auroc(direct));
  CHECK(res.grid == std::vector<double>{0.0, 0.1});
  CHECK(res.detector == "perturbed_likelihood");
  CHECK(res.seed == 77);
}

TEST_CASE("sigma sweep: perturbing a low-entropy cluster restores detection") {
  FlowModel model = make_flow(2, 1, 8, 0);  // exact standard normal
  Matrix id_test = gauss_rows(600, {0.0, 0.0}, 1.0, 21, "ev.sw.id");
  Matrix ood_test = gauss_rows(600, {0.0, 0.0}, 0.01, 21, "ev.sw.ood");
  const std::vector<double> grid = {0.0, 0.5, 1.0, 2.0, 4.0};

  SweepResult res = sigma_sweep(model, id_test, ood_test, grid, 5);
  REQUIRE(res.auroc_values.size() == grid.size());
  CHECK(res.auroc_values.front() < 0.5);  // the inversion: OOD looks likelier
  for (std::size_t g = 1; g < grid.size(); ++g)
    CHECK(res.auroc_values[g] >= res.auroc_values[g - 1] - 0.02);
  CHECK(res.auroc_values.back() >= 0.9);

  SweepResult again = sigma_sweep(model, id_test, ood_test, grid, 5);
  CHECK(again.auroc_values == res.auroc_values);

  SweepResult other = sigma_sweep(model, id_test, ood_test, grid, 6);
  CHECK(other.auroc_values[0] == res.auroc_values[0]);  // no noise at zero
  bool any_differs = false;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (other.auroc_values[g] != res.auroc_values[g]) any_differs = true;
  CHECK(any_differs);

  CHECK_THROWS_AS(sigma_sweep(model, id_test, ood_test, {}, 5),
                  std::invalid_argument);
  CHECK_THROWS_AS(sigma_sweep(model, id_test, ood_test, {-0.1}, 5),
                  std::invalid_argument);
}

TEST_CASE("alpha sweep: zero alpha is bitwise the likelihood auroc") {
  Matrix train = gauss_rows(128, {1.0, 1.0}, 0.1, 1, "ev.a.train");
  Matrix id_test = gauss_rows(48, {1.0, 1.0}, 0.1, 2, "ev.a.id");
  Matrix ood_test = gauss_rows(48, {-1.0, -1.0}, 0.1, 2, "ev.a.ood");
  FlowModel model = make_flow(2, 1, 8, 0);
  BankFixture fx(train, 9);
  SpemPipeline pipe{&model, &fx.bank, &fx.embedder};

  ScoreSet direct;
  for (std::size_t i = 0; i < id_test.rows; ++i)
    direct.id_scores.push_back(likelihood_score(model, id_test.row(i)));
  for (std::size_t j = 0; j < ood_test.rows; ++j)
    direct.ood_scores.push_back(likelihood_score(model, ood_test.row(j)));

  SweepResult res = alpha_sweep(pipe, id_test, ood_test, {0.0, 0.4}, 13);
  REQUIRE(res.auroc_values.size() == 2);
  CHECK(res.auroc_values[0] == auroc(direct));
  CHECK(res.detector == "spem");

  SweepResult again = alpha_sweep(pipe, id_test, ood_test, {0.0, 0.4}, 13);
  CHECK(again.auroc_values == res.auroc_values);

  SweepResult single = alpha_sweep(pipe, id_test, ood_test, {0.25}, 13);
  CHECK(single.auroc_values.size() == 1);
  CHECK(single.plateau);  // one point has zero range

  CHECK_THROWS_AS(alpha_sweep(pipe, id_test, ood_test, {}, 13),
                  std::invalid_argument);
  CHECK_THROWS_AS(alpha_sweep(pipe, id_test, ood_test, {-0.2}, 13),
                  std::invalid_argument);
  SpemPipeline broken{&model, nullptr, &fx.embedder};
  CHECK_THROWS_AS(alpha_sweep(broken, id_test, ood_test, {0.1}, 13),
                  std::invalid_argument);
}

TEST_CASE("controlled lambda experiment") {
  FlowModel model = make_flow(2, 1, 8, 0);

  SUBCASE("lambda-only mean matches the overlap of the two normals") {
    // P(N(0.60,sd) < N(0.65,sd)) = Phi(0.05 / (sd*sqrt(2))) ~ 0.76025.
    Matrix id_test = gauss_rows(10000, {0.0, 0.0}, 1.0, 31, "ev.cl.id");
    Matrix ood_test = gauss_rows(10000, {0.0, 0.0}, 1.0, 31, "ev.cl.ood");
    ControlledLambdaResult res =
        controlled_lambda_experiment(model, id_test, ood_test, 0.1, 3, 17);
    REQUIRE(res.repeats.size() == 3);
    CHECK(std::fabs(res.mean_lambda_only - 0.7602499389065233) < 0.02);
    double sum_l = 0.0;
    double sum_s = 0.0;
    for (const auto& r : res.repeats) {
      sum_l += r.lambda_only_auroc;
      sum_s += r.spem_auroc;
    }
    CHECK(res.mean_lambda_only ==
          doctest::Approx(sum_l / 3.0).epsilon(1e-15));
    CHECK(res.mean_spem == doctest::Approx(sum_s / 3.0).epsilon(1e-15));

    ControlledLambdaResult again =
        controlled_lambda_experiment(model, id_test, ood_test, 0.1, 3, 17);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(again.repeats[r].lambda_only_auroc ==
            res.repeats[r].lambda_only_auroc);
      CHECK(again.repeats[r].spem_auroc == res.repeats[r].spem_auroc);
    }
  }

  SUBCASE("equal lambda distributions are uninformative") {
    Matrix id_test = gauss_rows(800, {0.0, 0.0}, 1.0, 32, "ev.cl2.id");
    Matrix ood_test = gauss_rows(800, {0.0, 0.0}, 1.0, 32, "ev.cl2.ood");
    ControlledLambdaResult res = controlled_lambda_experiment(
        model, id_test, ood_test, 0.1, 3, 19, 0.6, 0.6, 0.05);
    CHECK(std::fabs(res.mean_lambda_only - 0.5) < 0.04);
  }

  SUBCASE("likelihood evidence lifts the perturbation detector above lambda") {
    Matrix id_test = gauss_rows(600, {0.0, 0.0}, 1.0, 33, "ev.cl3.id");
    Matrix ood_test = gauss_rows(600, {3.0, 3.0}, 1.0, 33, "ev.cl3.ood");
    ControlledLambdaResult res =
        controlled_lambda_experiment(model, id_test, ood_test, 0.1, 3, 23);
    for (const auto& r : res.repeats)
      CHECK(r.spem_auroc > r.lambda_only_auroc);
    CHECK(res.mean_spem > res.mean_lambda_only);
  }

  SUBCASE("saturated similarities clip to one and disable the noise") {
    Matrix id_test = gauss_rows(300, {0.0, 0.0}, 1.0, 34, "ev.cl4.id");
    Matrix ood_test = gauss_rows(300, {2.0, 2.0}, 1.0, 34, "ev.cl4.ood");
    ControlledLambdaResult res = controlled_lambda_experiment(
        model, id_test, ood_test, 0.4, 2, 29, 5.0, 5.0, 1e-3);
    ScoreSet direct;
    for (std::size_t i = 0; i < id_test.rows; ++i)
      direct.id_scores.push_back(likelihood_score(model, id_test.row(i)));
    for (std::size_t j = 0; j < ood_test.rows; ++j)
      direct.ood_scores.push_back(likelihood_score(model, ood_test.row(j)));
    for (const auto& r : res.repeats) {
      CHECK(r.lambda_only_auroc == 0.5);  // every lambda clipped to exactly 1
      CHECK(r.spem_auroc == auroc(direct));
    }
  }

  SUBCASE("input validation") {
    Matrix ok = gauss_rows(8, {0.0, 0.0}, 1.0, 35, "ev.cl5");
    Matrix empty(0, 2);
    CHECK_THROWS_AS(controlled_lambda_experiment(model, ok, ok, 0.1, 0, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(controlled_lambda_experiment(model, empty, ok, 0.1, 3, 1),
                    std::invalid_argument);
    CHECK_THROWS_AS(controlled_lambda_experiment(model, ok, ok, -0.1, 3, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("detector dispatch covers the roster and validates its assets") {
  Matrix train = gauss_rows(160, {1.0, 1.0}, 0.2, 41, "ev.d.train");
  FlowModel model = make_flow(2, 2, 8, 0);
  BankFixture fx(train, 3);
  GmmFit gmm = fit_gmm(train, 2, 3);
  TrainConfig bg_train;
  bg_train.epochs = 3;
  bg_train.seed = 99;
  BackgroundConfig bg;
  bg.train = bg_train;
  FlowModel background = train_background_model(train, bg);

  DetectorContext ctx;
  ctx.model = &model;
  ctx.embedder = &fx.embedder;
  ctx.bank = &fx.bank;
  ctx.background = &background;
  ctx.gmm = &gmm.model;
  ctx.spem.alpha = 0.4;
  ctx.mean_loglik = mean_train_loglik(model, train);
  ctx.has_mean_loglik = true;
  ctx.quant_lo = -1.0;
  ctx.quant_hi = 3.0;
  ctx.seed = 7;

  const std::vector<double> x = {0.4, 1.7};
  for (const std::string& det :
       {std::string("likelihood"), std::string("spem"),
        std::string("spem_noise"), std::string("similarity"),
        std::string("complexity"), std::string("typicality"),
        std::string("typicality_entropy"), std::string("likelihood_ratio"),
        std::string("gmm")}) {
    INFO("detector ", det);
    ScoreRow row = score_row(ctx, det, x, 0, "s0");
    CHECK(std::isfinite(row.score));
    CHECK(row.detector == det);
  }
  ScoreRow spem_row = score_row(ctx, "spem", x, 0, "s0");
  CHECK(spem_row.sigma == (1.0 - spem_row.lambda) * ctx.spem.alpha);
  CHECK(score_row(ctx, "likelihood", x, 0, "s0").score ==
        likelihood_score(model, x.data()));

  DetectorContext bare;
  bare.model = &model;
  CHECK(std::isfinite(score_sample(bare, "likelihood", x, 0)));
  CHECK_THROWS_AS(score_sample(bare, "spem", x, 0), std::invalid_argument);
  CHECK_THROWS_AS(score_sample(bare, "similarity", x, 0), std::invalid_argument);
  CHECK_THROWS_AS(score_sample(bare, "typicality_entropy", x, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(score_sample(bare, "likelihood_ratio", x, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(score_sample(bare, "gmm", x, 0), std::invalid_argument);
  CHECK_THROWS_AS(score_sample(bare, "no_such_detector", x, 0),
                  std::invalid_argument);
  DetectorContext no_model;
  no_model.bank = &fx.bank;
  no_model.embedder = &fx.embedder;
  CHECK_THROWS_AS(score_sample(no_model, "likelihood", x, 0),
                  std::invalid_argument);
  CHECK(std::isfinite(score_sample(no_model, "similarity", x, 0)));
}

TEST_CASE("benchmark run: shape, determinism, and csv bytes") {
  ExperimentConfig cfg = default_config();
  cfg.seed = 5;
  cfg.data.dim = 4;
  cfg.data.n_train = 256;
  cfg.data.n_test = 64;
  cfg.flow_layers = 2;
  cfg.train.epochs = 3;
  cfg.detectors = {"likelihood", "similarity", "gmm"};
  propagate_seed(cfg);

  std::vector<BenchmarkRow> rows = benchmark_run(cfg);
  REQUIRE(rows.size() == 6);  // 2 pairs x 3 detectors
  for (std::size_t p = 0; p < 2; ++p) {
    CHECK(rows[3 * p + 0].detector == "likelihood");
    CHECK(rows[3 * p + 1].detector == "similarity");
    CHECK(rows[3 * p + 2].detector == "gmm");
  }
  for (const BenchmarkRow& r : rows) {
    CHECK((r.pair == "inversion" || r.pair == "broad"));
    CHECK(r.auroc_value >= 0.0);
    CHECK(r.auroc_value <= 1.0);
    CHECK(r.seed == 5);
    CHECK(r.codec == codec_id());
  }

  std::vector<BenchmarkRow> again = benchmark_run(cfg);
  REQUIRE(again.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    CHECK(again[i].auroc_value == rows[i].auroc_value);

  TempDir tmp;
  auto csv = tmp.path / "benchmark.csv";
  save_benchmark_csv(csv, rows);
  std::string bytes = read_file(csv);
  CHECK(bytes.rfind("pair,detector,auroc,seed,codec_id\n", 0) == 0);
  save_benchmark_csv(csv, again);
  CHECK(read_file(csv) == bytes);
  CHECK_FALSE(std::filesystem::exists(csv.string() + ".tmp"));

  ExperimentConfig bad = cfg;
  bad.pairs = {"no_such_pair"};
  CHECK_THROWS_AS(benchmark_run(bad), std::invalid_argument);
  ExperimentConfig bad2 = cfg;
  bad2.detectors = {"no_such_detector"};
  CHECK_THROWS_AS(benchmark_run(bad2), std::invalid_argument);
  ExperimentConfig bad3 = cfg;
  bad3.data.kind = DatasetKind::gaussian;
  CHECK_THROWS_AS(benchmark_run(bad3), std::invalid_argument);
}

TEST_CASE("sweep csv format") {
  TempDir tmp;
  auto csv = tmp.path / "sweep.csv";
  SweepResult s;
  s.grid = {0.0, 0.5};
  s.auroc_values = {0.25, 1.0};
  s.detector = "perturbed_likelihood";
  s.seed = 7;
  save_sweep_csv(csv, {s});
  CHECK(read_file(csv) ==
        "grid,auroc,detector,seed\n"
        "0,0.25,perturbed_likelihood,7\n"
        "0.5,1,perturbed_likelihood,7\n");
  CHECK_FALSE(std::filesystem::exists(csv.string() + ".tmp"));

  SweepResult broken = s;
  broken.auroc_values.pop_back();
  CHECK_THROWS_AS(save_sweep_csv(csv, {broken}), std::invalid_argument);
}
