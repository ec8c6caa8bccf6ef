#include "spem/eval.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "spem/data.hpp"
#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {
namespace {

void validate_scores(const ScoreSet& s, const char* who) {
  if (s.id_scores.empty() || s.ood_scores.empty())
    throw std::invalid_argument(std::string(who) +
                                ": both score sets must be nonempty");
  for (double v : s.id_scores)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string(who) + ": scores must be finite");
  for (double v : s.ood_scores)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string(who) + ": scores must be finite");
}

struct Tagged {
  double score = 0.0;
  bool ood = false;
};

std::vector<Tagged> tag_and_sort_ascending(const ScoreSet& s) {
  std::vector<Tagged> all;
  all.reserve(s.id_scores.size() + s.ood_scores.size());
  for (double v : s.id_scores) all.push_back({v, false});
  for (double v : s.ood_scores) all.push_back({v, true});
  std::sort(all.begin(), all.end(),
            [](const Tagged& a, const Tagged& b) { return a.score < b.score; });
  return all;
}

double clip01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

double auroc(const ScoreSet& s) {
  validate_scores(s, "auroc");
  std::vector<Tagged> all = tag_and_sort_ascending(s);
  // Mid-rank sum of the OOD side. Every mid-rank is an integer or a
  // half-integer, so the accumulations below are exact and the result
  // coincides with exhaustive pair counting.
  double rank_sum_ood = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].ood) rank_sum_ood += mid;
    i = j;
  }
  const double n_o = static_cast<double>(s.ood_scores.size());
  const double n_i = static_cast<double>(s.id_scores.size());
  return (rank_sum_ood - n_o * (n_o + 1.0) / 2.0) / (n_i * n_o);
}

std::vector<RocPoint> roc_curve(const ScoreSet& s) {
  validate_scores(s, "roc_curve");
  std::vector<Tagged> all = tag_and_sort_ascending(s);
  std::reverse(all.begin(), all.end());  // strictest threshold first
  const double n_i = static_cast<double>(s.id_scores.size());
  const double n_o = static_cast<double>(s.ood_scores.size());
  std::vector<RocPoint> curve;
  curve.push_back({0.0, 0.0});
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].ood)
        ++tp;
      else
        ++fp;
    }
    curve.push_back({static_cast<double>(fp) / n_i, static_cast<double>(tp) / n_o});
    i = j;
  }
  return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += 0.5 * (curve[i].fpr - curve[i - 1].fpr) *
            (curve[i].tpr + curve[i - 1].tpr);
  return area;
}

bool last_quartile_plateau(const std::vector<double>& values, double tol) {
  if (values.empty()) return false;
  std::size_t count = std::max<std::size_t>(1, values.size() / 4);
  auto first = values.end() - static_cast<std::ptrdiff_t>(count);
  double lo = *std::min_element(first, values.end());
  double hi = *std::max_element(first, values.end());
  return hi - lo < tol;
}

SweepResult sigma_sweep(const FlowModel& model, const Matrix& id_test,
                        const Matrix& ood_test,
                        const std::vector<double>& sigma_grid,
                        std::uint64_t seed) {
  require(!sigma_grid.empty(), "sigma_sweep: empty grid");
  require(id_test.rows > 0 && ood_test.rows > 0, "sigma_sweep: empty test set");
  require(id_test.cols == model.dim && ood_test.cols == model.dim,
          "sigma_sweep: dimension mismatch");
  for (double sigma : sigma_grid)
    require(std::isfinite(sigma) && sigma >= 0.0,
            "sigma_sweep: sigma must be finite and nonnegative");

  SweepResult res;
  res.grid = sigma_grid;
  res.detector = "perturbed_likelihood";
  res.seed = seed;

  std::vector<double> id_scores(id_test.rows);
  for (std::size_t i = 0; i < id_test.rows; ++i)
    id_scores[i] = likelihood_score(model, id_test.row(i));

  const std::size_t d = model.dim;
  std::vector<double> ood_scores(ood_test.rows);
  std::vector<double> y(d);
  for (std::size_t g = 0; g < sigma_grid.size(); ++g) {
    const double sigma = sigma_grid[g];
    for (std::size_t j = 0; j < ood_test.rows; ++j) {
      const double* x = ood_test.row(j);
      if (sigma == 0.0) {
        ood_scores[j] = likelihood_score(model, x);
        continue;
      }
      Rng rng = Rng::for_sample(seed, "sweep.sigma",
                                (static_cast<std::uint64_t>(g) << 32) |
                                    static_cast<std::uint64_t>(j));
      for (std::size_t k = 0; k < d; ++k) y[k] = x[k] + sigma * rng.normal();
      ood_scores[j] = likelihood_score(model, y.data());
    }
    res.auroc_values.push_back(auroc(ScoreSet{id_scores, ood_scores}));
  }
  return res;
}

SweepResult alpha_sweep(const SpemPipeline& p, const Matrix& id_test,
                        const Matrix& ood_test,
                        const std::vector<double>& alpha_grid,
                        std::uint64_t seed) {
  require(p.model != nullptr && p.bank != nullptr && p.embedder != nullptr,
          "alpha_sweep: pipeline is missing a fitted piece");
  require(!alpha_grid.empty(), "alpha_sweep: empty grid");
  require(id_test.rows > 0 && ood_test.rows > 0, "alpha_sweep: empty test set");
  require(id_test.cols == p.model->dim && ood_test.cols == p.model->dim,
          "alpha_sweep: dimension mismatch");
  for (double alpha : alpha_grid)
    require(std::isfinite(alpha) && alpha >= 0.0,
            "alpha_sweep: alpha must be finite and nonnegative");

  SweepResult res;
  res.grid = alpha_grid;
  res.detector = "spem";
  res.seed = seed;

  DetectorContext ctx;
  ctx.model = p.model;
  ctx.bank = p.bank;
  ctx.embedder = p.embedder;
  ctx.seed = seed;
  for (std::size_t g = 0; g < alpha_grid.size(); ++g) {
    ctx.spem.alpha = alpha_grid[g];
    ScoreSet s = score_pair(ctx, "spem", id_test, ood_test,
                            static_cast<std::uint64_t>(g) << 32);
    res.auroc_values.push_back(auroc(s));
  }
  res.plateau = last_quartile_plateau(res.auroc_values, 0.02);
  return res;
}

ControlledLambdaResult controlled_lambda_experiment(
    const FlowModel& model, const Matrix& id_test, const Matrix& ood_test,
    double alpha, std::size_t n_repeats, std::uint64_t seed, double mu_id,
    double mu_ood, double lambda_sd) {
  require(n_repeats > 0, "controlled_lambda: n_repeats must be positive");
  require(id_test.rows > 0 && ood_test.rows > 0,
          "controlled_lambda: empty test set");
  require(id_test.cols == model.dim && ood_test.cols == model.dim,
          "controlled_lambda: dimension mismatch");
  require(std::isfinite(alpha) && alpha >= 0.0,
          "controlled_lambda: alpha must be finite and nonnegative");
  require(std::isfinite(lambda_sd) && lambda_sd >= 0.0,
          "controlled_lambda: lambda_sd must be finite and nonnegative");

  const std::size_t n_i = id_test.rows;
  const std::size_t n_o = ood_test.rows;
  const std::uint64_t n_total = n_i + n_o;
  SpemConfig cfg;
  cfg.alpha = alpha;

  ControlledLambdaResult out;
  for (std::size_t r = 0; r < n_repeats; ++r) {
    Rng rng_id(seed ^ fnv1a64("controlled.lambda.id"), r);
    Rng rng_ood(seed ^ fnv1a64("controlled.lambda.ood"), r);
    ScoreSet lambda_only;
    ScoreSet perturbed;
    for (std::size_t i = 0; i < n_i; ++i) {
      double lam = clip01(rng_id.normal(mu_id, lambda_sd));
      lambda_only.id_scores.push_back(-lam);
      perturbed.id_scores.push_back(
          controlled_lambda_spem_score(model, cfg, id_test.row_vec(i), lam, seed,
                                       r * n_total + i)
              .score);
    }
    for (std::size_t j = 0; j < n_o; ++j) {
      double lam = clip01(rng_ood.normal(mu_ood, lambda_sd));
      lambda_only.ood_scores.push_back(-lam);
      perturbed.ood_scores.push_back(
          controlled_lambda_spem_score(model, cfg, ood_test.row_vec(j), lam,
                                       seed, r * n_total + n_i + j)
              .score);
    }
    out.repeats.push_back({auroc(lambda_only), auroc(perturbed)});
  }
  for (const ControlledLambdaRepeat& rep : out.repeats) {
    out.mean_lambda_only += rep.lambda_only_auroc;
    out.mean_spem += rep.spem_auroc;
  }
  out.mean_lambda_only /= static_cast<double>(out.repeats.size());
  out.mean_spem /= static_cast<double>(out.repeats.size());
  return out;
}

ScoreRow score_row(const DetectorContext& ctx, const std::string& detector,
                   const std::vector<double>& x, std::uint64_t sample_index,
                   const std::string& sample_id) {
  auto need_model = [&] {
    if (ctx.model == nullptr)
      throw std::invalid_argument("score_row: detector '" + detector +
                                  "' needs a flow model");
  };
  auto need_bank = [&] {
    if (ctx.bank == nullptr || ctx.embedder == nullptr)
      throw std::invalid_argument("score_row: detector '" + detector +
                                  "' needs a memory bank and embedder");
  };

  ScoreRow row;
  row.sample_id = sample_id;
  row.detector = detector;
  if (detector == "likelihood") {
    need_model();
    row.score = likelihood_score(*ctx.model, x.data());
  } else if (detector == "spem") {
    need_model();
    need_bank();
    SpemResult r = spem_score(*ctx.model, *ctx.bank, *ctx.embedder, ctx.spem, x,
                              ctx.seed, sample_index);
    row.score = r.score;
    row.lambda = r.lambda;
    row.sigma = r.sigma;
  } else if (detector == "spem_noise") {
    need_model();
    need_bank();
    SpemResult r = spem_noise_score(*ctx.model, *ctx.bank, *ctx.embedder,
                                    ctx.spem, x, ctx.seed, sample_index);
    row.score = r.score;
    row.lambda = r.lambda;
    row.sigma = r.sigma;
  } else if (detector == "similarity") {
    need_bank();
    SpemResult r = similarity_score(*ctx.bank, *ctx.embedder, x);
    row.score = r.score;
    row.lambda = r.lambda;
    row.sigma = r.sigma;
  } else if (detector == "complexity") {
    need_model();
    // Map onto [0,1] with the range recorded from the training data so the
    // 8-bit quantization keeps its resolution on arbitrarily scaled inputs.
    std::vector<double> y = x;
    if (ctx.quant_hi > ctx.quant_lo) {
      const double span = ctx.quant_hi - ctx.quant_lo;
      for (double& v : y) v = (v - ctx.quant_lo) / span;
    }
    row.score = complexity_score(*ctx.model, x.data(), quantize(y.data(), y.size()));
  } else if (detector == "typicality") {
    need_model();
    row.score = typicality_latent_score(*ctx.model, x.data());
  } else if (detector == "typicality_entropy") {
    need_model();
    if (!ctx.has_mean_loglik)
      throw std::invalid_argument(
          "score_row: typicality_entropy needs the cached mean training "
          "log-likelihood");
    row.score = typicality_entropy_score(*ctx.model, ctx.mean_loglik, x.data());
  } else if (detector == "likelihood_ratio") {
    need_model();
    if (ctx.background == nullptr)
      throw std::invalid_argument(
          "score_row: likelihood_ratio needs a background model");
    row.score = likelihood_ratio_score(*ctx.model, *ctx.background, x.data());
  } else if (detector == "gmm") {
    if (ctx.gmm == nullptr)
      throw std::invalid_argument("score_row: gmm detector needs a fitted GMM");
    row.score = gmm_score(*ctx.gmm, x.data());
  } else {
    throw std::invalid_argument("score_row: unknown detector '" + detector + "'");
  }
  return row;
}

double score_sample(const DetectorContext& ctx, const std::string& detector,
                    const std::vector<double>& x, std::uint64_t sample_index) {
  return score_row(ctx, detector, x, sample_index, "").score;
}

ScoreSet score_pair(const DetectorContext& ctx, const std::string& detector,
                    const Matrix& id_test, const Matrix& ood_test,
                    std::uint64_t index_offset) {
  ScoreSet s;
  s.id_scores.reserve(id_test.rows);
  s.ood_scores.reserve(ood_test.rows);
  for (std::size_t i = 0; i < id_test.rows; ++i)
    s.id_scores.push_back(
        score_sample(ctx, detector, id_test.row_vec(i), index_offset + i));
  for (std::size_t j = 0; j < ood_test.rows; ++j)
    s.ood_scores.push_back(score_sample(ctx, detector, ood_test.row_vec(j),
                                        index_offset + id_test.rows + j));
  return s;
}

std::vector<BenchmarkRow> benchmark_run(const ExperimentConfig& cfg) {
  if (cfg.data.kind != DatasetKind::inversion_pair)
    throw std::invalid_argument(
        "benchmark_run: data.kind must be inversion_pair");
  require(!cfg.detectors.empty(), "benchmark_run: empty detector roster");
  require(!cfg.pairs.empty(), "benchmark_run: no pairs configured");

  auto wants = [&](const char* name) {
    return std::find(cfg.detectors.begin(), cfg.detectors.end(), name) !=
           cfg.detectors.end();
  };
  const bool need_bank =
      wants("spem") || wants("spem_noise") || wants("similarity");

  SyntheticDatasetSpec spec = cfg.data;
  spec.seed = cfg.seed;
  spec.ood_broad = false;
  GeneratedData base = generate(spec);

  FlowModel init =
      make_flow(spec.dim, cfg.flow_layers, cfg.flow_hidden, cfg.train.seed);
  FlowModel model = train(base.train, init, cfg.train).model;

  Embedder embedder;
  MemoryBank bank;
  if (need_bank) {
    const std::size_t out_dim = cfg.embed_dim == 0 ? spec.dim : cfg.embed_dim;
    embedder = fit_embedder(base.train, cfg.embed_kind, out_dim, cfg.seed);
    ReActConfig react = cfg.react;
    react.beta = calibrate_react(embedder, base.train, react.p,
                                 react.sample_count, cfg.seed);
    bank = build_memory_bank(base.train, embedder, react);
  }
  std::optional<FlowModel> background;
  if (wants("likelihood_ratio"))
    background = train_background_model(base.train, cfg.background);
  std::optional<GmmModel> gmm;
  if (wants("gmm")) gmm = fit_gmm(base.train, cfg.gmm_components, cfg.seed).model;

  DetectorContext ctx;
  ctx.model = &model;
  ctx.spem = cfg.spem;
  ctx.seed = cfg.seed;
  if (need_bank) {
    ctx.embedder = &embedder;
    ctx.bank = &bank;
  }
  if (background) ctx.background = &*background;
  if (gmm) ctx.gmm = &*gmm;
  if (wants("typicality_entropy")) {
    ctx.mean_loglik = mean_train_loglik(model, base.train);
    ctx.has_mean_loglik = true;
  }
  auto [lo_it, hi_it] =
      std::minmax_element(base.train.data.begin(), base.train.data.end());
  ctx.quant_lo = *lo_it;
  ctx.quant_hi = *hi_it;

  std::vector<BenchmarkRow> rows;
  for (std::size_t pair_idx = 0; pair_idx < cfg.pairs.size(); ++pair_idx) {
    const std::string& pair_name = cfg.pairs[pair_idx];
    Matrix broad_ood;
    const Matrix* ood = nullptr;
    if (pair_name == "inversion") {
      ood = &base.ood;
    } else if (pair_name == "broad") {
      SyntheticDatasetSpec broad_spec = spec;
      broad_spec.ood_broad = true;
      broad_ood = generate(broad_spec).ood;
      ood = &broad_ood;
    } else {
      throw std::invalid_argument("benchmark_run: unknown pair '" + pair_name +
                                  "'");
    }
    const std::uint64_t offset = static_cast<std::uint64_t>(pair_idx) << 32;
    for (const std::string& detector : cfg.detectors) {
      ScoreSet s = score_pair(ctx, detector, base.test, *ood, offset);
      rows.push_back({pair_name, detector, auroc(s), cfg.seed, codec_id()});
    }
  }
  return rows;
}

void save_sweep_csv(const std::filesystem::path& path,
                    const std::vector<SweepResult>& sweeps) {
  AtomicFileWriter writer(path);
  auto& out = writer.stream();
  out << "grid,auroc,detector,seed\n";
  for (const SweepResult& s : sweeps) {
    require(s.grid.size() == s.auroc_values.size(),
            "save_sweep_csv: grid and auroc lengths differ");
    for (std::size_t i = 0; i < s.grid.size(); ++i)
      out << format_double(s.grid[i]) << ',' << format_double(s.auroc_values[i])
          << ',' << s.detector << ',' << s.seed << '\n';
  }
  writer.commit();
}

void save_benchmark_csv(const std::filesystem::path& path,
                        const std::vector<BenchmarkRow>& rows) {
  AtomicFileWriter writer(path);
  auto& out = writer.stream();
  out << "pair,detector,auroc,seed,codec_id\n";
  for (const BenchmarkRow& r : rows)
    out << r.pair << ',' << r.detector << ',' << format_double(r.auroc_value)
        << ',' << r.seed << ',' << r.codec << '\n';
  writer.commit();
}

}  // namespace spem
