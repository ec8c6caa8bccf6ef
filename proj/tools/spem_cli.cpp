// spem: likelihood-based anomaly detection workbench.
//
// Subcommands: gen, train, bank, score, sweep, verify-theorems, benchmark.
// Every experiment is steered by a flat key=value config (see --config)
// plus repeatable --set overrides; dedicated flags win over both. All
// randomness derives from the mandatory --seed: re-running any command with
// the same inputs and seed reproduces every output file byte for byte.
// Output files are written atomically, so a failing command leaves no
// partial artifacts. SPEM_OUT_DIR, when set, is the default output
// directory for any path option left at its default.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "spem/baselines.hpp"
#include "spem/config.hpp"
#include "spem/data.hpp"
#include "spem/embed.hpp"
#include "spem/eval.hpp"
#include "spem/flow.hpp"
#include "spem/scoring.hpp"
#include "spem/textio.hpp"
#include "spem/theorems.hpp"

namespace fs = std::filesystem;
using namespace spem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path,
                  "Flat key=value config file (later keys win)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.sets,
                  "Config override, section.key=value (repeatable; wins over "
                  "the config file)");
  cmd->add_option("--seed", opts.seed,
                  "Global seed; every random stream derives from it")
      ->required();
}

ExperimentConfig resolve_config(const CommonOpts& opts) {
  ExperimentConfig cfg = opts.config_path.empty()
                             ? default_config()
                             : load_config(opts.config_path);
  for (const std::string& kv : opts.sets) apply_override(cfg, kv);
  cfg.seed = opts.seed;
  propagate_seed(cfg);
  return cfg;
}

fs::path out_base() {
  const char* env = std::getenv("SPEM_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

// Output path resolution: explicit flag > config entry > SPEM_OUT_DIR (or
// cwd) joined with the command's default file name.
fs::path pick_output(const std::string& flag, const fs::path& cfg_path,
                     const char* fallback_name) {
  if (!flag.empty()) return flag;
  if (!cfg_path.empty()) return cfg_path;
  return out_base() / fallback_name;
}

void ensure_parent(const fs::path& p) {
  fs::path dir = p.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
}

void require_input(const fs::path& p, const char* what) {
  if (p.empty())
    throw std::runtime_error(std::string("missing input: no ") + what +
                             " path given (flag or config)");
  if (!fs::exists(p))
    throw std::runtime_error(std::string("missing input: ") + what + " '" +
                             p.string() + "' does not exist");
}

Matrix load_batch(const fs::path& p, const char* what) {
  require_input(p, what);
  return load_csv(p).values;
}

bool wants(const ExperimentConfig& cfg, const char* name) {
  return std::find(cfg.detectors.begin(), cfg.detectors.end(), name) !=
         cfg.detectors.end();
}

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
  CommonOpts common;
  std::string out_dir;
};

int run_gen(const GenOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  fs::path dir = opts.out_dir.empty()
                     ? (cfg.out_dir.empty() ? out_base() : cfg.out_dir)
                     : fs::path(opts.out_dir);
  fs::create_directories(dir);

  GeneratedData data = generate(cfg.data);
  save_csv(dir / "train.csv", data.train);
  save_csv(dir / "test.csv", data.test);
  std::printf("wrote %s (%zu rows) and %s (%zu rows)\n",
              (dir / "train.csv").string().c_str(), data.train.rows,
              (dir / "test.csv").string().c_str(), data.test.rows);
  if (cfg.data.kind == DatasetKind::inversion_pair) {
    save_csv(dir / "ood.csv", data.ood);
    SyntheticDatasetSpec broad = cfg.data;
    broad.ood_broad = true;
    Matrix broad_ood = generate(broad).ood;
    save_csv(dir / "ood_broad.csv", broad_ood);
    std::printf("wrote %s (%zu rows) and %s (%zu rows)\n",
                (dir / "ood.csv").string().c_str(), data.ood.rows,
                (dir / "ood_broad.csv").string().c_str(), broad_ood.rows);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  CommonOpts common;
  std::string data_path;
  std::string out_path;
};

int run_train(const TrainOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  fs::path data_path =
      opts.data_path.empty() ? cfg.data_path : fs::path(opts.data_path);
  Matrix train_data = load_batch(data_path, "training data");
  fs::path out = pick_output(opts.out_path, cfg.model_path, "model.bin");
  ensure_parent(out);

  FlowModel init = make_flow(train_data.cols, cfg.flow_layers, cfg.flow_hidden,
                             cfg.train.seed);
  TrainResult result = train(train_data, init, cfg.train);
  save_model(result.model, out);
  std::printf("trained %zu-layer flow on %zu samples for %zu epochs\n",
              cfg.flow_layers, train_data.rows, result.trace.epoch_nll.size());
  std::printf("final train NLL %s nats/sample; model written to %s\n",
              format_double(result.trace.epoch_nll.back()).c_str(),
              out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bank

struct BankOpts {
  CommonOpts common;
  std::string data_path;
  std::string out_path;
};

int run_bank(const BankOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  fs::path data_path =
      opts.data_path.empty() ? cfg.data_path : fs::path(opts.data_path);
  Matrix train_data = load_batch(data_path, "training data");
  fs::path out = pick_output(opts.out_path, cfg.bank_path, "bank.bin");
  ensure_parent(out);

  std::size_t out_dim = cfg.embed_dim == 0 ? train_data.cols : cfg.embed_dim;
  Embedder e = fit_embedder(train_data, cfg.embed_kind, out_dim, cfg.seed);
  ReActConfig react = cfg.react;
  react.beta =
      calibrate_react(e, train_data, react.p, react.sample_count, cfg.seed);
  MemoryBank bank = build_memory_bank(train_data, e, react);
  save_bank(bank, out);
  std::printf(
      "memory bank: %zu rows of dim %zu, clip beta %s, fingerprint %llu\n",
      bank.rows.rows, bank.dim, format_double(bank.beta).c_str(),
      static_cast<unsigned long long>(bank.fingerprint));
  std::printf("bank written to %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// score

struct ScoreOpts {
  CommonOpts common;
  std::string model_path;
  std::string bank_path;
  std::string train_path;
  std::string id_path;
  std::string ood_path;
  std::string out_path;
  std::string summary_path;
};

// Rebuilds the embedder from the training data (deterministic per seed) and
// validates it against the bank's stored fingerprint.
struct ScoreAssets {
  FlowModel model;
  Embedder embedder;
  MemoryBank bank;
  std::optional<FlowModel> background;
  std::optional<GmmModel> gmm;
  Matrix train_data;
  bool has_bank = false;
};

ScoreAssets build_assets(const ExperimentConfig& cfg, const fs::path& model_path,
                         const fs::path& bank_path, const fs::path& train_path,
                         bool need_bank, bool need_train) {
  ScoreAssets a;
  require_input(model_path, "model");
  a.model = load_model(model_path);
  if (need_train) a.train_data = load_batch(train_path, "training data");
  if (need_bank) {
    require_input(bank_path, "memory bank");
    std::size_t out_dim =
        cfg.embed_dim == 0 ? a.train_data.cols : cfg.embed_dim;
    a.embedder = fit_embedder(a.train_data, cfg.embed_kind, out_dim, cfg.seed);
    a.bank = load_bank(bank_path, a.embedder);
    a.has_bank = true;
  }
  if (wants(cfg, "likelihood_ratio"))
    a.background = train_background_model(a.train_data, cfg.background);
  if (wants(cfg, "gmm"))
    a.gmm = fit_gmm(a.train_data, cfg.gmm_components, cfg.seed).model;
  return a;
}

DetectorContext make_context(const ExperimentConfig& cfg, ScoreAssets& a,
                             bool need_train) {
  DetectorContext ctx;
  ctx.model = &a.model;
  ctx.spem = cfg.spem;
  ctx.seed = cfg.seed;
  if (a.has_bank) {
    ctx.embedder = &a.embedder;
    ctx.bank = &a.bank;
  }
  if (a.background) ctx.background = &*a.background;
  if (a.gmm) ctx.gmm = &*a.gmm;
  if (wants(cfg, "typicality_entropy")) {
    ctx.mean_loglik = mean_train_loglik(a.model, a.train_data);
    ctx.has_mean_loglik = true;
  }
  if (need_train && !a.train_data.empty()) {
    auto [lo, hi] = std::minmax_element(a.train_data.data.begin(),
                                        a.train_data.data.end());
    ctx.quant_lo = *lo;
    ctx.quant_hi = *hi;
  }
  return ctx;
}

int run_score(const ScoreOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  require(!cfg.detectors.empty(), "score: empty detector roster");

  const bool need_bank = wants(cfg, "spem") || wants(cfg, "spem_noise") ||
                         wants(cfg, "similarity");
  const bool need_train = need_bank || wants(cfg, "complexity") ||
                          wants(cfg, "typicality_entropy") ||
                          wants(cfg, "likelihood_ratio") || wants(cfg, "gmm");

  fs::path model_path =
      opts.model_path.empty() ? cfg.model_path : fs::path(opts.model_path);
  fs::path bank_path =
      opts.bank_path.empty() ? cfg.bank_path : fs::path(opts.bank_path);
  fs::path train_path =
      opts.train_path.empty() ? cfg.data_path : fs::path(opts.train_path);
  Matrix id_test = load_batch(opts.id_path, "ID test data");
  Matrix ood_test = load_batch(opts.ood_path, "OOD test data");

  ScoreAssets assets = build_assets(cfg, model_path, bank_path, train_path,
                                    need_bank, need_train);
  DetectorContext ctx = make_context(cfg, assets, need_train);

  fs::path out = pick_output(opts.out_path, {}, "scores.csv");
  fs::path summary = pick_output(opts.summary_path, {}, "auroc.csv");
  ensure_parent(out);
  ensure_parent(summary);

  // Per-sample rows use the same index convention as score_pair (id row i ->
  // i, ood row j -> n_id + j), so the summary AUROC is exactly the AUROC of
  // the written scores.
  std::vector<ScoreRow> rows;
  std::vector<std::pair<std::string, double>> aurocs;
  for (const std::string& detector : cfg.detectors) {
    ScoreSet s;
    for (std::size_t i = 0; i < id_test.rows; ++i) {
      ScoreRow row = score_row(ctx, detector, id_test.row_vec(i), i,
                               "id_" + std::to_string(i));
      s.id_scores.push_back(row.score);
      rows.push_back(std::move(row));
    }
    for (std::size_t j = 0; j < ood_test.rows; ++j) {
      ScoreRow row = score_row(ctx, detector, ood_test.row_vec(j),
                               id_test.rows + j, "ood_" + std::to_string(j));
      s.ood_scores.push_back(row.score);
      rows.push_back(std::move(row));
    }
    aurocs.emplace_back(detector, auroc(s));
  }

  save_scores_csv(out, rows);
  {
    AtomicFileWriter writer(summary);
    writer.stream() << "detector,auroc,seed\n";
    for (const auto& [detector, value] : aurocs) {
      writer.stream() << detector << ',' << format_double(value) << ','
                      << cfg.seed << '\n';
    }
    writer.commit();
  }
  for (const auto& [detector, value] : aurocs)
    std::printf("%-20s auroc %s\n", detector.c_str(),
                format_double(value).c_str());
  std::printf("scores written to %s; summary to %s\n", out.string().c_str(),
              summary.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepOpts {
  CommonOpts common;
  std::string mode = "sigma";
  std::string model_path;
  std::string bank_path;
  std::string train_path;
  std::string id_path;
  std::string ood_path;
  std::string out_path;
};

int run_sweep(const SweepOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  fs::path model_path =
      opts.model_path.empty() ? cfg.model_path : fs::path(opts.model_path);
  require_input(model_path, "model");
  FlowModel model = load_model(model_path);
  Matrix id_test = load_batch(opts.id_path, "ID test data");
  Matrix ood_test = load_batch(opts.ood_path, "OOD test data");
  fs::path out = pick_output(opts.out_path, {}, "sweep.csv");
  ensure_parent(out);

  SweepResult result;
  if (opts.mode == "sigma") {
    result = sigma_sweep(model, id_test, ood_test, cfg.sigma_grid, cfg.seed);
  } else if (opts.mode == "alpha") {
    fs::path train_path =
        opts.train_path.empty() ? cfg.data_path : fs::path(opts.train_path);
    fs::path bank_path =
        opts.bank_path.empty() ? cfg.bank_path : fs::path(opts.bank_path);
    Matrix train_data = load_batch(train_path, "training data");
    require_input(bank_path, "memory bank");
    std::size_t out_dim = cfg.embed_dim == 0 ? train_data.cols : cfg.embed_dim;
    Embedder e = fit_embedder(train_data, cfg.embed_kind, out_dim, cfg.seed);
    MemoryBank bank = load_bank(bank_path, e);
    SpemPipeline pipeline{&model, &bank, &e};
    result = alpha_sweep(pipeline, id_test, ood_test, cfg.alpha_grid, cfg.seed);
  } else {
    throw std::runtime_error("unknown sweep mode '" + opts.mode +
                             "' (expected sigma or alpha)");
  }
  save_sweep_csv(out, {result});
  for (std::size_t g = 0; g < result.grid.size(); ++g)
    std::printf("%s=%-8s auroc %s\n", opts.mode.c_str(),
                format_double(result.grid[g]).c_str(),
                format_double(result.auroc_values[g]).c_str());
  if (opts.mode == "alpha")
    std::printf("last-quartile plateau within 0.02: %s\n",
                result.plateau ? "yes" : "no");
  std::printf("sweep written to %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// verify-theorems

struct VerifyOpts {
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  std::string out_path;
};

int run_verify(const VerifyOpts& opts) {
  std::vector<BoundCheck> checks = run_theorem_suite(opts.instances, opts.seed);
  fs::path out = pick_output(opts.out_path, {}, "checks.csv");
  ensure_parent(out);
  save_bound_checks_csv(out, checks);
  std::size_t failed = 0;
  for (const BoundCheck& c : checks) {
    if (!c.holds) {
      ++failed;
      std::fprintf(stderr, "VIOLATED %s %s lhs=%s rhs=%s\n", c.name.c_str(),
                   c.instance.c_str(), format_double(c.lhs).c_str(),
                   format_double(c.rhs).c_str());
    }
  }
  std::printf("%zu bound checks (%zu instances per family); %zu hold\n",
              checks.size(), opts.instances, checks.size() - failed);
  std::printf("table written to %s\n", out.string().c_str());
  if (failed > 0) {
    std::fprintf(stderr, "error: %zu bound checks violated\n", failed);
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// benchmark

struct BenchmarkOpts {
  CommonOpts common;
  std::string out_path;
};

int run_benchmark(const BenchmarkOpts& opts) {
  ExperimentConfig cfg = resolve_config(opts.common);
  std::vector<BenchmarkRow> rows = benchmark_run(cfg);
  fs::path out = pick_output(opts.out_path, {}, "benchmark.csv");
  ensure_parent(out);
  save_benchmark_csv(out, rows);
  for (const BenchmarkRow& r : rows)
    std::printf("%-10s %-20s auroc %s\n", r.pair.c_str(), r.detector.c_str(),
                format_double(r.auroc_value).c_str());
  std::printf("benchmark written to %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "spem: likelihood-based anomaly detection workbench with "
      "similarity-scaled entropy manipulation.\n"
      "Deterministic per --seed; CSV outputs are written atomically and are "
      "byte-identical across re-runs.\n"
      "SPEM_OUT_DIR sets the default output directory."};
  app.require_subcommand(1);

  GenOpts gen_opts;
  CLI::App* gen = app.add_subcommand(
      "gen", "Generate synthetic datasets (train/test/ood CSVs)");
  add_common(gen, gen_opts.common);
  gen->add_option("--out-dir", gen_opts.out_dir,
                  "Directory for the dataset CSVs");

  TrainOpts train_opts;
  CLI::App* train_cmd =
      app.add_subcommand("train", "Train the flow density model on a CSV");
  add_common(train_cmd, train_opts.common);
  train_cmd->add_option("--data", train_opts.data_path,
                        "Training data CSV (default: paths.data from config)");
  train_cmd->add_option("--out", train_opts.out_path, "Output model file");

  BankOpts bank_opts;
  CLI::App* bank_cmd = app.add_subcommand(
      "bank", "Fit the embedder and build the clipped memory bank");
  add_common(bank_cmd, bank_opts.common);
  bank_cmd->add_option("--data", bank_opts.data_path,
                       "Training data CSV (default: paths.data from config)");
  bank_cmd->add_option("--out", bank_opts.out_path, "Output bank file");

  ScoreOpts score_opts;
  CLI::App* score_cmd = app.add_subcommand(
      "score", "Score an ID/OOD pair with the configured detectors");
  add_common(score_cmd, score_opts.common);
  score_cmd->add_option("--model", score_opts.model_path, "Trained model file");
  score_cmd->add_option("--bank", score_opts.bank_path, "Memory bank file");
  score_cmd->add_option("--train", score_opts.train_path,
                        "Training data CSV (needed by detectors that "
                        "calibrate on it)");
  score_cmd->add_option("--id", score_opts.id_path, "ID test CSV")->required();
  score_cmd->add_option("--ood", score_opts.ood_path, "OOD test CSV")
      ->required();
  score_cmd->add_option("--out", score_opts.out_path, "Per-sample scores CSV");
  score_cmd->add_option("--summary", score_opts.summary_path,
                        "Per-detector AUROC CSV");

  SweepOpts sweep_opts;
  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "AUROC across the noise grid (sigma) or the scaled-noise "
               "strength grid (alpha)");
  add_common(sweep_cmd, sweep_opts.common);
  sweep_cmd->add_option("--mode", sweep_opts.mode, "sigma or alpha")
      ->check(CLI::IsMember({"sigma", "alpha"}));
  sweep_cmd->add_option("--model", sweep_opts.model_path, "Trained model file");
  sweep_cmd->add_option("--bank", sweep_opts.bank_path,
                        "Memory bank file (alpha mode)");
  sweep_cmd->add_option("--train", sweep_opts.train_path,
                        "Training data CSV (alpha mode)");
  sweep_cmd->add_option("--id", sweep_opts.id_path, "ID test CSV")->required();
  sweep_cmd->add_option("--ood", sweep_opts.ood_path, "OOD test CSV")
      ->required();
  sweep_cmd->add_option("--out", sweep_opts.out_path, "Sweep CSV");

  VerifyOpts verify_opts;
  CLI::App* verify_cmd = app.add_subcommand(
      "verify-theorems",
      "Run the randomized analytic bound-check suite and write its table");
  verify_cmd->add_option("--instances", verify_opts.instances,
                         "Instances per bound family")
      ->default_val(100);
  verify_cmd
      ->add_option("--seed", verify_opts.seed, "Suite instance stream seed")
      ->required();
  verify_cmd->add_option("--out", verify_opts.out_path, "Bound check CSV");

  BenchmarkOpts bench_opts;
  CLI::App* bench_cmd = app.add_subcommand(
      "benchmark",
      "End-to-end detector-by-pair AUROC matrix on the synthetic benchmark");
  add_common(bench_cmd, bench_opts.common);
  bench_cmd->add_option("--out", bench_opts.out_path, "Benchmark CSV");

  CLI11_PARSE(app, argc, argv);

  const char* name = "spem";
  try {
    if (app.got_subcommand(gen)) return run_gen(gen_opts);
    if (app.got_subcommand(train_cmd)) return run_train(train_opts);
    if (app.got_subcommand(bank_cmd)) return run_bank(bank_opts);
    if (app.got_subcommand(score_cmd)) return run_score(score_opts);
    if (app.got_subcommand(sweep_cmd)) return run_sweep(sweep_opts);
    if (app.got_subcommand(verify_cmd)) return run_verify(verify_opts);
    if (app.got_subcommand(bench_cmd)) return run_benchmark(bench_opts);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: error: %s\n", name, e.what());
    return 1;
  }
  return 0;
}
