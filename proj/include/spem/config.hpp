#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spem/baselines.hpp"
#include "spem/data.hpp"
#include "spem/embed.hpp"
#include "spem/flow.hpp"
#include "spem/scoring.hpp"

namespace spem {

// One flat description of an end-to-end experiment. All randomness flows
// from the single global seed: propagate_seed() pushes it into every stage,
// and the per-purpose stream tags inside the modules keep the stages
// decoupled. The background density model gets a separately mixed key so it
// never shares the main flow's initialization or shuffle order.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  SyntheticDatasetSpec data;

  std::size_t flow_layers = 6;
  std::size_t flow_hidden = 32;
  TrainConfig train;

  EmbedderKind embed_kind = EmbedderKind::identity;
  std::size_t embed_dim = 0;  // 0 = same as data.dim
  ReActConfig react;
  SpemConfig spem;

  BackgroundConfig background;
  std::size_t gmm_components = 3;

  std::vector<std::string> detectors;  // scored in this order
  std::vector<std::string> pairs;      // benchmark pairs, see default_pairs()
  std::vector<double> sigma_grid;
  std::vector<double> alpha_grid;
  std::size_t lambda_repeats = 3;
  double controlled_alpha = 0.1;  // perturbation strength in the injected-
                                  // similarity experiment

  std::filesystem::path model_path;
  std::filesystem::path bank_path;
  std::filesystem::path data_path;
  std::filesystem::path out_dir;
};

// Defaults calibrated for the bundled synthetic benchmark.
ExperimentConfig default_config();

std::vector<std::string> default_detectors();
std::vector<std::string> default_pairs();
std::vector<double> default_sigma_grid();
std::vector<double> default_alpha_grid();

// Applies one `section.key=value` assignment. The same routine backs the
// config-file loader and command-line overrides, so the two surfaces cannot
// diverge. Unknown keys and malformed values raise invalid_argument naming
// the offending key.
void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value);
void apply_override(ExperimentConfig& cfg, const std::string& key_equals_value);

// Parses a flat key=value file: one assignment per line, '#' starts a
// comment, blank lines ignored, later assignments win. propagate_seed() is
// applied after the last line.
ExperimentConfig load_config(const std::filesystem::path& path);

// Re-derives every per-stage seed from cfg.seed; call after the last
// override so one --seed flag steers the whole pipeline.
void propagate_seed(ExperimentConfig& cfg);

// Comma-separated lists, used for grids and detector rosters.
std::vector<std::string> split_list(const std::string& csv);
std::vector<double> parse_double_list(const std::string& csv, const char* context);

}  // namespace spem
