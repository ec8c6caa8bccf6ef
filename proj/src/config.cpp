#include "spem/config.hpp"

#include <charconv>
#include <fstream>
#include <stdexcept>

#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {
namespace {

std::uint64_t parse_u64(const std::string& value, const std::string& key) {
  std::uint64_t v = 0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw std::invalid_argument("config: malformed integer for '" + key + "': " + value);
  return v;
}

std::size_t parse_size(const std::string& value, const std::string& key) {
  return static_cast<std::size_t>(parse_u64(value, key));
}

double parse_real(const std::string& value, const std::string& key) {
  double v = 0.0;
  auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw std::invalid_argument("config: malformed number for '" + key + "': " + value);
  return v;
}

bool parse_bool(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("config: malformed bool for '" + key + "': " + value);
}

DatasetKind parse_kind(const std::string& value, const std::string& key) {
  if (value == "gaussian") return DatasetKind::gaussian;
  if (value == "gaussian_mixture") return DatasetKind::gaussian_mixture;
  if (value == "inversion_pair") return DatasetKind::inversion_pair;
  throw std::invalid_argument("config: unknown dataset kind for '" + key + "': " + value);
}

EmbedderKind parse_embedder(const std::string& value, const std::string& key) {
  if (value == "identity") return EmbedderKind::identity;
  if (value == "random_projection") return EmbedderKind::random_projection;
  if (value == "pca") return EmbedderKind::pca;
  throw std::invalid_argument("config: unknown embedder kind for '" + key + "': " + value);
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::string> default_detectors() {
  return {"likelihood",        "spem",
          "spem_noise",        "similarity",
          "complexity",        "typicality",
          "typicality_entropy", "likelihood_ratio",
          "gmm"};
}

std::vector<std::string> default_pairs() { return {"inversion", "broad"}; }

std::vector<double> default_sigma_grid() {
  return {0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.8};
}

std::vector<double> default_alpha_grid() {
  return {0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.data.kind = DatasetKind::inversion_pair;
  cfg.data.dim = 16;
  cfg.data.n_train = 32768;
  cfg.data.n_test = 2048;
  cfg.train.epochs = 300;
  cfg.detectors = default_detectors();
  cfg.pairs = default_pairs();
  cfg.sigma_grid = default_sigma_grid();
  cfg.alpha_grid = default_alpha_grid();
  propagate_seed(cfg);
  return cfg;
}

void propagate_seed(ExperimentConfig& cfg) {
  cfg.data.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.background.train.seed = splitmix64(cfg.seed ^ fnv1a64("background.model"));
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    std::size_t comma = csv.find(',', start);
    if (comma == std::string::npos) comma = csv.size();
    std::string item = trim(csv.substr(start, comma - start));
    if (!item.empty()) out.push_back(item);
    start = comma + 1;
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& csv, const char* context) {
  std::vector<double> out;
  for (const std::string& item : split_list(csv)) out.push_back(parse_double(item, context));
  return out;
}

void apply_override(ExperimentConfig& cfg, const std::string& key,
                    const std::string& value) {
  if (key == "seed") {
    cfg.seed = parse_u64(value, key);
  } else if (key == "data.kind") {
    cfg.data.kind = parse_kind(value, key);
  } else if (key == "data.dim") {
    cfg.data.dim = parse_size(value, key);
  } else if (key == "data.n_train") {
    cfg.data.n_train = parse_size(value, key);
  } else if (key == "data.n_test") {
    cfg.data.n_test = parse_size(value, key);
  } else if (key == "data.ring_components") {
    cfg.data.ring_components = parse_size(value, key);
  } else if (key == "data.ring_radius") {
    cfg.data.ring_radius = parse_real(value, key);
  } else if (key == "data.sigma_plane") {
    cfg.data.sigma_plane = parse_real(value, key);
  } else if (key == "data.sigma_perp") {
    cfg.data.sigma_perp = parse_real(value, key);
  } else if (key == "data.core_weight") {
    cfg.data.core_weight = parse_real(value, key);
  } else if (key == "data.core_sigma") {
    cfg.data.core_sigma = parse_real(value, key);
  } else if (key == "data.ood_offset") {
    cfg.data.ood_offset = parse_real(value, key);
  } else if (key == "data.ood_sigma") {
    cfg.data.ood_sigma = parse_real(value, key);
  } else if (key == "data.ood_broad") {
    cfg.data.ood_broad = parse_bool(value, key);
  } else if (key == "data.ood_broad_sigma") {
    cfg.data.ood_broad_sigma = parse_real(value, key);
  } else if (key == "flow.layers") {
    cfg.flow_layers = parse_size(value, key);
  } else if (key == "flow.hidden") {
    cfg.flow_hidden = parse_size(value, key);
  } else if (key == "train.epochs") {
    cfg.train.epochs = parse_size(value, key);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = parse_size(value, key);
  } else if (key == "train.learning_rate") {
    cfg.train.learning_rate = parse_real(value, key);
  } else if (key == "train.lr_floor") {
    cfg.train.lr_floor = parse_real(value, key);
  } else if (key == "train.weight_decay") {
    cfg.train.weight_decay = parse_real(value, key);
  } else if (key == "embed.kind") {
    cfg.embed_kind = parse_embedder(value, key);
  } else if (key == "embed.dim") {
    cfg.embed_dim = parse_size(value, key);
  } else if (key == "react.p") {
    cfg.react.p = parse_real(value, key);
  } else if (key == "react.sample_count") {
    cfg.react.sample_count = parse_size(value, key);
  } else if (key == "spem.alpha") {
    cfg.spem.alpha = parse_real(value, key);
  } else if (key == "spem.alpha_noise") {
    cfg.spem.alpha_noise = parse_real(value, key);
  } else if (key == "background.mu") {
    cfg.background.mu = parse_real(value, key);
  } else if (key == "background.layers") {
    cfg.background.n_layers = parse_size(value, key);
  } else if (key == "background.hidden") {
    cfg.background.hidden = parse_size(value, key);
  } else if (key == "background.epochs") {
    cfg.background.train.epochs = parse_size(value, key);
  } else if (key == "gmm.components") {
    cfg.gmm_components = parse_size(value, key);
  } else if (key == "eval.detectors") {
    cfg.detectors = split_list(value);
  } else if (key == "eval.pairs") {
    cfg.pairs = split_list(value);
  } else if (key == "eval.sigma_grid") {
    cfg.sigma_grid = parse_double_list(value, "eval.sigma_grid");
  } else if (key == "eval.alpha_grid") {
    cfg.alpha_grid = parse_double_list(value, "eval.alpha_grid");
  } else if (key == "eval.lambda_repeats") {
    cfg.lambda_repeats = parse_size(value, key);
  } else if (key == "eval.controlled_alpha") {
    cfg.controlled_alpha = parse_real(value, key);
  } else if (key == "paths.model") {
    cfg.model_path = value;
  } else if (key == "paths.bank") {
    cfg.bank_path = value;
  } else if (key == "paths.data") {
    cfg.data_path = value;
  } else if (key == "paths.out_dir") {
    cfg.out_dir = value;
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

void apply_override(ExperimentConfig& cfg, const std::string& key_equals_value) {
  std::size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("config: expected key=value, got '" +
                                key_equals_value + "'");
  apply_override(cfg, trim(key_equals_value.substr(0, eq)),
                 trim(key_equals_value.substr(eq + 1)));
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  ExperimentConfig cfg = default_config();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(std::string(e.what()) + " (line " +
                                  std::to_string(line_no) + " of " +
                                  path.string() + ")");
    }
  }
  propagate_seed(cfg);
  return cfg;
}

}  // namespace spem
