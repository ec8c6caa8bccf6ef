#include "spem/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "spem/textio.hpp"

namespace spem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void check_components(const std::vector<ComponentSpec>& comps, std::size_t dim,
                      const char* who) {
  if (comps.empty())
    throw std::invalid_argument(std::string(who) + ": no mixture components");
  double wsum = 0.0;
  for (const auto& c : comps) {
    if (c.mean.size() != dim || c.var.size() != dim)
      throw std::invalid_argument(std::string(who) + ": component dim mismatch");
    if (c.weight < 0.0)
      throw std::invalid_argument(std::string(who) + ": negative weight");
    for (double v : c.var)
      if (!(v > 0.0))
        throw std::invalid_argument(std::string(who) + ": variances must be > 0");
    wsum += c.weight;
  }
  if (std::fabs(wsum - 1.0) > 1e-9)
    throw std::invalid_argument(std::string(who) + ": weights must sum to 1");
}

void sample_mixture(const std::vector<ComponentSpec>& comps, Matrix& out,
                    std::size_t n, Rng& rng) {
  std::size_t d = comps.front().mean.size();
  out = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t c = 0;
    double acc = 0.0;
    for (; c + 1 < comps.size(); ++c) {
      acc += comps[c].weight;
      if (u < acc) break;
    }
    double* row = out.row(i);
    for (std::size_t j = 0; j < d; ++j)
      row[j] = comps[c].mean[j] + std::sqrt(comps[c].var[j]) * rng.normal();
  }
}

double component_logpdf(const ComponentSpec& c, const double* x) {
  double lp = 0.0;
  for (std::size_t j = 0; j < c.mean.size(); ++j) {
    double dm = x[j] - c.mean[j];
    lp -= 0.5 * (kLog2Pi + std::log(c.var[j]) + dm * dm / c.var[j]);
  }
  return lp;
}

std::uint8_t round_half_even(double y) {
  double f = std::floor(y);
  double frac = y - f;
  double r;
  if (frac > 0.5)
    r = f + 1.0;
  else if (frac < 0.5)
    r = f;
  else
    r = (std::fmod(f, 2.0) == 0.0) ? f : f + 1.0;
  return static_cast<std::uint8_t>(r);
}

}  // namespace

std::vector<ComponentSpec> inversion_id_components(const SyntheticDatasetSpec& spec) {
  const std::size_t d = spec.dim;
  if (d < 2)
    throw std::invalid_argument("inversion_pair: dim must be at least 2");
  if (spec.ring_components < 2)
    throw std::invalid_argument("inversion_pair: need at least 2 components");
  if (!(spec.core_weight >= 0.0 && spec.core_weight < 1.0))
    throw std::invalid_argument("inversion_pair: core_weight must be in [0, 1)");
  if (spec.core_weight > 0.0 && !(spec.core_sigma > 0.0))
    throw std::invalid_argument("inversion_pair: core_sigma must be > 0");

  // Orthonormal ring plane: difference directions for d >= 4 (every mean has
  // zero coordinate sum, so the all-ones diagonal stays orthogonal to the
  // ring), plain axes otherwise.
  std::vector<double> u(d, 0.0), v(d, 0.0);
  if (d >= 4) {
    const double s = 1.0 / std::sqrt(2.0);
    u[0] = s; u[1] = -s;
    v[2] = s; v[3] = -s;
  } else {
    u[0] = 1.0;
    v[1] = 1.0;
  }

  std::vector<ComponentSpec> comps(spec.ring_components);
  const double w =
      (1.0 - spec.core_weight) / static_cast<double>(spec.ring_components);
  for (std::size_t k = 0; k < spec.ring_components; ++k) {
    double theta = 2.0 * 3.14159265358979323846 * static_cast<double>(k) /
                   static_cast<double>(spec.ring_components);
    comps[k].weight = w;
    comps[k].mean.resize(d);
    comps[k].var.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
      comps[k].mean[j] =
          spec.ring_radius * (std::cos(theta) * u[j] + std::sin(theta) * v[j]);
      bool plane_dim = (d >= 4) ? (j < 4) : (j < 2);
      double s = plane_dim ? spec.sigma_plane : spec.sigma_perp;
      comps[k].var[j] = s * s;
    }
  }
  if (spec.core_weight > 0.0) {
    ComponentSpec core;
    core.weight = spec.core_weight;
    core.mean.assign(d, 0.0);
    core.var.assign(d, spec.core_sigma * spec.core_sigma);
    comps.push_back(core);
  }
  return comps;
}

ComponentSpec inversion_ood_component(const SyntheticDatasetSpec& spec) {
  const std::size_t d = spec.dim;
  ComponentSpec c;
  c.weight = 1.0;
  if (!spec.ood_mean.empty()) {
    if (spec.ood_mean.size() != d)
      throw std::invalid_argument("inversion_pair: ood_mean dim mismatch");
    c.mean = spec.ood_mean;
  } else {
    c.mean.assign(d, spec.ood_offset / std::sqrt(static_cast<double>(d)));
  }
  double s = spec.ood_broad ? spec.ood_broad_sigma : spec.ood_sigma;
  c.var.assign(d, s * s);
  return c;
}

double mixture_logpdf(const std::vector<ComponentSpec>& components, const double* x) {
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(components.size());
  for (std::size_t k = 0; k < components.size(); ++k) {
    terms[k] = std::log(components[k].weight) + component_logpdf(components[k], x);
    best = std::max(best, terms[k]);
  }
  if (!std::isfinite(best)) return best;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - best);
  return best + std::log(s);
}

double mixture_entropy_mc(const std::vector<ComponentSpec>& components,
                          std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("mixture_entropy_mc: n must be positive");
  check_components(components, components.front().mean.size(),
                   "mixture_entropy_mc");
  Rng rng(seed ^ fnv1a64("mixture_entropy"), 0);
  Matrix samples;
  sample_mixture(components, samples, n, rng);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    sum += mixture_logpdf(components, samples.row(i));
  return -sum / static_cast<double>(n);
}

GeneratedData generate(const SyntheticDatasetSpec& spec) {
  GeneratedData out;
  switch (spec.kind) {
    case DatasetKind::gaussian: {
      if (spec.components.size() != 1)
        throw std::invalid_argument("generate: gaussian kind needs exactly 1 component");
      check_components(spec.components, spec.dim, "generate");
      Rng train_rng = Rng::for_sample(spec.seed, "data.train", 0);
      Rng test_rng = Rng::for_sample(spec.seed, "data.test", 0);
      sample_mixture(spec.components, out.train, spec.n_train, train_rng);
      sample_mixture(spec.components, out.test, spec.n_test, test_rng);
      break;
    }
    case DatasetKind::gaussian_mixture: {
      check_components(spec.components, spec.dim, "generate");
      Rng train_rng = Rng::for_sample(spec.seed, "data.train", 0);
      Rng test_rng = Rng::for_sample(spec.seed, "data.test", 0);
      sample_mixture(spec.components, out.train, spec.n_train, train_rng);
      sample_mixture(spec.components, out.test, spec.n_test, test_rng);
      break;
    }
    case DatasetKind::inversion_pair: {
      auto id_comps = inversion_id_components(spec);
      check_components(id_comps, spec.dim, "generate");
      auto ood = inversion_ood_component(spec);
      Rng train_rng = Rng::for_sample(spec.seed, "data.train", 0);
      Rng test_rng = Rng::for_sample(spec.seed, "data.test", 0);
      Rng ood_rng = Rng::for_sample(spec.seed, "data.ood", 0);
      sample_mixture(id_comps, out.train, spec.n_train, train_rng);
      sample_mixture(id_comps, out.test, spec.n_test, test_rng);
      sample_mixture({ood}, out.ood, spec.n_test, ood_rng);
      break;
    }
  }
  return out;
}

Matrix dequantize(const Matrix& x_quantized, const DequantConfig& cfg) {
  Matrix out(x_quantized.rows, x_quantized.cols);
  for (std::size_t i = 0; i < x_quantized.rows; ++i) {
    Rng rng = Rng::for_sample(cfg.seed, "data.dequant", i);
    const double* src = x_quantized.row(i);
    double* dst = out.row(i);
    for (std::size_t j = 0; j < x_quantized.cols; ++j) {
      if (src[j] < 0.0 || src[j] > 1.0)
        throw std::invalid_argument("dequantize: inputs must lie in [0,1]");
      dst[j] = src[j] + cfg.bin_width * rng.uniform();
    }
  }
  return out;
}

std::vector<std::uint8_t> quantize(const double* x, std::size_t d) {
  std::vector<std::uint8_t> out(d);
  for (std::size_t j = 0; j < d; ++j) {
    double v = std::clamp(x[j], 0.0, 1.0) * 255.0;
    out[j] = round_half_even(v);
  }
  return out;
}

std::vector<std::uint8_t> quantize_row(const Matrix& m, std::size_t i) {
  return quantize(m.row(i), m.cols);
}

void save_csv(const std::filesystem::path& path, const Matrix& batch,
              const std::vector<std::string>& split) {
  if (!split.empty() && split.size() != batch.rows)
    throw std::invalid_argument("save_csv: split length mismatch");
  AtomicFileWriter writer(path);
  auto& os = writer.stream();
  for (std::size_t j = 0; j < batch.cols; ++j) {
    if (j) os << ',';
    os << "col_" << j;
  }
  if (!split.empty()) os << ",split";
  os << '\n';
  for (std::size_t i = 0; i < batch.rows; ++i) {
    const double* row = batch.row(i);
    for (std::size_t j = 0; j < batch.cols; ++j) {
      if (j) os << ',';
      os << format_double(row[j]);
    }
    if (!split.empty()) os << ',' << split[i];
    os << '\n';
  }
  writer.commit();
}

void save_csv(const std::filesystem::path& path, const GeneratedData& data) {
  std::size_t d = data.train.cols ? data.train.cols
                                  : (data.test.cols ? data.test.cols : data.ood.cols);
  Matrix all(data.train.rows + data.test.rows + data.ood.rows, d);
  std::vector<std::string> split;
  split.reserve(all.rows);
  std::size_t r = 0;
  for (std::size_t i = 0; i < data.train.rows; ++i, ++r) {
    std::copy_n(data.train.row(i), d, all.row(r));
    split.push_back("train");
  }
  for (std::size_t i = 0; i < data.test.rows; ++i, ++r) {
    std::copy_n(data.test.row(i), d, all.row(r));
    split.push_back("test");
  }
  for (std::size_t i = 0; i < data.ood.rows; ++i, ++r) {
    std::copy_n(data.ood.row(i), d, all.row(r));
    split.push_back("ood");
  }
  save_csv(path, all, split);
}

CsvTable load_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open csv: " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("csv missing header row: " + path.string());
  std::stringstream header(line);
  std::string cell;
  while (std::getline(header, cell, ',')) table.columns.push_back(cell);
  bool has_split = !table.columns.empty() && table.columns.back() == "split";
  std::size_t d = table.columns.size() - (has_split ? 1 : 0);
  if (d == 0) throw std::runtime_error("csv has no value columns: " + path.string());

  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::size_t start = 0, field = 0;
    std::string context = path.string() + " line " + std::to_string(line_no);
    while (true) {
      std::size_t comma = line.find(',', start);
      std::string_view token(line.data() + start,
                             (comma == std::string::npos ? line.size() : comma) - start);
      if (field < d) {
        values.push_back(parse_double(token, context.c_str()));
      } else if (has_split && field == d) {
        table.split.emplace_back(token);
      } else {
        throw std::runtime_error("too many fields in " + context);
      }
      ++field;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (field != table.columns.size())
      throw std::runtime_error("wrong field count in " + context);
  }
  table.values = Matrix(values.size() / d, d);
  table.values.data = std::move(values);
  return table;
}

GeneratedData regroup(const CsvTable& table) {
  GeneratedData out;
  if (table.split.empty()) {
    out.train = table.values;
    return out;
  }
  std::size_t d = table.values.cols;
  std::vector<std::size_t> counts(3, 0);
  auto bucket = [](const std::string& s) -> int {
    if (s == "train") return 0;
    if (s == "test") return 1;
    if (s == "ood") return 2;
    throw std::runtime_error("unknown split label: " + s);
  };
  for (const auto& s : table.split) ++counts[bucket(s)];
  out.train = Matrix(counts[0], d);
  out.test = Matrix(counts[1], d);
  out.ood = Matrix(counts[2], d);
  std::vector<std::size_t> fill(3, 0);
  for (std::size_t i = 0; i < table.values.rows; ++i) {
    int b = bucket(table.split[i]);
    Matrix& m = (b == 0) ? out.train : (b == 1) ? out.test : out.ood;
    std::copy_n(table.values.row(i), d, m.row(fill[b]++));
  }
  return out;
}

}  // namespace spem
