#include "spem/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kLn2 = 0.6931471805599453094;
constexpr double kRidge = 1e-6;

// Lower-triangular Cholesky factor; returns false when the matrix is not
// positive-definite.
bool cholesky(const Matrix& a, Matrix& l) {
  const std::size_t d = a.rows;
  l = Matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (s <= 0.0) return false;
        l.at(i, i) = std::sqrt(s);
      } else {
        l.at(i, j) = s / l.at(j, j);
      }
    }
  }
  return true;
}

// log N(x; mean, cov) via the Cholesky factor of cov.
double gaussian_full_logpdf(const std::vector<double>& mean, const Matrix& chol,
                            const double* x) {
  const std::size_t d = mean.size();
  std::vector<double> y(d);
  double log_det = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double s = x[i] - mean[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol.at(i, k) * y[k];
    y[i] = s / chol.at(i, i);
    log_det += 2.0 * std::log(chol.at(i, i));
  }
  return -0.5 * (static_cast<double>(d) * kLog2Pi + log_det +
                 squared_norm(y.data(), d));
}

struct PreparedGmm {
  std::vector<Matrix> chol;
  std::vector<double> log_weight;
};

PreparedGmm prepare(const GmmModel& gmm) {
  PreparedGmm p;
  for (const auto& c : gmm.components) {
    Matrix l;
    Matrix cov = c.cov;
    if (!cholesky(cov, l)) {
      for (std::size_t i = 0; i < cov.rows; ++i) cov.at(i, i) += kRidge;
      if (!cholesky(cov, l))
        throw std::runtime_error("gmm: covariance not positive-definite");
    }
    p.chol.push_back(std::move(l));
    p.log_weight.push_back(std::log(c.weight));
  }
  return p;
}

double logsumexp(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double likelihood_score(const FlowModel& model, const double* x) {
  return -log_likelihood(model, x);
}

std::size_t compress_length_bits(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty())
    throw std::invalid_argument("compress_length_bits: empty input");
  uLongf bound = compressBound(static_cast<uLong>(bytes.size()));
  std::vector<Bytef> out(bound);
  int rc = compress2(out.data(), &bound, bytes.data(),
                     static_cast<uLong>(bytes.size()), 9);
  if (rc != Z_OK)
    throw std::runtime_error("compress_length_bits: deflate failed, rc=" +
                             std::to_string(rc));
  return static_cast<std::size_t>(bound) * 8;
}

std::string codec_id() {
  return std::string("deflate-zlib-") + zlibVersion() + "-l9";
}

double complexity_score(const FlowModel& model, const double* x,
                        const std::vector<std::uint8_t>& x_quantized) {
  double loglik_bits = log_likelihood(model, x) / kLn2;
  return -loglik_bits - static_cast<double>(compress_length_bits(x_quantized));
}

double typicality_latent_score(const FlowModel& model, const double* x,
                               bool use_d_variant) {
  auto f = forward(model, x);
  double q = squared_norm(f.z.data(), f.z.size());
  double target = use_d_variant ? static_cast<double>(model.dim)
                                : std::sqrt(static_cast<double>(model.dim));
  return std::fabs(target - q);
}

double mean_train_loglik(const FlowModel& model, const Matrix& id_train) {
  return -mean_nll(model, id_train);
}

double typicality_entropy_score(const FlowModel& model, double cached_mean_loglik,
                                const double* x) {
  return std::fabs(cached_mean_loglik - log_likelihood(model, x));
}

Matrix corrupt_data(const Matrix& id_data, const BackgroundConfig& bg) {
  require(bg.mu >= 0.0 && bg.mu <= 1.0, "corrupt_data: mu must lie in [0,1]");
  double lo = bg.range_lo, hi = bg.range_hi;
  if (lo == hi) {
    lo = std::numeric_limits<double>::infinity();
    hi = -std::numeric_limits<double>::infinity();
    for (double v : id_data.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  require(lo < hi, "corrupt_data: degenerate replacement range");

  Matrix out = id_data;
  for (std::size_t i = 0; i < out.rows; ++i) {
    Rng rng = Rng::for_sample(bg.train.seed, "background.corrupt", i);
    double* row = out.row(i);
    for (std::size_t j = 0; j < out.cols; ++j) {
      double mask_u = rng.uniform();      // uniform() < 1, so mu = 1 replaces all
      double draw = rng.uniform(lo, hi);  // always consumed: mask-independent draws
      if (mask_u < bg.mu) row[j] = draw;
    }
  }
  return out;
}

FlowModel train_background_model(const Matrix& id_data, const BackgroundConfig& bg) {
  Matrix corrupted = corrupt_data(id_data, bg);
  FlowModel init = make_flow(id_data.cols, bg.n_layers, bg.hidden, bg.train.seed);
  return train(corrupted, init, bg.train).model;
}

double likelihood_ratio_score(const FlowModel& model, const FlowModel& bg_model,
                              const double* x) {
  return -(log_likelihood(model, x) - log_likelihood(bg_model, x));
}

GmmFit fit_gmm(const Matrix& points, std::size_t k, std::uint64_t seed) {
  require(k > 0, "fit_gmm: k must be positive");
  require(points.rows >= 10 * k, "fit_gmm: need at least 10*k points");
  const std::size_t n = points.rows, d = points.cols;

  // k-means++-style seeding: squared-distance-weighted center choices.
  Rng rng(seed ^ fnv1a64("gmm.init"), 0);
  std::vector<std::size_t> centers;
  centers.push_back(rng.uniform_index(n));
  std::vector<double> dist2(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d2 = squared_distance(points.row(i), points.row(centers.back()), d);
      dist2[i] = std::min(dist2[i], d2);
      total += dist2[i];
    }
    std::size_t next = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total, acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist2[i];
        if (u < acc) {
          next = i;
          break;
        }
      }
    } else {
      next = rng.uniform_index(n);  // all points coincide
    }
    centers.push_back(next);
  }

  // Shared initial covariance: global second moment plus ridge.
  std::vector<double> grand_mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) grand_mean[j] += points.at(i, j);
  for (auto& m : grand_mean) m /= static_cast<double>(n);
  Matrix global_cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = 0; q < d; ++q)
        global_cov.at(p, q) += (points.at(i, p) - grand_mean[p]) *
                               (points.at(i, q) - grand_mean[q]);
  for (auto& v : global_cov.data) v /= static_cast<double>(n);
  for (std::size_t p = 0; p < d; ++p) global_cov.at(p, p) += kRidge;

  GmmFit fit;
  fit.model.dim = d;
  fit.model.components.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    fit.model.components[c].weight = 1.0 / static_cast<double>(k);
    fit.model.components[c].mean = points.row_vec(centers[c]);
    fit.model.components[c].cov = global_cov;
  }

  std::vector<double> resp(n * k);
  std::vector<double> terms(k);
  bool warned_ridge = false;
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 100; ++iter) {
    PreparedGmm prep = prepare(fit.model);
    double loglik = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c)
        terms[c] = prep.log_weight[c] +
                   gaussian_full_logpdf(fit.model.components[c].mean,
                                        prep.chol[c], points.row(i));
      double lse = logsumexp(terms);
      loglik += lse;
      for (std::size_t c = 0; c < k; ++c) resp[i * k + c] = std::exp(terms[c] - lse);
    }
    loglik /= static_cast<double>(n);
    fit.trace.push_back(loglik);
    if (std::fabs(loglik - prev) < 1e-6) break;
    prev = loglik;

    for (std::size_t c = 0; c < k; ++c) {
      double rsum = 0.0;
      std::vector<double> mean(d, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double r = resp[i * k + c];
        rsum += r;
        for (std::size_t j = 0; j < d; ++j) mean[j] += r * points.at(i, j);
      }
      if (rsum <= 0.0) continue;  // dead component keeps its parameters
      for (auto& m : mean) m /= rsum;
      Matrix cov(d, d);
      for (std::size_t i = 0; i < n; ++i) {
        double r = resp[i * k + c];
        for (std::size_t p = 0; p < d; ++p)
          for (std::size_t q = 0; q < d; ++q)
            cov.at(p, q) += r * (points.at(i, p) - mean[p]) *
                            (points.at(i, q) - mean[q]);
      }
      for (auto& v : cov.data) v /= rsum;
      Matrix l;
      if (!cholesky(cov, l)) {
        for (std::size_t p = 0; p < d; ++p) cov.at(p, p) += kRidge;
        if (!warned_ridge) {
          std::fprintf(stderr, "fit_gmm: singular covariance, ridge added\n");
          warned_ridge = true;
        }
      }
      auto& comp = fit.model.components[c];
      comp.weight = rsum / static_cast<double>(n);
      comp.mean = std::move(mean);
      comp.cov = std::move(cov);
    }
  }
  return fit;
}

double gmm_logpdf(const GmmModel& gmm, const double* x) {
  require(!gmm.components.empty(), "gmm_logpdf: empty model");
  PreparedGmm prep = prepare(gmm);
  std::vector<double> terms(gmm.components.size());
  for (std::size_t c = 0; c < gmm.components.size(); ++c)
    terms[c] = prep.log_weight[c] +
               gaussian_full_logpdf(gmm.components[c].mean, prep.chol[c], x);
  return logsumexp(terms);
}

double gmm_score(const GmmModel& gmm, const double* x) {
  return -gmm_logpdf(gmm, x);
}

void save_gmm(const GmmModel& gmm, const std::filesystem::path& path) {
  AtomicFileWriter writer(path);
  auto& os = writer.stream();
  os << "spem-gmm v1\n";
  os << "dim " << gmm.dim << '\n';
  os << "components " << gmm.components.size() << '\n';
  for (const auto& c : gmm.components) {
    os << "weight " << format_double(c.weight) << '\n';
    os << "mean";
    for (double m : c.mean) os << ' ' << format_double(m);
    os << '\n';
    for (std::size_t r = 0; r < c.cov.rows; ++r) {
      os << "cov";
      for (std::size_t q = 0; q < c.cov.cols; ++q)
        os << ' ' << format_double(c.cov.at(r, q));
      os << '\n';
    }
  }
  writer.commit();
}

GmmModel load_gmm(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open gmm file: " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "spem-gmm v1")
    throw std::runtime_error("unsupported gmm file format: " + path.string());

  auto expect_keyword = [&](std::istringstream& ss, const char* kw) {
    std::string word;
    if (!(ss >> word) || word != kw)
      throw std::runtime_error(std::string("gmm file: expected '") + kw + "' in " +
                               path.string());
  };
  auto next_line = [&]() {
    if (!std::getline(is, line))
      throw std::runtime_error("gmm file truncated: " + path.string());
    return std::istringstream(line);
  };
  auto read_doubles = [&](std::istringstream& ss, std::size_t count) {
    std::vector<double> out(count);
    std::string tok;
    for (auto& v : out) {
      if (!(ss >> tok))
        throw std::runtime_error("gmm file: missing value in " + path.string());
      v = parse_double(tok, path.string().c_str());
    }
    return out;
  };

  GmmModel gmm;
  {
    auto ss = next_line();
    expect_keyword(ss, "dim");
    ss >> gmm.dim;
  }
  std::size_t k = 0;
  {
    auto ss = next_line();
    expect_keyword(ss, "components");
    ss >> k;
  }
  if (gmm.dim == 0 || k == 0)
    throw std::runtime_error("gmm file: bad header in " + path.string());
  gmm.components.resize(k);
  for (auto& c : gmm.components) {
    {
      auto ss = next_line();
      expect_keyword(ss, "weight");
      c.weight = read_doubles(ss, 1)[0];
    }
    {
      auto ss = next_line();
      expect_keyword(ss, "mean");
      c.mean = read_doubles(ss, gmm.dim);
    }
    c.cov = Matrix(gmm.dim, gmm.dim);
    for (std::size_t r = 0; r < gmm.dim; ++r) {
      auto ss = next_line();
      expect_keyword(ss, "cov");
      auto row = read_doubles(ss, gmm.dim);
      std::copy(row.begin(), row.end(), c.cov.row(r));
    }
  }
  return gmm;
}

}  // namespace spem
