#include "spem/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "spem/binio.hpp"
#include "spem/rng.hpp"
#include "spem/textio.hpp"

namespace spem {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'E', 'M', 'B', 'A', 'N', 'K'};
constexpr std::uint32_t kFormatVersion = 1;

void hash_bytes(std::uint64_t& h, const void* data, std::size_t len) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

void jacobi_eigen(Matrix a, std::vector<double>& eigenvalues,
                  Matrix& eigenvectors_rows) {
  require(a.rows == a.cols && a.rows > 0, "jacobi_eigen: square matrix required");
  const std::size_t d = a.rows;
  Matrix v(d, d);
  for (std::size_t i = 0; i < d; ++i) v.at(i, i) = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-26 * static_cast<double>(d * d)) break;

    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        double apq = a.at(p, q);
        if (apq == 0.0) continue;
        double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - s * vkq;
          v.at(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a.at(i, i) > a.at(j, j); });

  eigenvalues.resize(d);
  eigenvectors_rows = Matrix(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    std::size_t col = order[r];
    eigenvalues[r] = a.at(col, col);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < d; ++k)
      if (std::fabs(v.at(k, col)) > std::fabs(v.at(arg, col))) arg = k;
    double sign = (v.at(arg, col) < 0.0) ? -1.0 : 1.0;
    for (std::size_t k = 0; k < d; ++k)
      eigenvectors_rows.at(r, k) = sign * v.at(k, col);
  }
}

Embedder fit_embedder(const Matrix& id_data, EmbedderKind kind,
                      std::size_t out_dim, std::uint64_t seed) {
  require(id_data.rows > 0, "fit_embedder: empty data");
  require(out_dim > 0, "fit_embedder: out_dim must be positive");
  const std::size_t d = id_data.cols;

  Embedder e;
  e.kind = kind;
  e.in_dim = d;
  e.out_dim = out_dim;
  switch (kind) {
    case EmbedderKind::identity:
      require(out_dim == d, "fit_embedder: identity requires out_dim == in_dim");
      break;
    case EmbedderKind::random_projection: {
      e.projection = Matrix(out_dim, d);
      Rng rng(seed ^ fnv1a64("embed.random_projection"), 0);
      double stddev = 1.0 / std::sqrt(static_cast<double>(out_dim));
      for (auto& w : e.projection.data) w = rng.normal(0.0, stddev);
      break;
    }
    case EmbedderKind::pca: {
      require(out_dim <= d, "fit_embedder: pca requires out_dim <= in_dim");
      e.mean.assign(d, 0.0);
      for (std::size_t i = 0; i < id_data.rows; ++i)
        for (std::size_t j = 0; j < d; ++j) e.mean[j] += id_data.at(i, j);
      for (auto& m : e.mean) m /= static_cast<double>(id_data.rows);

      Matrix cov(d, d);
      for (std::size_t i = 0; i < id_data.rows; ++i)
        for (std::size_t p = 0; p < d; ++p) {
          double dp = id_data.at(i, p) - e.mean[p];
          for (std::size_t q = p; q < d; ++q)
            cov.at(p, q) += dp * (id_data.at(i, q) - e.mean[q]);
        }
      double denom = static_cast<double>(id_data.rows > 1 ? id_data.rows - 1 : 1);
      for (std::size_t p = 0; p < d; ++p)
        for (std::size_t q = p; q < d; ++q) {
          cov.at(p, q) /= denom;
          cov.at(q, p) = cov.at(p, q);
        }

      std::vector<double> eigenvalues;
      Matrix vectors;
      jacobi_eigen(cov, eigenvalues, vectors);
      e.components = Matrix(out_dim, d);
      for (std::size_t r = 0; r < out_dim; ++r)
        std::copy_n(vectors.row(r), d, e.components.row(r));
      break;
    }
  }
  return e;
}

std::vector<double> embed(const Embedder& e, const double* x) {
  std::vector<double> out(e.out_dim);
  switch (e.kind) {
    case EmbedderKind::identity:
      std::copy_n(x, e.out_dim, out.begin());
      break;
    case EmbedderKind::random_projection:
      for (std::size_t r = 0; r < e.out_dim; ++r)
        out[r] = dot(e.projection.row(r), x, e.in_dim);
      break;
    case EmbedderKind::pca: {
      std::vector<double> centered(e.in_dim);
      for (std::size_t j = 0; j < e.in_dim; ++j) centered[j] = x[j] - e.mean[j];
      for (std::size_t r = 0; r < e.out_dim; ++r)
        out[r] = dot(e.components.row(r), centered.data(), e.in_dim);
      break;
    }
  }
  return out;
}

std::vector<double> embed(const Embedder& e, const std::vector<double>& x) {
  require(x.size() == e.in_dim, "embed: input dim mismatch");
  return embed(e, x.data());
}

std::vector<double> reconstruct(const Embedder& e, const std::vector<double>& y) {
  require(y.size() == e.out_dim, "reconstruct: embedding dim mismatch");
  switch (e.kind) {
    case EmbedderKind::identity:
      return y;
    case EmbedderKind::pca: {
      std::vector<double> x = e.mean;
      for (std::size_t r = 0; r < e.out_dim; ++r)
        for (std::size_t j = 0; j < e.in_dim; ++j)
          x[j] += y[r] * e.components.at(r, j);
      return x;
    }
    case EmbedderKind::random_projection:
      throw std::invalid_argument("reconstruct: unsupported for random_projection");
  }
  throw std::logic_error("reconstruct: unknown embedder kind");
}

std::uint64_t embedder_fingerprint(const Embedder& e) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::uint8_t kind = static_cast<std::uint8_t>(e.kind);
  hash_bytes(h, &kind, 1);
  std::uint64_t dims[2] = {e.in_dim, e.out_dim};
  hash_bytes(h, dims, sizeof(dims));
  hash_bytes(h, e.projection.data.data(), e.projection.data.size() * sizeof(double));
  hash_bytes(h, e.mean.data(), e.mean.size() * sizeof(double));
  hash_bytes(h, e.components.data.data(), e.components.data.size() * sizeof(double));
  return h;
}

double calibrate_react(const Embedder& e, const Matrix& id_data, double p,
                       std::size_t sample_count, std::uint64_t seed) {
  require(id_data.rows > 0, "calibrate_react: empty data");
  require(id_data.cols == e.in_dim, "calibrate_react: dim mismatch");
  require(p > 0.0 && p < 1.0, "calibrate_react: p must lie in (0, 1)");
  require(sample_count > 0, "calibrate_react: sample_count must be positive");

  std::vector<std::size_t> chosen;
  const std::size_t n = id_data.rows;
  if (n <= sample_count) {
    chosen.resize(n);
    std::iota(chosen.begin(), chosen.end(), 0);
  } else {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    Rng rng(seed ^ fnv1a64("react.sample"), 0);
    for (std::size_t i = 0; i < sample_count; ++i) {
      std::size_t j = i + rng.uniform_index(n - i);
      std::swap(pool[i], pool[j]);
    }
    chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(sample_count));
  }

  std::vector<double> pooled;
  pooled.reserve(chosen.size() * e.out_dim);
  for (std::size_t idx : chosen) {
    auto h = embed(e, id_data.row(idx));
    pooled.insert(pooled.end(), h.begin(), h.end());
  }
  std::sort(pooled.begin(), pooled.end());
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(p * static_cast<double>(pooled.size())));
  rank = std::max<std::size_t>(1, std::min(rank, pooled.size()));
  return pooled[rank - 1];
}

std::vector<double> rectify(std::vector<double> v, double beta) {
  for (auto& x : v) x = std::min(x, beta);
  return v;
}

MemoryBank build_memory_bank(const Matrix& id_data, const Embedder& e,
                             const ReActConfig& react) {
  require(id_data.rows > 0, "build_memory_bank: empty data");
  require(id_data.cols == e.in_dim, "build_memory_bank: dim mismatch");
  if (!std::isfinite(react.beta))
    throw std::invalid_argument("build_memory_bank: beta not calibrated");

  MemoryBank bank;
  bank.dim = e.out_dim;
  bank.beta = react.beta;
  bank.fingerprint = embedder_fingerprint(e);

  std::vector<double> kept;
  kept.reserve(id_data.rows * e.out_dim);
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < id_data.rows; ++i) {
    auto h = rectify(embed(e, id_data.row(i)), react.beta);
    double n = norm(h.data(), h.size());
    if (n == 0.0) {
      ++dropped;
      continue;
    }
    kept.insert(kept.end(), h.begin(), h.end());
    bank.norms.push_back(n);
  }
  if (dropped > 0)
    std::fprintf(stderr,
                 "build_memory_bank: dropped %zu zero-norm embedding(s)\n",
                 dropped);
  if (bank.norms.empty())
    throw std::runtime_error("build_memory_bank: all embeddings have zero norm");
  bank.rows = Matrix(bank.norms.size(), bank.dim);
  bank.rows.data = std::move(kept);
  return bank;
}

double max_cosine_similarity(const MemoryBank& bank,
                             const std::vector<double>& h_test) {
  require(h_test.size() == bank.dim, "max_cosine_similarity: dim mismatch");
  require(bank.rows.rows > 0, "max_cosine_similarity: empty bank");
  double test_norm = norm(h_test.data(), h_test.size());
  if (test_norm == 0.0) return 0.0;
  double best = -1.0;
  for (std::size_t i = 0; i < bank.rows.rows; ++i) {
    double cos = dot(bank.rows.row(i), h_test.data(), bank.dim) /
                 (bank.norms[i] * test_norm);
    best = std::max(best, cos);
  }
  return std::clamp(best, -1.0, 1.0);
}

void save_bank(const MemoryBank& bank, const std::filesystem::path& path) {
  AtomicFileWriter writer(path, std::ios::out | std::ios::binary);
  auto& os = writer.stream();
  write_magic(os, kMagic);
  write_u32(os, kFormatVersion);
  write_u64(os, bank.dim);
  write_u64(os, bank.rows.rows);
  write_f64(os, bank.beta);
  write_u64(os, bank.fingerprint);
  for (double v : bank.rows.data) write_f64(os, v);
  writer.commit();
}

MemoryBank load_bank(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open bank file: " + path.string());
  expect_magic(is, kMagic, "memory bank");
  std::uint32_t version = read_u32(is, "format version");
  if (version != kFormatVersion)
    throw std::runtime_error("unsupported bank format version " +
                             std::to_string(version));
  MemoryBank bank;
  bank.dim = read_u64(is, "dim");
  std::size_t n = read_u64(is, "row count");
  bank.beta = read_f64(is, "beta");
  bank.fingerprint = read_u64(is, "fingerprint");
  if (bank.dim == 0 || bank.dim > (1u << 20) || n == 0 || n > (1u << 28))
    throw std::runtime_error("corrupt bank header: " + path.string());
  bank.rows = Matrix(n, bank.dim);
  for (auto& v : bank.rows.data) v = read_f64(is, "bank row");
  bank.norms.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    bank.norms[i] = norm(bank.rows.row(i), bank.dim);
  return bank;
}

MemoryBank load_bank(const std::filesystem::path& path, const Embedder& e) {
  MemoryBank bank = load_bank(path);
  if (bank.fingerprint != embedder_fingerprint(e))
    throw std::runtime_error(
        "bank was built with a different embedder (fingerprint mismatch): " +
        path.string());
  return bank;
}

}  // namespace spem
