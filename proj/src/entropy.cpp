#include "spem/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <queue>
#include <stdexcept>

namespace spem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)
constexpr double kEpsFloor = 1e-12;

void check_spec(const GaussianSpec& g, const char* who) {
  if (g.mean.empty() || g.mean.size() != g.var.size())
    throw std::invalid_argument(std::string(who) + ": inconsistent Gaussian spec");
  for (double v : g.var)
    if (!(v > 0.0))
      throw std::invalid_argument(std::string(who) +
                                  ": variances must be strictly positive");
}

// Fixed-leaf KD-tree over sample rows, used only for k-NN distances.
class KdTree {
 public:
  explicit KdTree(const Matrix& pts) : pts_(pts) {
    idx_.resize(pts.rows);
    for (std::size_t i = 0; i < pts.rows; ++i) idx_[i] = i;
    nodes_.reserve(2 * pts.rows / kLeaf + 2);
    root_ = build(0, pts.rows);
  }

  // Squared distance from pts.row(q) to its k-th nearest neighbor, q excluded.
  double kth_sq_distance(std::size_t q, int k) const {
    std::priority_queue<double> heap;  // max-heap of best k squared distances
    search(root_, q, k, heap);
    return heap.top();
  }

 private:
  static constexpr std::size_t kLeaf = 16;

  struct Node {
    int left = -1, right = -1;
    std::size_t begin = 0, end = 0;  // leaf range in idx_
    int dim = -1;
    double split = 0.0;
  };

  int build(std::size_t begin, std::size_t end) {
    Node node;
    node.begin = begin;
    node.end = end;
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeaf) return id;

    // Split the widest dimension at its median.
    int dim = 0;
    double best_spread = -1.0;
    for (std::size_t j = 0; j < pts_.cols; ++j) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i = begin; i < end; ++i) {
        double v = pts_.at(idx_[i], j);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > best_spread) {
        best_spread = hi - lo;
        dim = static_cast<int>(j);
      }
    }
    if (best_spread <= 0.0) return id;  // all points identical: keep as leaf

    std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       return pts_.at(a, dim) < pts_.at(b, dim);
                     });
    nodes_[id].dim = dim;
    nodes_[id].split = pts_.at(idx_[mid], dim);
    int left = build(begin, mid);
    int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void scan_leaf(const Node& node, std::size_t q, int k,
                 std::priority_queue<double>& heap) const {
    const double* xq = pts_.row(q);
    for (std::size_t i = node.begin; i < node.end; ++i) {
      std::size_t p = idx_[i];
      if (p == q) continue;
      double d2 = squared_distance(xq, pts_.row(p), pts_.cols);
      if (heap.size() < static_cast<std::size_t>(k))
        heap.push(d2);
      else if (d2 < heap.top()) {
        heap.pop();
        heap.push(d2);
      }
    }
  }

  void search(int id, std::size_t q, int k, std::priority_queue<double>& heap) const {
    const Node& node = nodes_[id];
    if (node.dim < 0) {
      scan_leaf(node, q, k, heap);
      return;
    }
    double diff = pts_.at(q, node.dim) - node.split;
    int near = diff < 0.0 ? node.left : node.right;
    int far = diff < 0.0 ? node.right : node.left;
    search(near, q, k, heap);
    if (heap.size() < static_cast<std::size_t>(k) || diff * diff < heap.top())
      search(far, q, k, heap);
  }

  const Matrix& pts_;
  std::vector<std::size_t> idx_;
  std::vector<Node> nodes_;
  int root_ = 0;
};

}  // namespace

GaussianSpec GaussianSpec::isotropic(std::size_t d, double variance,
                                     double mean_value) {
  GaussianSpec g;
  g.mean.assign(d, mean_value);
  g.var.assign(d, variance);
  check_spec(g, "GaussianSpec::isotropic");
  return g;
}

GaussianSpec GaussianSpec::diagonal(std::vector<double> mean,
                                    std::vector<double> var) {
  GaussianSpec g;
  g.mean = std::move(mean);
  g.var = std::move(var);
  check_spec(g, "GaussianSpec::diagonal");
  return g;
}

GaussianSpec GaussianSpec::convolved(double noise_var) const {
  if (noise_var < 0.0)
    throw std::invalid_argument("convolved: noise variance must be >= 0");
  GaussianSpec g = *this;
  for (double& v : g.var) v += noise_var;
  return g;
}

double gaussian_entropy(const GaussianSpec& g) {
  check_spec(g, "gaussian_entropy");
  double h = 0.0;
  for (double v : g.var) h += 0.5 * (kLog2Pi + 1.0 + std::log(v));
  return h;
}

double entropy_power(double entropy_nats, std::size_t d) {
  if (d == 0) throw std::invalid_argument("entropy_power: d must be positive");
  return std::exp(2.0 * entropy_nats / static_cast<double>(d)) /
         (2.0 * std::numbers::pi * std::numbers::e);
}

double kl_gaussians(const GaussianSpec& p, const GaussianSpec& q) {
  check_spec(p, "kl_gaussians");
  check_spec(q, "kl_gaussians");
  if (p.dim() != q.dim())
    throw std::invalid_argument("kl_gaussians: dimension mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    double dm = p.mean[i] - q.mean[i];
    kl += 0.5 * (p.var[i] / q.var[i] + dm * dm / q.var[i] - 1.0 +
                 std::log(q.var[i] / p.var[i]));
  }
  return kl;
}

double gaussian_logpdf(const GaussianSpec& g, const double* x) {
  double lp = 0.0;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    double dm = x[i] - g.mean[i];
    lp -= 0.5 * (kLog2Pi + std::log(g.var[i]) + dm * dm / g.var[i]);
  }
  return lp;
}

double expected_gaussian_loglik(const GaussianSpec& p, const GaussianSpec& q) {
  return -gaussian_entropy(p) - kl_gaussians(p, q);
}

Matrix sample_gaussian(const GaussianSpec& g, std::size_t n, Rng& rng) {
  check_spec(g, "sample_gaussian");
  Matrix out(n, g.dim());
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.row(i);
    for (std::size_t j = 0; j < g.dim(); ++j)
      row[j] = g.mean[j] + std::sqrt(g.var[j]) * rng.normal();
  }
  return out;
}

double knn_entropy(const Matrix& samples, int k) {
  const std::size_t n = samples.rows;
  const std::size_t d = samples.cols;
  if (k < 1) throw std::invalid_argument("knn_entropy: k must be >= 1");
  if (d == 0 || n <= static_cast<std::size_t>(k))
    throw std::invalid_argument("knn_entropy: need more samples than k");

  KdTree tree(samples);
  double sum_log_eps = 0.0;
  bool warned = false;
  for (std::size_t i = 0; i < n; ++i) {
    double eps = std::sqrt(tree.kth_sq_distance(i, k));
    if (eps < kEpsFloor) {
      if (!warned) {
        std::fprintf(stderr,
                     "knn_entropy: duplicate or near-duplicate samples, "
                     "flooring neighbor distance at %g\n",
                     kEpsFloor);
        warned = true;
      }
      eps = kEpsFloor;
    }
    sum_log_eps += std::log(eps);
  }
  return digamma(static_cast<double>(n)) - digamma(static_cast<double>(k)) +
         log_unit_ball_volume(d) +
         static_cast<double>(d) / static_cast<double>(n) * sum_log_eps;
}

McEstimate mc_expected_loglik(
    const std::function<std::vector<double>(Rng&)>& sampler,
    const std::function<double(const std::vector<double>&)>& log_density,
    std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("mc_expected_loglik: n must be positive");
  Rng rng(seed, /*stream=*/0);
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double v = log_density(sampler(rng));
    sum += v;
    sumsq += v * v;
  }
  McEstimate est;
  est.n = n;
  est.mean = sum / static_cast<double>(n);
  if (n == 1) {
    est.std_error = std::numeric_limits<double>::infinity();
  } else {
    double var = (sumsq - sum * sum / static_cast<double>(n)) /
                 static_cast<double>(n - 1);
    est.std_error = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
  }
  return est;
}

double w2_isotropic(double sigma1, double sigma2, std::size_t d) {
  if (sigma1 < 0.0 || sigma2 < 0.0)
    throw std::invalid_argument("w2_isotropic: sigmas must be >= 0");
  return std::sqrt(static_cast<double>(d)) * std::fabs(sigma1 - sigma2);
}

double w2_diagonal(const GaussianSpec& p, const GaussianSpec& q) {
  check_spec(p, "w2_diagonal");
  check_spec(q, "w2_diagonal");
  if (p.dim() != q.dim())
    throw std::invalid_argument("w2_diagonal: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    double dm = p.mean[i] - q.mean[i];
    double ds = std::sqrt(p.var[i]) - std::sqrt(q.var[i]);
    s += dm * dm + ds * ds;
  }
  return std::sqrt(s);
}

// Recurrence down to x >= 6, then the asymptotic Bernoulli expansion.
double digamma(double x) {
  if (!(x > 0.0)) throw std::invalid_argument("digamma: x must be positive");
  double result = 0.0;
  while (x < 12.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  double inv = 1.0 / x, inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 -
                    inv2 * (1.0 / 240.0))));
  return result;
}

double log_unit_ball_volume(std::size_t d) {
  double dd = static_cast<double>(d);
  return 0.5 * dd * std::log(std::numbers::pi) - std::lgamma(0.5 * dd + 1.0);
}

}  // namespace spem
