#include "spem/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "spem/binio.hpp"
#include "spem/textio.hpp"

namespace spem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr char kMagic[8] = {'S', 'P', 'E', 'M', 'F', 'L', 'O', 'W'};
constexpr std::uint32_t kFormatVersion = 1;

void check_finite(const double* x, std::size_t d, const char* who) {
  for (std::size_t j = 0; j < d; ++j)
    if (!std::isfinite(x[j]))
      throw std::domain_error(std::string(who) + ": non-finite input coordinate");
}

void check_model(const FlowModel& m) {
  require(m.dim > 0, "flow: dim must be positive");
  require(m.scale_clamp > 0.0, "flow: scale clamp must be positive");
  for (const auto& layer : m.layers) {
    require(layer.mask.size() == m.dim, "flow: mask length mismatch");
    require(layer.w1.rows == m.hidden && layer.w1.cols == m.dim,
            "flow: w1 shape mismatch");
    require(layer.b1.size() == m.hidden, "flow: b1 shape mismatch");
    require(layer.w2.rows == 2 * m.dim && layer.w2.cols == m.hidden,
            "flow: w2 shape mismatch");
    require(layer.b2.size() == 2 * m.dim, "flow: b2 shape mismatch");
  }
}

// Per-layer quantities cached by the forward pass for backprop.
struct LayerCache {
  std::vector<double> x;  // layer input
  std::vector<double> h;  // hidden activations, tanh
  std::vector<double> s;  // clamped log-scales
  std::vector<double> t;  // shifts
};

// Runs the conditioner on u = x .* mask and applies the affine map in place.
// Returns the layer's log-det contribution.
double apply_layer(const FlowModel& m, const CouplingLayer& layer,
                   std::vector<double>& x, LayerCache* cache) {
  const std::size_t d = m.dim, hid = m.hidden;
  std::vector<double> u(d);
  for (std::size_t j = 0; j < d; ++j) u[j] = layer.mask[j] ? x[j] : 0.0;

  std::vector<double> h(hid);
  for (std::size_t r = 0; r < hid; ++r)
    h[r] = std::tanh(dot(layer.w1.row(r), u.data(), d) + layer.b1[r]);

  double log_det = 0.0;
  std::vector<double> s(d, 0.0), t(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    if (layer.mask[j]) continue;
    double s_raw = dot(layer.w2.row(j), h.data(), hid) + layer.b2[j];
    double shift = dot(layer.w2.row(d + j), h.data(), hid) + layer.b2[d + j];
    s[j] = m.scale_clamp * std::tanh(s_raw / m.scale_clamp);
    t[j] = shift;
    log_det += s[j];
  }
  if (cache) {
    cache->x = x;
    cache->h = std::move(h);
    cache->s = s;
    cache->t = t;
  }
  for (std::size_t j = 0; j < d; ++j)
    if (!layer.mask[j]) x[j] = x[j] * std::exp(s[j]) + t[j];
  return log_det;
}

std::size_t layer_param_count(const FlowModel& m) {
  return m.hidden * m.dim + m.hidden + 2 * m.dim * m.hidden + 2 * m.dim;
}

}  // namespace

FlowModel make_flow(std::size_t dim, std::size_t n_layers, std::size_t hidden,
                    std::uint64_t seed) {
  require(dim > 0, "make_flow: dim must be positive");
  require(n_layers > 0, "make_flow: need at least one layer");
  require(hidden > 0, "make_flow: hidden width must be positive");
  FlowModel m;
  m.dim = dim;
  m.hidden = hidden;
  m.layers.resize(n_layers);
  double w1_std = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t l = 0; l < n_layers; ++l) {
    auto& layer = m.layers[l];
    layer.mask.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) layer.mask[j] = ((j + l) % 2 == 0) ? 1 : 0;
    Rng rng = Rng::for_sample(seed, "flow.init", l);
    layer.w1 = Matrix(hidden, dim);
    for (auto& w : layer.w1.data) w = rng.normal(0.0, w1_std);
    layer.b1.assign(hidden, 0.0);
    layer.w2 = Matrix(2 * dim, hidden);  // zero: the layer starts as identity
    layer.b2.assign(2 * dim, 0.0);
  }
  return m;
}

ForwardResult forward(const FlowModel& model, const double* x) {
  check_model(model);
  check_finite(x, model.dim, "forward");
  ForwardResult out;
  out.z.assign(x, x + model.dim);
  for (const auto& layer : model.layers)
    out.log_det += apply_layer(model, layer, out.z, nullptr);
  return out;
}

std::vector<double> inverse(const FlowModel& model, const double* z) {
  check_model(model);
  check_finite(z, model.dim, "inverse");
  const std::size_t d = model.dim, hid = model.hidden;
  std::vector<double> x(z, z + d);
  std::vector<double> u(d), h(hid);
  for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
    const auto& layer = *it;
    // Pass-through coordinates are unchanged by the layer, so the conditioner
    // sees the same u in both directions.
    for (std::size_t j = 0; j < d; ++j) u[j] = layer.mask[j] ? x[j] : 0.0;
    for (std::size_t r = 0; r < hid; ++r)
      h[r] = std::tanh(dot(layer.w1.row(r), u.data(), d) + layer.b1[r]);
    for (std::size_t j = 0; j < d; ++j) {
      if (layer.mask[j]) continue;
      double s_raw = dot(layer.w2.row(j), h.data(), hid) + layer.b2[j];
      double shift = dot(layer.w2.row(d + j), h.data(), hid) + layer.b2[d + j];
      double s = model.scale_clamp * std::tanh(s_raw / model.scale_clamp);
      x[j] = (x[j] - shift) * std::exp(-s);
    }
  }
  return x;
}

double log_likelihood(const FlowModel& model, const double* x) {
  ForwardResult f = forward(model, x);
  double q = squared_norm(f.z.data(), model.dim);
  return -0.5 * q - 0.5 * static_cast<double>(model.dim) * kLog2Pi + f.log_det;
}

double log_likelihood(const FlowModel& model, const std::vector<double>& x) {
  require(x.size() == model.dim, "log_likelihood: dim mismatch");
  return log_likelihood(model, x.data());
}

double mean_nll(const FlowModel& model, const Matrix& data) {
  require(data.rows > 0, "mean_nll: empty batch");
  require(data.cols == model.dim, "mean_nll: dim mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < data.rows; ++i) s -= log_likelihood(model, data.row(i));
  return s / static_cast<double>(data.rows);
}

Matrix sample(const FlowModel& model, std::size_t n, std::uint64_t seed) {
  check_model(model);
  Matrix out(n, model.dim);
  std::vector<double> z(model.dim);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::for_sample(seed, "flow.sample", i);
    for (auto& v : z) v = rng.normal();
    auto x = inverse(model, z.data());
    std::copy(x.begin(), x.end(), out.row(i));
  }
  return out;
}

std::size_t param_count(const FlowModel& model) {
  return model.layers.size() * layer_param_count(model);
}

std::vector<double> flatten_params(const FlowModel& model) {
  std::vector<double> flat;
  flat.reserve(param_count(model));
  for (const auto& layer : model.layers) {
    flat.insert(flat.end(), layer.w1.data.begin(), layer.w1.data.end());
    flat.insert(flat.end(), layer.b1.begin(), layer.b1.end());
    flat.insert(flat.end(), layer.w2.data.begin(), layer.w2.data.end());
    flat.insert(flat.end(), layer.b2.begin(), layer.b2.end());
  }
  return flat;
}

void set_params(FlowModel& model, const std::vector<double>& flat) {
  require(flat.size() == param_count(model), "set_params: size mismatch");
  std::size_t off = 0;
  auto take = [&](double* dst, std::size_t n) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), n, dst);
    off += n;
  };
  for (auto& layer : model.layers) {
    take(layer.w1.data.data(), layer.w1.data.size());
    take(layer.b1.data(), layer.b1.size());
    take(layer.w2.data.data(), layer.w2.data.size());
    take(layer.b2.data(), layer.b2.size());
  }
}

double nll_with_gradient(const FlowModel& model, const double* x,
                         std::vector<double>& grad) {
  check_model(model);
  check_finite(x, model.dim, "nll_with_gradient");
  require(grad.size() == param_count(model), "nll_with_gradient: grad size mismatch");
  const std::size_t d = model.dim, hid = model.hidden;
  const std::size_t n_layers = model.layers.size();

  std::vector<LayerCache> caches(n_layers);
  std::vector<double> z(x, x + d);
  double log_det = 0.0;
  for (std::size_t l = 0; l < n_layers; ++l)
    log_det += apply_layer(model, model.layers[l], z, &caches[l]);
  double nll = 0.5 * squared_norm(z.data(), d) +
               0.5 * static_cast<double>(d) * kLog2Pi - log_det;

  // d NLL / d z at the base is z itself; each clamped log-scale also enters
  // the NLL directly through -sum s.
  std::vector<double> gz = z;
  std::vector<double> gout(2 * d), gh(hid), gpre(hid), gx(d);
  for (std::size_t l = n_layers; l-- > 0;) {
    const auto& layer = model.layers[l];
    const auto& cache = caches[l];
    std::size_t off = l * layer_param_count(model);
    double* gw1 = grad.data() + off;
    double* gb1 = gw1 + hid * d;
    double* gw2 = gb1 + hid;
    double* gb2 = gw2 + 2 * d * hid;

    std::fill(gout.begin(), gout.end(), 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (layer.mask[j]) {
        gx[j] = gz[j];
        continue;
      }
      double es = std::exp(cache.s[j]);
      double ds = gz[j] * cache.x[j] * es - 1.0;
      double tanh_ratio = cache.s[j] / model.scale_clamp;
      gout[j] = ds * (1.0 - tanh_ratio * tanh_ratio);  // through the clamp
      gout[d + j] = gz[j];
      gx[j] = gz[j] * es;
    }

    for (std::size_t r = 0; r < hid; ++r) {
      double acc = 0.0;
      for (std::size_t o = 0; o < 2 * d; ++o) {
        double g = gout[o];
        if (g != 0.0) {
          gw2[o * hid + r] += g * cache.h[r];
          acc += layer.w2.at(o, r) * g;
        }
      }
      gh[r] = acc;
      gpre[r] = acc * (1.0 - cache.h[r] * cache.h[r]);
      gb1[r] += gpre[r];
    }
    for (std::size_t o = 0; o < 2 * d; ++o) gb2[o] += gout[o];

    for (std::size_t j = 0; j < d; ++j) {
      if (!layer.mask[j]) continue;  // u_j = 0 there, no w1 column gradient
      double acc = 0.0;
      for (std::size_t r = 0; r < hid; ++r) {
        gw1[r * d + j] += gpre[r] * cache.x[j];
        acc += layer.w1.at(r, j) * gpre[r];
      }
      gx[j] += acc;
    }
    gz = gx;
  }
  return nll;
}

double gradient_check(const FlowModel& model, const double* x, double eps) {
  if (!(eps > 0.0))
    throw std::invalid_argument("gradient_check: eps must be positive");
  std::vector<double> analytic(param_count(model), 0.0);
  nll_with_gradient(model, x, analytic);

  FlowModel probe = model;
  std::vector<double> flat = flatten_params(model);
  double worst = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    double keep = flat[i];
    flat[i] = keep + eps;
    set_params(probe, flat);
    double hi = -log_likelihood(probe, x);
    flat[i] = keep - eps;
    set_params(probe, flat);
    double lo = -log_likelihood(probe, x);
    flat[i] = keep;
    double fd = (hi - lo) / (2.0 * eps);
    double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1.0});
    worst = std::max(worst, std::fabs(fd - analytic[i]) / denom);
  }
  set_params(probe, flat);
  return worst;
}

TrainResult train(const Matrix& data, const FlowModel& init, const TrainConfig& cfg) {
  check_model(init);
  require(data.cols == init.dim, "train: data dim mismatch");
  require(cfg.epochs > 0, "train: epochs must be positive");
  require(cfg.batch_size > 0, "train: batch size must be positive");
  require(cfg.learning_rate > 0.0 && cfg.lr_floor > 0.0, "train: rates must be positive");
  require(cfg.weight_decay >= 0.0, "train: weight decay must be nonnegative");
  if (data.rows < 2 * cfg.batch_size)
    throw std::invalid_argument("train: need at least 2 * batch_size samples");

  TrainResult result;
  result.model = init;
  const std::size_t n = data.rows;
  const std::size_t n_params = param_count(init);
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  std::vector<double> params = flatten_params(init);
  std::vector<double> grad(n_params), m1(n_params, 0.0), m2(n_params, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  double beta1_pow = 1.0, beta2_pow = 1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::for_sample(cfg.seed, "flow.shuffle", epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::size_t stop = std::min(n, start + cfg.batch_size);
      double batch_size = static_cast<double>(stop - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i)
        batch_loss += nll_with_gradient(result.model, data.row(order[i]), grad);
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch));
      epoch_loss += batch_loss;
      batch_loss /= batch_size;

      double progress = (total_steps > 1)
                            ? static_cast<double>(step) /
                                  static_cast<double>(total_steps - 1)
                            : 1.0;
      double lr = cfg.lr_floor + 0.5 * (cfg.learning_rate - cfg.lr_floor) *
                                     (1.0 + std::cos(3.14159265358979323846 * progress));
      ++step;
      beta1_pow *= cfg.beta1;
      beta2_pow *= cfg.beta2;
      for (std::size_t i = 0; i < n_params; ++i) {
        double g = grad[i] / batch_size + cfg.weight_decay * params[i];
        m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
        m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
        double mhat = m1[i] / (1.0 - beta1_pow);
        double vhat = m2[i] / (1.0 - beta2_pow);
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      }
      set_params(result.model, params);
    }
    result.trace.epoch_nll.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

TrainResult train(const Matrix& data, std::size_t n_layers, const TrainConfig& cfg) {
  FlowModel init = make_flow(data.cols, n_layers, 32, cfg.seed);
  return train(data, init, cfg);
}

void save_model(const FlowModel& model, const std::filesystem::path& path) {
  check_model(model);
  AtomicFileWriter writer(path, std::ios::out | std::ios::binary);
  auto& os = writer.stream();
  write_magic(os, kMagic);
  write_u32(os, kFormatVersion);
  write_u64(os, model.dim);
  write_u64(os, model.layers.size());
  write_u64(os, model.hidden);
  write_f64(os, model.scale_clamp);
  for (const auto& layer : model.layers) {
    os.write(reinterpret_cast<const char*>(layer.mask.data()),
             static_cast<std::streamsize>(layer.mask.size()));
    for (double v : layer.w1.data) write_f64(os, v);
    for (double v : layer.b1) write_f64(os, v);
    for (double v : layer.w2.data) write_f64(os, v);
    for (double v : layer.b2) write_f64(os, v);
  }
  writer.commit();
}

FlowModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model file: " + path.string());
  expect_magic(is, kMagic, "flow model");
  std::uint32_t version = read_u32(is, "format version");
  if (version != kFormatVersion)
    throw std::runtime_error("unsupported flow model format version " +
                             std::to_string(version));
  FlowModel m;
  m.dim = read_u64(is, "dim");
  std::size_t n_layers = read_u64(is, "layer count");
  m.hidden = read_u64(is, "hidden width");
  m.scale_clamp = read_f64(is, "scale clamp");
  if (m.dim == 0 || m.dim > (1u << 20) || n_layers > (1u << 16) ||
      m.hidden == 0 || m.hidden > (1u << 20) || !(m.scale_clamp > 0.0))
    throw std::runtime_error("corrupt flow model header: " + path.string());
  m.layers.resize(n_layers);
  for (auto& layer : m.layers) {
    layer.mask.resize(m.dim);
    if (!is.read(reinterpret_cast<char*>(layer.mask.data()),
                 static_cast<std::streamsize>(m.dim)))
      throw std::runtime_error("truncated file while reading mask");
    layer.w1 = Matrix(m.hidden, m.dim);
    for (auto& v : layer.w1.data) v = read_f64(is, "w1");
    layer.b1.resize(m.hidden);
    for (auto& v : layer.b1) v = read_f64(is, "b1");
    layer.w2 = Matrix(2 * m.dim, m.hidden);
    for (auto& v : layer.w2.data) v = read_f64(is, "w2");
    layer.b2.resize(2 * m.dim);
    for (auto& v : layer.b2) v = read_f64(is, "b2");
  }
  check_model(m);
  return m;
}

}  // namespace spem
