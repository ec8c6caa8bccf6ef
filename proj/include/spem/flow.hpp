#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "spem/matrix.hpp"
#include "spem/rng.hpp"

namespace spem {

// Affine coupling layer. Coordinates with mask = 1 pass through unchanged
// and feed the conditioner; coordinates with mask = 0 are transformed as
//   z_j = x_j * exp(s_j) + t_j
// where (s, t) come from a one-hidden-layer tanh perceptron applied to the
// masked input u = x .* mask. Raw log-scales are squashed to
// s = clamp * tanh(s_raw / clamp), which bounds |s| and keeps the Jacobian
// finite and invertible for any parameter values.
struct CouplingLayer {
  std::vector<std::uint8_t> mask;  // 1 = pass-through, 0 = transformed
  Matrix w1;                       // hidden x d
  std::vector<double> b1;          // hidden
  Matrix w2;                       // 2d x hidden; rows [0,d) log_scale, [d,2d) shift
  std::vector<double> b2;          // 2d
};

// Base distribution is a fixed standard normal on R^dim.
struct FlowModel {
  std::size_t dim = 0;
  std::size_t hidden = 32;
  double scale_clamp = 5.0;
  std::vector<CouplingLayer> layers;
};

// Alternating-mask stack with identity initialization: the hidden layer gets
// small random weights, the output layer starts at zero, so the whole flow is
// exactly the identity map until training moves it.
FlowModel make_flow(std::size_t dim, std::size_t n_layers, std::size_t hidden = 32,
                    std::uint64_t seed = 0);

struct ForwardResult {
  std::vector<double> z;
  double log_det = 0.0;
};

ForwardResult forward(const FlowModel& model, const double* x);
std::vector<double> inverse(const FlowModel& model, const double* z);

// log p(x) = log N(z; 0, I) + log_det, in nats.
double log_likelihood(const FlowModel& model, const double* x);
double log_likelihood(const FlowModel& model, const std::vector<double>& x);

double mean_nll(const FlowModel& model, const Matrix& data);

// Draws z from the base and maps it back through the inverse. Deterministic
// per (seed, row index), so batches of different sizes agree on their prefix.
Matrix sample(const FlowModel& model, std::size_t n, std::uint64_t seed);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double lr_floor = 1e-6;  // cosine decay target, single cycle over the run
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

struct LossTrace {
  std::vector<double> epoch_nll;  // mean training NLL per epoch, nats/sample
};

struct TrainResult {
  FlowModel model;
  LossTrace trace;
};

// Maximum-likelihood training with hand-derived layer backprop and an
// adaptive-moment optimizer. Requires at least 2 * batch_size samples.
// Aborts with the epoch index if the loss goes non-finite.
TrainResult train(const Matrix& data, const FlowModel& init, const TrainConfig& cfg);
TrainResult train(const Matrix& data, std::size_t n_layers, const TrainConfig& cfg);

// Flat parameter order: per layer, w1 row-major, b1, w2 row-major, b2.
std::size_t param_count(const FlowModel& model);
std::vector<double> flatten_params(const FlowModel& model);
void set_params(FlowModel& model, const std::vector<double>& flat);

// Accumulates d NLL(x) / d theta into grad (sized param_count, caller-zeroed)
// and returns NLL(x).
double nll_with_gradient(const FlowModel& model, const double* x,
                         std::vector<double>& grad);

// Max discrepancy between analytic and central finite-difference gradients
// over all parameters, relative with an absolute fallback near zero.
double gradient_check(const FlowModel& model, const double* x, double eps = 1e-5);

void save_model(const FlowModel& model, const std::filesystem::path& path);
FlowModel load_model(const std::filesystem::path& path);

}  // namespace spem
