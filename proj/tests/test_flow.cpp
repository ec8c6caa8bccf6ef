#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "spem/entropy.hpp"
#include "spem/flow.hpp"

using namespace spem;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

FlowModel random_model(std::size_t d, std::size_t n_layers, std::uint64_t seed,
                       double out_std = 0.05) {
  FlowModel m = make_flow(d, n_layers, 32, seed);
  Rng r2(splitmix64(seed) + 1, 3);
  for (auto& layer : m.layers) {
    for (auto& v : layer.w2.data) v = r2.normal(0.0, out_std);
    for (auto& v : layer.b2) v = r2.normal(0.0, out_std);
    for (auto& v : layer.b1) v = r2.normal(0.0, 0.2);
  }
  return m;
}

// log |det J| of the forward map by central differences plus LU with
// partial pivoting; the independent oracle for the analytic log_det.
double numeric_log_abs_det(const FlowModel& m, const std::vector<double>& x,
                           double eps = 1e-5) {
  const std::size_t d = m.dim;
  std::vector<double> jac(d * d);
  std::vector<double> xp = x, xm = x;
  for (std::size_t j = 0; j < d; ++j) {
    xp[j] = x[j] + eps;
    xm[j] = x[j] - eps;
    auto zp = forward(m, xp.data()).z;
    auto zm = forward(m, xm.data()).z;
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (zp[i] - zm[i]) / (2 * eps);
    xp[j] = x[j];
    xm[j] = x[j];
  }
  double log_det = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    std::size_t pivot = k;
    for (std::size_t i = k + 1; i < d; ++i)
      if (std::fabs(jac[i * d + k]) > std::fabs(jac[pivot * d + k])) pivot = i;
    if (pivot != k)
      for (std::size_t c = 0; c < d; ++c) std::swap(jac[k * d + c], jac[pivot * d + c]);
    REQUIRE(jac[k * d + k] != 0.0);
    log_det += std::log(std::fabs(jac[k * d + k]));
    for (std::size_t i = k + 1; i < d; ++i) {
      double f = jac[i * d + k] / jac[k * d + k];
      for (std::size_t c = k; c < d; ++c) jac[i * d + c] -= f * jac[k * d + c];
    }
  }
  return log_det;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("identity-initialized flow is the identity map") {
  FlowModel m = make_flow(3, 4, 32, 42);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x = {rng.normal(), rng.normal(), rng.normal()};
    auto f = forward(m, x.data());
    CHECK(f.log_det == 0.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(f.z[j] == x[j]);
    auto back = inverse(m, x.data());
    for (std::size_t j = 0; j < 3; ++j) CHECK(back[j] == x[j]);
  }
}

TEST_CASE("single layer with constant conditioner matches the affine closed form") {
  FlowModel m = make_flow(2, 1, 32, 0);
  auto& layer = m.layers[0];
  REQUIRE(layer.mask[0] == 1);
  REQUIRE(layer.mask[1] == 0);
  for (auto& v : layer.w1.data) v = 0.0;  // conditioner output = b2 only
  layer.b2[1] = m.scale_clamp * std::atanh(0.5 / m.scale_clamp);

  double x[2] = {1.0, 2.0};
  auto f = forward(m, x);
  CHECK(f.log_det == doctest::Approx(0.5).epsilon(1e-13));
  CHECK(f.z[0] == 1.0);
  CHECK(f.z[1] == doctest::Approx(2.0 * std::exp(0.5)).epsilon(1e-13));

  auto back = inverse(m, f.z.data());
  CHECK(back[0] == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(back[1] == doctest::Approx(2.0).epsilon(1e-13));
}

TEST_CASE("log-likelihood identities for the identity model") {
  FlowModel m2 = make_flow(2, 2, 32, 0);
  double zero2[2] = {0.0, 0.0};
  CHECK(log_likelihood(m2, zero2) == doctest::Approx(-kLog2Pi).epsilon(1e-12));

  FlowModel m1 = make_flow(1, 2, 32, 0);
  double three = 3.0;
  CHECK(log_likelihood(m1, &three) ==
        doctest::Approx(-0.5 * kLog2Pi - 4.5).epsilon(1e-12));
}

TEST_CASE("forward and inverse round-trip within 1e-8 relative") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FlowModel m = random_model(6, 3, seed, 0.3);
    Rng rng(seed + 100);
    for (int t = 0; t < 25; ++t) {
      std::vector<double> x(6);
      for (auto& v : x) v = rng.normal(0.0, 2.0);
      auto f = forward(m, x.data());
      auto back = inverse(m, f.z.data());
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(std::fabs(back[j] - x[j]) < 1e-8 * (1.0 + std::fabs(x[j])));
      auto fwd_again = forward(m, back.data());
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(std::fabs(fwd_again.z[j] - f.z[j]) < 1e-8 * (1.0 + std::fabs(f.z[j])));
    }
  }
}

TEST_CASE("analytic log_det matches the numerical Jacobian") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    FlowModel m = random_model(4, 2, seed, 0.4);
    Rng rng(seed + 50);
    for (int t = 0; t < 10; ++t) {
      std::vector<double> x(4);
      for (auto& v : x) v = rng.normal();
      double analytic = forward(m, x.data()).log_det;
      double numeric = numeric_log_abs_det(m, x);
      CHECK(std::fabs(analytic - numeric) <
            1e-4 * std::max(1.0, std::fabs(numeric)));
    }
  }
}

TEST_CASE("trained model log_det still matches the numerical Jacobian") {
  SUBCASE("") {}
  Rng rng(17);
  Matrix data(256, 2);
  for (auto& v : data.data) v = rng.normal(0.0, 0.5);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 4;
  auto result = train(data, 2, cfg);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> x = {rng.normal(), rng.normal()};
    double analytic = forward(result.model, x.data()).log_det;
    double numeric = numeric_log_abs_det(result.model, x);
    CHECK(std::fabs(analytic - numeric) < 1e-4 * std::max(1.0, std::fabs(numeric)));
  }
}

TEST_CASE("density integrates to one on a grid") {
  SUBCASE("d = 1") {
    FlowModel m = random_model(1, 2, 9, 0.05);
    const double lo = -8.0, hi = 8.0;
    const std::size_t steps = 4000;
    double h = (hi - lo) / static_cast<double>(steps);
    double sum = 0.0;
    for (std::size_t i = 0; i <= steps; ++i) {
      double x = lo + h * static_cast<double>(i);
      double w = (i == 0 || i == steps) ? 0.5 : 1.0;
      sum += w * std::exp(log_likelihood(m, &x));
    }
    CHECK(std::fabs(sum * h - 1.0) < 1e-2);
  }
  SUBCASE("d = 2") {
    FlowModel m = random_model(2, 2, 10, 0.05);
    const double lo = -8.0, hi = 8.0;
    const std::size_t steps = 320;
    double h = (hi - lo) / static_cast<double>(steps);
    double sum = 0.0;
    std::vector<double> x(2);
    for (std::size_t i = 0; i <= steps; ++i) {
      x[0] = lo + h * static_cast<double>(i);
      double wi = (i == 0 || i == steps) ? 0.5 : 1.0;
      for (std::size_t j = 0; j <= steps; ++j) {
        x[1] = lo + h * static_cast<double>(j);
        double wj = (j == 0 || j == steps) ? 0.5 : 1.0;
        sum += wi * wj * std::exp(log_likelihood(m, x.data()));
      }
    }
    CHECK(std::fabs(sum * h * h - 1.0) < 1e-2);
  }
}

TEST_CASE("analytic gradient matches central differences") {
  FlowModel identity = make_flow(3, 2, 32, 5);
  std::vector<double> x0 = {0.4, -1.2, 0.7};
  CHECK(gradient_check(identity, x0.data()) < 1e-4);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FlowModel m = random_model(4, 2, seed, 0.3);
    Rng rng(seed + 23);
    std::vector<double> x(4);
    for (auto& v : x) v = rng.normal();
    double err = gradient_check(m, x.data());
    INFO("seed ", seed, " err ", err);
    CHECK(err < 1e-4);
  }

  CHECK_THROWS_AS(gradient_check(identity, x0.data(), 0.0), std::invalid_argument);
}

TEST_CASE("sampling moments, determinism, and edge counts") {
  FlowModel m = make_flow(2, 2, 32, 0);
  Matrix s = sample(m, 100000, 77);
  double mean[2] = {0, 0}, cov[3] = {0, 0, 0};
  for (std::size_t i = 0; i < s.rows; ++i) {
    mean[0] += s.at(i, 0);
    mean[1] += s.at(i, 1);
  }
  mean[0] /= static_cast<double>(s.rows);
  mean[1] /= static_cast<double>(s.rows);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double a = s.at(i, 0) - mean[0], b = s.at(i, 1) - mean[1];
    cov[0] += a * a;
    cov[1] += a * b;
    cov[2] += b * b;
  }
  for (double& c : cov) c /= static_cast<double>(s.rows - 1);
  CHECK(std::fabs(mean[0]) < 0.05);
  CHECK(std::fabs(mean[1]) < 0.05);
  CHECK(std::fabs(cov[0] - 1.0) < 0.05);
  CHECK(std::fabs(cov[1]) < 0.05);
  CHECK(std::fabs(cov[2] - 1.0) < 0.05);

  Matrix again = sample(m, 100000, 77);
  CHECK(s.data == again.data);
  Matrix one = sample(m, 1, 77);
  REQUIRE(one.rows == 1);
  CHECK(std::isfinite(one.at(0, 0)));
  CHECK(one.at(0, 0) == s.at(0, 0));  // per-row streams, prefix agreement
  CHECK(sample(m, 0, 77).empty());
}

TEST_CASE("training reaches the analytic entropy of a gaussian target") {
  GaussianSpec target = GaussianSpec::isotropic(2, 0.25);
  Rng rng(2024);
  Matrix data = sample_gaussian(target, 2048, rng);
  Matrix held = sample_gaussian(target, 1024, rng);

  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 1;
  auto result = train(data, 2, cfg);

  double analytic_h = gaussian_entropy(target);
  CHECK(analytic_h == doctest::Approx(1.4516).epsilon(1e-4));
  double final_nll = mean_nll(result.model, data);
  INFO("final NLL ", final_nll, " analytic H ", analytic_h);
  CHECK(std::fabs(final_nll - analytic_h) < 0.3);

  double held_loglik = -mean_nll(result.model, held);
  CHECK(std::fabs(held_loglik - (-analytic_h)) < 0.2);

  CHECK(result.trace.epoch_nll.size() == cfg.epochs);
  CHECK(result.trace.epoch_nll.back() <= result.trace.epoch_nll.front());
  for (double v : result.trace.epoch_nll) CHECK(std::isfinite(v));
}

TEST_CASE("identity-optimal data keeps the loss flat") {
  GaussianSpec target = GaussianSpec::isotropic(3, 1.0);
  Rng rng(5);
  Matrix data = sample_gaussian(target, 1024, rng);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.seed = 2;
  auto result = train(data, 2, cfg);
  double h = gaussian_entropy(target);
  CHECK(std::fabs(result.trace.epoch_nll.front() - h) < 0.15);
  CHECK(result.trace.epoch_nll.back() <= result.trace.epoch_nll.front() + 0.05);
}

TEST_CASE("training is bitwise deterministic per seed") {
  Rng rng(8);
  Matrix data(192, 2);
  for (auto& v : data.data) v = rng.normal();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 11;
  auto a = train(data, 2, cfg);
  auto b = train(data, 2, cfg);
  CHECK(a.trace.epoch_nll == b.trace.epoch_nll);
  CHECK(flatten_params(a.model) == flatten_params(b.model));
}

TEST_CASE("training aborts with the epoch index on a non-finite loss") {
  Matrix data(128, 2, 1e200);
  TrainConfig cfg;
  cfg.epochs = 3;
  bool threw = false;
  try {
    train(data, 2, cfg);
  } catch (const std::runtime_error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("training demands two full batches") {
  Matrix data(100, 2, 0.5);
  TrainConfig cfg;  // batch_size 64, so 100 < 128
  CHECK_THROWS_AS(train(data, 2, cfg), std::invalid_argument);
}

TEST_CASE("non-finite inputs are rejected") {
  FlowModel m = make_flow(2, 2, 32, 0);
  double bad[2] = {0.0, std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(forward(m, bad), std::domain_error);
  CHECK_THROWS_AS(inverse(m, bad), std::domain_error);
  double nan2[2] = {std::nan(""), 0.0};
  CHECK_THROWS_AS(log_likelihood(m, nan2), std::domain_error);
}

TEST_CASE("model serialization round-trips bit for bit") {
  FlowModel m = random_model(3, 3, 21, 0.2);
  auto path = temp_path("spem_test_flow.bin");
  save_model(m, path);
  FlowModel loaded = load_model(path);
  CHECK(loaded.dim == m.dim);
  CHECK(loaded.hidden == m.hidden);
  CHECK(loaded.scale_clamp == m.scale_clamp);
  CHECK(flatten_params(loaded) == flatten_params(m));

  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x = {rng.normal(), rng.normal(), rng.normal()};
    CHECK(log_likelihood(loaded, x.data()) == log_likelihood(m, x.data()));
  }
  std::filesystem::remove(path);
}

TEST_CASE("corrupt or truncated model files are rejected") {
  auto path = temp_path("spem_test_flow_bad.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTAFLOW junk";
  }
  CHECK_THROWS_AS(load_model(path), std::runtime_error);

  FlowModel m = make_flow(2, 2, 32, 0);
  save_model(m, path);
  auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full / 2);
  CHECK_THROWS_AS(load_model(path), std::runtime_error);
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_model(temp_path("spem_no_such_model.bin")),
                  std::runtime_error);
}

TEST_CASE("flat parameter order round-trips") {
  FlowModel m = random_model(5, 2, 31, 0.3);
  auto flat = flatten_params(m);
  CHECK(flat.size() == param_count(m));
  FlowModel other = make_flow(5, 2, 32, 0);
  set_params(other, flat);
  CHECK(flatten_params(other) == flat);
}
