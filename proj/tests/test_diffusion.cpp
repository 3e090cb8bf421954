#include <doctest.h>

#include <cmath>

#include "idol/diffusion.hpp"
#include "idol/rng.hpp"

using namespace idol;

namespace {

TensorD randn_tensor(Rng& rng, std::vector<int> shape) {
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("linear schedule hits both endpoints and stays monotone") {
  const auto s = DiffusionSchedule::linear(200);
  REQUIRE(s.steps == 200);
  CHECK(s.beta.front() == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta.back() == doctest::Approx(0.02).epsilon(1e-12));
  for (int t = 1; t < s.steps; ++t) {
    CHECK(s.beta[t] > s.beta[t - 1]);
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  for (int t = 0; t < s.steps; ++t) {
    CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]).epsilon(1e-15));
    CHECK(s.alpha_bar[t] > 0.0);
    CHECK(s.alpha_bar[t] < 1.0);
  }
}

TEST_CASE("alpha_bar is the exact running product") {
  const auto s = DiffusionSchedule::from_betas({0.1, 0.2});
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.72).epsilon(1e-15));
  CHECK(s.alpha_bar_prev(0) == 1.0);
  CHECK(s.alpha_bar_prev(1) == doctest::Approx(0.9).epsilon(1e-15));

  const auto lin = DiffusionSchedule::linear(50);
  double prod = 1.0;
  for (int t = 0; t < lin.steps; ++t) {
    prod *= lin.alpha[t];
    CHECK(lin.alpha_bar[t] == doctest::Approx(prod).epsilon(1e-14));
  }
}

TEST_CASE("schedule rejects invalid betas and timesteps") {
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.1, 1.0}), PreconditionError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.0}), PreconditionError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({-0.1}), PreconditionError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({}), PreconditionError);
  CHECK_THROWS_AS(DiffusionSchedule::linear(1), PreconditionError);

  const auto s = DiffusionSchedule::linear(10);
  const TensorD z({2, 2});
  CHECK_THROWS_AS(forward_diffuse(s, z, -1, z), PreconditionError);
  CHECK_THROWS_AS(forward_diffuse(s, z, 10, z), PreconditionError);
}

TEST_CASE("forward diffusion reproduces the closed-form single cell") {
  // abar = 0.25 at t = 0, z0 = 2, eps = 1:
  // z = 0.5*2 + sqrt(0.75)*1 = 1 + 0.8660254 = 1.8660254.
  const auto s = DiffusionSchedule::from_betas({0.75});
  const TensorD z0({1}, {2.0});
  const TensorD eps({1}, {1.0});
  const TensorD zt = forward_diffuse(s, z0, 0, eps);
  CHECK(zt.data[0] == doctest::Approx(1.8660254).epsilon(1e-7));
  const TensorD rec = predict_z0(s, zt, 0, eps);
  CHECK(rec.data[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("forward/predict round trip is tight for random tensors at every t") {
  const auto s = DiffusionSchedule::linear(40);
  Rng rng(20240811);
  for (int rep = 0; rep < 25; ++rep) {
    const TensorD z0 = randn_tensor(rng, {3, 4, 5});
    for (int t = 0; t < s.steps; ++t) {
      const TensorD eps = randn_tensor(rng, {3, 4, 5});
      const TensorD zt = forward_diffuse(s, z0, t, eps);
      const TensorD rec = predict_z0(s, zt, t, eps);
      for (int64_t i = 0; i < z0.numel(); ++i) {
        const double rel =
            std::abs(rec.data[i] - z0.data[i]) / std::max(1.0, std::abs(z0.data[i]));
        CHECK(rel <= 1e-9);
      }
    }
  }
}

TEST_CASE("forward diffusion preserves unit variance empirically") {
  // With z0 ~ N(0,1) and eps ~ N(0,1), z_t is N(0,1) for every t.
  const auto s = DiffusionSchedule::linear(200);
  Rng rng(77119);
  const int n = 50000;
  for (int t : {0, 67, 199}) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const TensorD z0({1}, {rng.normal()});
      const TensorD eps({1}, {rng.normal()});
      const double z = forward_diffuse(s, z0, t, eps).data[0];
      sum += z;
      sq += z * z;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    // Var of a sample variance estimate of N(0,1) is ~2/n.
    const double se = std::sqrt(2.0 / n);
    CHECK(std::abs(var - 1.0) <= 3.0 * se);
  }
}

TEST_CASE("final ancestral step is deterministic and exact") {
  // At t = 0 the posterior variance is zero and the step inverts the forward
  // map exactly when given the true noise.
  const auto s = DiffusionSchedule::linear(10);
  CHECK(s.sigma(0) == 0.0);
  Rng rng(555);
  const TensorD z0 = randn_tensor(rng, {2, 3});
  const TensorD eps = randn_tensor(rng, {2, 3});
  const TensorD z1 = forward_diffuse(s, z0, 0, eps);
  const TensorD stepped = ddpm_step<double>(s, z1, 0, eps, nullptr);
  for (int64_t i = 0; i < z0.numel(); ++i)
    CHECK(stepped.data[i] == doctest::Approx(z0.data[i]).epsilon(1e-12));
}

TEST_CASE("ddpm step requires noise whenever sigma > 0") {
  const auto s = DiffusionSchedule::linear(10);
  CHECK(s.sigma(3) > 0.0);
  const TensorD z({2}, {0.5, -0.5});
  CHECK_THROWS_AS(ddpm_step<double>(s, z, 3, z, nullptr), PreconditionError);
}

TEST_CASE("vanishing beta makes every step an identity") {
  // beta -> 0: alpha -> 1, abar -> 1, so both the forward map and the reverse
  // step converge to the identity.
  const auto s = DiffusionSchedule::from_betas(std::vector<double>(5, 1e-8));
  Rng rng(31337);
  const TensorD z0 = randn_tensor(rng, {4});
  const TensorD eps = randn_tensor(rng, {4});
  const TensorD noise = randn_tensor(rng, {4});
  for (int t = 0; t < 5; ++t) {
    const TensorD zt = forward_diffuse(s, z0, t, eps);
    for (int64_t i = 0; i < z0.numel(); ++i)
      CHECK(zt.data[i] == doctest::Approx(z0.data[i]).epsilon(1e-3));
    const TensorD prev = ddpm_step<double>(s, z0, t, eps, t == 0 ? nullptr : &noise);
    for (int64_t i = 0; i < z0.numel(); ++i)
      CHECK(std::abs(prev.data[i] - z0.data[i]) <= 1e-3);
  }
}

TEST_CASE("posterior variance matches the closed form") {
  const auto s = DiffusionSchedule::linear(25);
  for (int t = 1; t < s.steps; ++t) {
    const double expect =
        std::sqrt(s.beta[t] * (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bar[t]));
    CHECK(s.sigma(t) == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("ancestral chain with exact noise oracle recovers z0") {
  // If eps_hat at every step is the exact noise linking z_t to z0, the
  // deterministic part of the chain walks back to z0.
  const auto s = DiffusionSchedule::linear(30);
  Rng rng(90001);
  const TensorD z0 = randn_tensor(rng, {3, 3});
  const TensorD eps = randn_tensor(rng, {3, 3});
  TensorD z = forward_diffuse(s, z0, s.steps - 1, eps);
  const TensorD zero_noise({3, 3});
  for (int t = s.steps - 1; t >= 0; --t) {
    // True noise for the current z relative to z0.
    TensorD eps_true({3, 3});
    const double a = std::sqrt(s.alpha_bar[t]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t]);
    for (int64_t i = 0; i < z.numel(); ++i)
      eps_true.data[i] = (z.data[i] - a * z0.data[i]) / b;
    z = ddpm_step<double>(s, z, t, eps_true, t == 0 ? nullptr : &zero_noise);
  }
  for (int64_t i = 0; i < z.numel(); ++i)
    CHECK(z.data[i] == doctest::Approx(z0.data[i]).epsilon(1e-6));
}
