#pragma once

#include <vector>

#include "idol/tensor.hpp"

namespace idol {

// DDPM noise schedule and the elementary forward/reverse operations.
// Timesteps are 0-based: t in [0, steps). alpha_bar[-1] is defined as 1, so
// the posterior variance at t = 0 is exactly zero and the final step of
// ancestral sampling is deterministic.
struct DiffusionSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // Linear beta ramp from beta_start to beta_end inclusive.
  static DiffusionSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);

  // Builds derived quantities from an explicit beta sequence.
  static DiffusionSchedule from_betas(std::vector<double> betas);

  double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; }
  // Posterior standard deviation sigma_t; zero at t = 0.
  double sigma(int t) const;
  void check_t(int t) const;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
template <typename T>
Tensor<T> forward_diffuse(const DiffusionSchedule& sched, const Tensor<T>& z0, int t,
                          const Tensor<T>& eps);

// Inverts the forward process under a noise estimate:
// z0_hat = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
template <typename T>
Tensor<T> predict_z0(const DiffusionSchedule& sched, const Tensor<T>& zt, int t,
                     const Tensor<T>& eps_hat);

// One ancestral sampling step t -> t-1; noise may be null when sigma(t) == 0
// (it is ignored in that case).
template <typename T>
Tensor<T> ddpm_step(const DiffusionSchedule& sched, const Tensor<T>& zt, int t,
                    const Tensor<T>& eps_hat, const Tensor<T>* noise);

}  // namespace idol
