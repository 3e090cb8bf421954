#include "idol/diffusion.hpp"

#include <cmath>
#include <string>

namespace idol {

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
  // The ramp includes both endpoints, which needs at least two steps.
  if (steps < 2) throw PreconditionError("linear schedule needs at least two steps");
  std::vector<double> betas(static_cast<size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(steps - 1);
    betas[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
  }
  return from_betas(std::move(betas));
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
  DiffusionSchedule s;
  s.steps = static_cast<int>(betas.size());
  if (s.steps < 1) throw PreconditionError("schedule needs at least one step");
  s.beta = std::move(betas);
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double running = 1.0;
  for (size_t t = 0; t < s.beta.size(); ++t) {
    if (!(s.beta[t] > 0.0 && s.beta[t] < 1.0))
      throw PreconditionError("beta values must lie in (0, 1)");
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

double DiffusionSchedule::sigma(int t) const {
  check_t(t);
  if (t == 0) return 0.0;
  const double var =
      beta[static_cast<size_t>(t)] * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar[static_cast<size_t>(t)]);
  return std::sqrt(var);
}

void DiffusionSchedule::check_t(int t) const {
  if (t < 0 || t >= steps)
    throw PreconditionError("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(steps) + ")");
}

template <typename T>
Tensor<T> forward_diffuse(const DiffusionSchedule& sched, const Tensor<T>& z0, int t,
                          const Tensor<T>& eps) {
  sched.check_t(t);
  check_shape(z0.same_shape(eps), "forward_diffuse: z0/eps shape mismatch");
  const double ab = sched.alpha_bar[static_cast<size_t>(t)];
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
  return out;
}

template <typename T>
Tensor<T> predict_z0(const DiffusionSchedule& sched, const Tensor<T>& zt, int t,
                     const Tensor<T>& eps_hat) {
  sched.check_t(t);
  check_shape(zt.same_shape(eps_hat), "predict_z0: z/eps shape mismatch");
  const double ab = sched.alpha_bar[static_cast<size_t>(t)];
  const T inv_a = static_cast<T>(1.0 / std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(zt.shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = (zt.data[i] - b * eps_hat.data[i]) * inv_a;
  return out;
}

template <typename T>
Tensor<T> ddpm_step(const DiffusionSchedule& sched, const Tensor<T>& zt, int t,
                    const Tensor<T>& eps_hat, const Tensor<T>* noise) {
  sched.check_t(t);
  check_shape(zt.same_shape(eps_hat), "ddpm_step: z/eps shape mismatch");
  const double beta = sched.beta[static_cast<size_t>(t)];
  const double alpha = sched.alpha[static_cast<size_t>(t)];
  const double ab = sched.alpha_bar[static_cast<size_t>(t)];
  const T inv_sqrt_alpha = static_cast<T>(1.0 / std::sqrt(alpha));
  const T eps_coef = static_cast<T>(beta / std::sqrt(1.0 - ab));
  const double sig = sched.sigma(t);
  if (sig > 0.0) {
    if (noise == nullptr) throw PreconditionError("ddpm_step: noise required when sigma > 0");
    check_shape(zt.same_shape(*noise), "ddpm_step: noise shape mismatch");
  }
  Tensor<T> out(zt.shape);
  const T s = static_cast<T>(sig);
  for (int64_t i = 0; i < out.numel(); ++i) {
    T v = inv_sqrt_alpha * (zt.data[i] - eps_coef * eps_hat.data[i]);
    if (sig > 0.0) v += s * noise->data[i];
    out.data[i] = v;
  }
  return out;
}

template Tensor<float> forward_diffuse(const DiffusionSchedule&, const Tensor<float>&, int,
                                       const Tensor<float>&);
template Tensor<double> forward_diffuse(const DiffusionSchedule&, const Tensor<double>&, int,
                                        const Tensor<double>&);
template Tensor<float> predict_z0(const DiffusionSchedule&, const Tensor<float>&, int,
                                  const Tensor<float>&);
template Tensor<double> predict_z0(const DiffusionSchedule&, const Tensor<double>&, int,
                                   const Tensor<double>&);
template Tensor<float> ddpm_step(const DiffusionSchedule&, const Tensor<float>&, int,
                                 const Tensor<float>&, const Tensor<float>*);
template Tensor<double> ddpm_step(const DiffusionSchedule&, const Tensor<double>&, int,
                                  const Tensor<double>&, const Tensor<double>*);

}  // namespace idol
