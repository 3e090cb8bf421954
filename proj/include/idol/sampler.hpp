#pragma once

#include <stdexcept>
#include <string>
#include <utility>

#include "idol/denoiser.hpp"
#include "idol/diffusion.hpp"
#include "idol/params.hpp"
#include "idol/scenes.hpp"

namespace idol {

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Affine maps between image space [0,1] and the latent range [-1,1]; the
// decode direction clamps.
TensorF image_to_latent(const TensorF& x);
TensorF latent_to_image(const TensorF& z);

// Conditioning bundle for one scene: encoded foreground tokens, background
// latent, pose heatmaps.
ConditionBundle make_condition(const DenoiserConfig& cfg, ParameterStore<float>& params,
                               const SceneSample& scene);

// Ancestral sampling of a single modality. The initial latent and the
// per-step noise come from seed-derived streams private to the modality, so a
// video sample never depends on whether depth is also being sampled.
TensorF sample_single(const DenoiserConfig& cfg, ParameterStore<float>& params,
                      const DiffusionSchedule& sched, const ConditionBundle& cond,
                      Modality modality, uint64_t seed);

// Lockstep joint sampling: one shared timestep ladder, one joint forward pass
// per step, independent per-stream ancestral noise. With coupled=false the
// result is bit-identical to two sample_single calls on the same seed.
std::pair<TensorF, TensorF> sample_joint(const DenoiserConfig& cfg,
                                         ParameterStore<float>& params,
                                         const DiffusionSchedule& sched,
                                         const ConditionBundle& cond, uint64_t seed,
                                         bool coupled = true,
                                         XattnShareMode share = XattnShareMode::Independent);

// Writes video_FF.png / depth_FF.png frame sequences plus a two-row contact
// sheet (video above depth) into `dir`, creating it if needed.
void write_sample(const std::string& dir, const TensorF& video, const TensorF& depth_rgb,
                  bool contact_sheet = true);

}  // namespace idol
