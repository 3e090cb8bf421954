#include "idol/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "idol/image.hpp"
#include "idol/rng.hpp"

namespace idol {

namespace {

TensorF draw_noise(Rng& rng, const std::vector<int>& shape) {
  TensorF t(shape);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

void check_finite(const TensorF& z, const char* stream, int t) {
  for (float v : z.data)
    if (!std::isfinite(v))
      throw SamplingError(std::string("non-finite ") + stream +
                          " latent at step t=" + std::to_string(t));
}

const char* init_tag(Modality m) {
  return m == Modality::Video ? "sample.init.video" : "sample.init.depth";
}
const char* step_tag(Modality m) {
  return m == Modality::Video ? "sample.step.video" : "sample.step.depth";
}

}  // namespace

TensorF image_to_latent(const TensorF& x) {
  TensorF z(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) z.data[i] = 2.0f * x.data[i] - 1.0f;
  return z;
}

TensorF latent_to_image(const TensorF& z) {
  TensorF x(z.shape);
  for (int64_t i = 0; i < z.numel(); ++i)
    x.data[i] = std::clamp(0.5f * (z.data[i] + 1.0f), 0.0f, 1.0f);
  return x;
}

ConditionBundle make_condition(const DenoiserConfig& cfg, ParameterStore<float>& params,
                               const SceneSample& scene) {
  ConditionBundle cond;
  const TensorF fg16 = resize_bilinear(scene.fg_image, DenoiserConfig::kFgImageSize,
                                       DenoiserConfig::kFgImageSize);
  cond.fg_tokens = encode_foreground(cfg, params, fg16);
  cond.bg_latent = image_to_latent(scene.bg_image);
  cond.pose = scene.pose_heatmaps;
  return cond;
}

TensorF sample_single(const DenoiserConfig& cfg, ParameterStore<float>& params,
                      const DiffusionSchedule& sched, const ConditionBundle& cond,
                      Modality modality, uint64_t seed) {
  if (sched.steps < 2) throw PreconditionError("sampling needs a full schedule");
  const std::vector<int> shape = {cfg.frames, cfg.latent_channels, cfg.height, cfg.width};
  Rng init_rng = named_stream(seed, init_tag(modality));
  Rng step_rng = named_stream(seed, step_tag(modality));

  TensorF z = draw_noise(init_rng, shape);
  for (int t = sched.steps - 1; t >= 0; --t) {
    const StreamOut out = single_forward(cfg, params, z, t, modality, cond, false);
    if (sched.sigma(t) > 0.0) {
      const TensorF noise = draw_noise(step_rng, shape);
      z = ddpm_step(sched, z, t, out.eps, &noise);
    } else {
      z = ddpm_step<float>(sched, z, t, out.eps, nullptr);
    }
    check_finite(z, modality == Modality::Video ? "video" : "depth", t);
  }
  return latent_to_image(z);
}

std::pair<TensorF, TensorF> sample_joint(const DenoiserConfig& cfg,
                                         ParameterStore<float>& params,
                                         const DiffusionSchedule& sched,
                                         const ConditionBundle& cond, uint64_t seed,
                                         bool coupled, XattnShareMode share) {
  if (sched.steps < 2) throw PreconditionError("sampling needs a full schedule");
  const std::vector<int> shape = {cfg.frames, cfg.latent_channels, cfg.height, cfg.width};
  Rng init_v = named_stream(seed, init_tag(Modality::Video));
  Rng init_d = named_stream(seed, init_tag(Modality::Depth));
  Rng step_v = named_stream(seed, step_tag(Modality::Video));
  Rng step_d = named_stream(seed, step_tag(Modality::Depth));

  TensorF zv = draw_noise(init_v, shape);
  TensorF zd = draw_noise(init_d, shape);
  for (int t = sched.steps - 1; t >= 0; --t) {
    const auto [ov, od] =
        joint_forward(cfg, params, zv, zd, t, cond, false, share, coupled);
    if (sched.sigma(t) > 0.0) {
      const TensorF nv = draw_noise(step_v, shape);
      const TensorF nd = draw_noise(step_d, shape);
      zv = ddpm_step(sched, zv, t, ov.eps, &nv);
      zd = ddpm_step(sched, zd, t, od.eps, &nd);
    } else {
      zv = ddpm_step<float>(sched, zv, t, ov.eps, nullptr);
      zd = ddpm_step<float>(sched, zd, t, od.eps, nullptr);
    }
    check_finite(zv, "video", t);
    check_finite(zd, "depth", t);
  }
  return {latent_to_image(zv), latent_to_image(zd)};
}

namespace {

TensorF frame_slice(const TensorF& clip, int f) {
  const int C = clip.shape[1], H = clip.shape[2], W = clip.shape[3];
  TensorF out({C, H, W});
  const int64_t n = out.numel();
  std::copy_n(clip.data.begin() + static_cast<int64_t>(f) * n, n, out.data.begin());
  return out;
}

std::string frame_name(const char* stem, int f) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%02d.png", stem, f);
  return buf;
}

}  // namespace

void write_sample(const std::string& dir, const TensorF& video, const TensorF& depth_rgb,
                  bool contact_sheet) {
  check_shape(depth_rgb.shape, video.shape, "depth frames");
  const int L = video.shape[0], H = video.shape[2], W = video.shape[3];
  std::filesystem::create_directories(dir);
  for (int f = 0; f < L; ++f) {
    write_png(dir + "/" + frame_name("video", f), frame_slice(video, f));
    write_png(dir + "/" + frame_name("depth", f), frame_slice(depth_rgb, f));
  }
  if (!contact_sheet) return;

  // Two rows: all video frames left to right, then the depth frames.
  TensorF sheet({3, 2 * H, L * W});
  const auto put = [&](const TensorF& clip, int row) {
    for (int f = 0; f < L; ++f)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const int64_t src = ((static_cast<int64_t>(f) * 3 + c) * H + y) * W + x;
            const int64_t dst =
                (static_cast<int64_t>(c) * 2 * H + row * H + y) * (L * W) + f * W + x;
            sheet.data[dst] = clip.data[src];
          }
  };
  put(video, 0);
  put(depth_rgb, 1);
  write_png(dir + "/contact.png", sheet);
}

}  // namespace idol
