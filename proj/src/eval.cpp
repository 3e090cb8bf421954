#include "idol/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "idol/consistency.hpp"
#include "idol/image.hpp"
#include "idol/sampler.hpp"

namespace idol {

namespace {

// Min-max scales to [0,1]; constant input is returned unchanged and flagged.
TensorF minmax_scale(const TensorF& x, bool* flat) {
  const auto [lo_it, hi_it] = std::minmax_element(x.data.begin(), x.data.end());
  const float lo = *lo_it, hi = *hi_it;
  if (flat) *flat = false;
  if (hi - lo < 1e-12f) {
    if (flat) *flat = true;
    return x;
  }
  TensorF out(x.shape);
  const float inv = 1.0f / (hi - lo);
  for (int64_t i = 0; i < x.numel(); ++i) out.data[i] = (x.data[i] - lo) * inv;
  return out;
}

}  // namespace

double depth_l2(const TensorF& pred, const TensorF& gt, bool* pred_flat, bool* gt_flat) {
  check_shape(pred.shape, gt.shape, "depth sequences");
  if (pred.numel() == 0) throw PreconditionError("empty depth sequence");
  const TensorF p = minmax_scale(pred, pred_flat);
  const TensorF g = minmax_scale(gt, gt_flat);
  double acc = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    const double d = static_cast<double>(p.data[i]) - static_cast<double>(g.data[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(p.numel()));
}

TensorF video_fg_mask(const TensorF& video, const std::array<double, 3>& color,
                      double tol) {
  if (video.ndim() != 4 || video.shape[1] != 3)
    throw PreconditionError("video mask needs an [L,3,H,W] clip");
  const int L = video.shape[0], H = video.shape[2], W = video.shape[3];
  const int64_t plane = static_cast<int64_t>(H) * W;
  TensorF mask({L, H, W});
  for (int f = 0; f < L; ++f)
    for (int64_t p = 0; p < plane; ++p) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff =
            video.data[(static_cast<int64_t>(f) * 3 + c) * plane + p] - color[c];
        d2 += diff * diff;
      }
      mask.data[f * plane + p] = d2 <= tol * tol ? 1.0f : 0.0f;
    }
  return mask;
}

TensorF depth_fg_mask(const TensorF& depth, double threshold) {
  if (depth.ndim() != 4 || depth.shape[1] != 1)
    throw PreconditionError("depth mask needs an [L,1,H,W] clip");
  const int L = depth.shape[0], H = depth.shape[2], W = depth.shape[3];
  const int64_t plane = static_cast<int64_t>(H) * W;
  TensorF mask({L, H, W});
  for (int64_t i = 0; i < mask.numel(); ++i)
    mask.data[i] = depth.data[i] > threshold ? 1.0f : 0.0f;
  (void)plane;
  return mask;
}

double mask_iou(const TensorF& a, const TensorF& b) {
  check_shape(a.shape, b.shape, "masks");
  if (a.ndim() != 3) throw PreconditionError("mask iou needs [L,H,W] masks");
  const int L = a.shape[0];
  const int64_t plane = static_cast<int64_t>(a.shape[1]) * a.shape[2];
  double acc = 0.0;
  for (int f = 0; f < L; ++f) {
    int64_t inter = 0, uni = 0;
    for (int64_t p = 0; p < plane; ++p) {
      const bool av = a.data[f * plane + p] > 0.5f;
      const bool bv = b.data[f * plane + p] > 0.5f;
      inter += av && bv;
      uni += av || bv;
    }
    acc += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return acc / L;
}

double silhouette_iou(const TensorF& video, const TensorF& depth,
                      const std::array<double, 3>& color, double fg_threshold,
                      double color_tol) {
  return mask_iou(video_fg_mask(video, color, color_tol),
                  depth_fg_mask(depth, fg_threshold));
}

double motion_divergence(const DenoiserConfig& cfg, ParameterStore<float>& params,
                         const DiffusionSchedule& sched, const TensorF& video,
                         const TensorF& depth_rgb, int t) {
  const int tt = t < 0 ? sched.steps / 2 : t;
  sched.check_t(tt);
  const float root_abar = static_cast<float>(std::sqrt(sched.alpha_bar[tt]));

  const auto attenuated = [&](const TensorF& img) {
    TensorF z = image_to_latent(img);
    for (auto& v : z.data) v *= root_abar;
    return z;
  };

  // Neutral conditioning: the diagnostic depends only on the two inputs.
  ConditionBundle cond;
  cond.fg_tokens = TensorF({DenoiserConfig::kFgTokens, cfg.cond_dim});
  cond.bg_latent = TensorF({cfg.latent_channels, cfg.height, cfg.width});
  cond.pose = TensorF({cfg.frames, cfg.pose_keypoints, cfg.height, cfg.width});

  const StreamOut a =
      single_forward(cfg, params, attenuated(video), tt, Modality::Video, cond, true);
  const StreamOut b =
      single_forward(cfg, params, attenuated(depth_rgb), tt, Modality::Video, cond, true);

  if (a.tap_features.empty()) throw PreconditionError("no feature taps captured");
  double acc = 0.0;
  for (size_t n = 0; n < a.tap_features.size(); ++n) {
    const float tau =
        static_cast<float>(1.0 / std::sqrt(static_cast<double>(a.tap_features[n].shape[1])));
    acc += motion_consistency_loss(a.tap_features[n], b.tap_features[n], tau);
  }
  return acc / static_cast<double>(a.tap_features.size());
}

EvalSummary aggregate_eval(std::vector<EvalCase> cases) {
  EvalSummary s;
  s.cases = std::move(cases);
  if (s.cases.empty()) return s;
  for (const EvalCase& c : s.cases) {
    s.depth_l2 += c.depth_l2;
    s.iou += c.iou;
    s.motion_divergence += c.motion_divergence;
    s.flagged += (c.pred_depth_flat || c.gt_depth_flat) ? 1 : 0;
  }
  const double n = static_cast<double>(s.cases.size());
  s.depth_l2 /= n;
  s.iou /= n;
  s.motion_divergence /= n;
  return s;
}

EvalSummary evaluate_model(const DenoiserConfig& cfg, ParameterStore<float>& params,
                           const DiffusionSchedule& sched,
                           const std::vector<SceneSpec>& eval_specs, int L, int H, int W,
                           const EvalOptions& opts) {
  if (eval_specs.empty()) throw PreconditionError("empty eval split");
  std::vector<EvalCase> cases;
  for (size_t i = 0; i < eval_specs.size(); ++i) {
    const SceneSpec& spec = eval_specs[i];
    const SceneSample gt = generate_scene(spec, L, H, W);
    ConditionBundle cond = make_condition(cfg, params, gt);
    const uint64_t scene_seed = opts.seed + (i + 1) * 0x9E3779B97F4A7C15ull;
    const auto [video, depth_rgb] =
        sample_joint(cfg, params, sched, cond, scene_seed, opts.coupled, opts.share);

    TensorF pred_depth({L, 1, H, W});
    for (int f = 0; f < L; ++f) {
      TensorF frame({3, H, W});
      const int64_t n3 = frame.numel();
      std::copy_n(depth_rgb.data.begin() + static_cast<int64_t>(f) * n3, n3,
                  frame.data.begin());
      const TensorF d = rgb_to_depth(frame, Colormap::Hot);
      std::copy_n(d.data.begin(), d.numel(),
                  pred_depth.data.begin() + static_cast<int64_t>(f) * d.numel());
    }

    EvalCase c;
    c.id = "eval_" + std::to_string(i);
    c.depth_l2 = depth_l2(pred_depth, gt.depth, &c.pred_depth_flat, &c.gt_depth_flat);
    c.iou = silhouette_iou(video, pred_depth, spec.color,
                           spec.sprite_depth - opts.depth_margin, opts.color_tol);
    c.motion_divergence =
        motion_divergence(cfg, params, sched, video, depth_rgb, opts.t_tap);
    cases.push_back(std::move(c));
  }
  return aggregate_eval(std::move(cases));
}

nlohmann::json eval_to_json(const EvalSummary& s) {
  nlohmann::json per_case = nlohmann::json::array();
  for (const EvalCase& c : s.cases)
    per_case.push_back({{"id", c.id},
                        {"depth_l2", c.depth_l2},
                        {"silhouette_iou", c.iou},
                        {"motion_divergence", c.motion_divergence},
                        {"pred_depth_flat", c.pred_depth_flat},
                        {"gt_depth_flat", c.gt_depth_flat}});
  return {{"depth_l2", s.depth_l2},
          {"silhouette_iou", s.iou},
          {"motion_divergence", s.motion_divergence},
          {"flagged_cases", s.flagged},
          {"cases", per_case}};
}

void write_eval_report(const std::string& json_path, const std::string& csv_path,
                       const EvalSummary& s) {
  {
    std::ofstream f(json_path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + json_path);
    f << eval_to_json(s).dump(2) << "\n";
  }
  std::ofstream f(csv_path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + csv_path);
  f << "id,depth_l2,silhouette_iou,motion_divergence,depth_flat\n";
  for (const EvalCase& c : s.cases)
    f << c.id << "," << c.depth_l2 << "," << c.iou << "," << c.motion_divergence << ","
      << (c.pred_depth_flat || c.gt_depth_flat ? 1 : 0) << "\n";
  f << "mean," << s.depth_l2 << "," << s.iou << "," << s.motion_divergence << ","
    << s.flagged << "\n";
  if (!f.flush()) throw IoError("csv write failed: " + csv_path);
}

}  // namespace idol
