#pragma once

#include <json.hpp>

#include <array>
#include <string>
#include <vector>

#include "idol/denoiser.hpp"
#include "idol/diffusion.hpp"
#include "idol/scenes.hpp"

namespace idol {

// Root-mean-square distance between two scalar depth sequences [L,1,H,W]
// after each is independently min-max scaled to [0,1] over the whole
// sequence. A constant sequence cannot be scaled; it is used as-is and the
// corresponding flag is set.
double depth_l2(const TensorF& pred, const TensorF& gt, bool* pred_flat = nullptr,
                bool* gt_flat = nullptr);

// Foreground mask [L,H,W] from a video clip: pixels whose RGB distance to the
// sprite color is below `tol`.
TensorF video_fg_mask(const TensorF& video, const std::array<double, 3>& color,
                      double tol = 0.35);

// Foreground mask [L,H,W] from a scalar depth clip: larger depth means
// nearer, so pixels above `threshold` are foreground.
TensorF depth_fg_mask(const TensorF& depth, double threshold);

// Mean per-frame intersection-over-union of two binary masks [L,H,W]. An
// empty union counts as 1 when both masks are empty (they agree) and 0
// otherwise.
double mask_iou(const TensorF& a, const TensorF& b);

// Video/depth silhouette agreement: IoU between the color-extracted video
// mask and the thresholded depth mask.
double silhouette_iou(const TensorF& video, const TensorF& depth,
                      const std::array<double, 3>& color, double fg_threshold,
                      double color_tol = 0.35);

// Feature-motion disagreement between a video clip and a depth rendering:
// both are encoded to latents, deterministically attenuated to the fixed
// mid-trajectory timestep (default steps/2), run through the denoiser as two
// independent video-labeled streams, and the per-block motion consistency of
// their tapped features is averaged. Identical inputs give exactly zero.
double motion_divergence(const DenoiserConfig& cfg, ParameterStore<float>& params,
                         const DiffusionSchedule& sched, const TensorF& video,
                         const TensorF& depth_rgb, int t = -1);

struct EvalCase {
  std::string id;
  double depth_l2 = 0.0;
  double iou = 0.0;
  double motion_divergence = 0.0;
  bool pred_depth_flat = false;
  bool gt_depth_flat = false;
};

struct EvalSummary {
  double depth_l2 = 0.0;  // means over cases
  double iou = 0.0;
  double motion_divergence = 0.0;
  int flagged = 0;
  std::vector<EvalCase> cases;
};

EvalSummary aggregate_eval(std::vector<EvalCase> cases);

struct EvalOptions {
  uint64_t seed = 0;        // base seed for per-scene sampling streams
  int t_tap = -1;           // motion-divergence timestep; -1 = steps/2
  double color_tol = 0.35;
  double depth_margin = 0.05;  // depth threshold = sprite_depth - margin
  bool coupled = true;
  XattnShareMode share = XattnShareMode::Independent;
};

// Samples one joint (video, depth) pair per eval spec and scores it against
// the rendered ground truth.
EvalSummary evaluate_model(const DenoiserConfig& cfg, ParameterStore<float>& params,
                           const DiffusionSchedule& sched,
                           const std::vector<SceneSpec>& eval_specs, int L, int H, int W,
                           const EvalOptions& opts);

nlohmann::json eval_to_json(const EvalSummary& s);
void write_eval_report(const std::string& json_path, const std::string& csv_path,
                       const EvalSummary& s);

}  // namespace idol
