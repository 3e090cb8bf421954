#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "idol/tensor.hpp"

namespace idol {

enum class SpriteShape { Circle, Square, Capsule };
enum class Colormap { Grayscale, Hot };

std::string shape_name(SpriteShape s);
SpriteShape parse_shape(const std::string& s);
std::string colormap_name(Colormap c);
Colormap parse_colormap(const std::string& s);

// All trajectory quantities are fractions of the frame; the sprite center at
// frame t is (x0 + vx*t, y0 + vy*t + sway_amp*sin(sway_freq*t)).
struct Trajectory {
  double x0 = 0.5, y0 = 0.5;
  double vx = 0.0, vy = 0.0;
  double sway_amp = 0.0;
  double sway_freq = 0.0;
};

struct SceneSpec {
  SpriteShape shape = SpriteShape::Circle;
  std::array<double, 3> color{1.0, 0.2, 0.2};
  double radius = 0.2;  // bounding radius as a fraction of min(H, W)
  Trajectory traj;
  double sprite_depth = 0.8;  // larger = nearer
  double bg_top = 0.1;        // background gradient, doubles as background depth
  double bg_bottom = 0.35;
  uint64_t seed = 0;
};

inline constexpr int kPoseKeypoints = 3;  // center, leading edge, trailing edge

struct SceneSample {
  TensorF video;          // [L, 3, H, W] in [0,1]
  TensorF depth;          // [L, 1, H, W] in [0,1]
  TensorF depth_rgb;      // [L, 3, H, W], hot-colormap rendering of depth
  TensorF pose_heatmaps;  // [L, kPoseKeypoints, H, W] in [0,1]
  TensorF fg_mask;        // [L, H, W], exactly 0 or 1
  TensorF fg_image;       // [3, H, W], sprite over black, frame-centered
  TensorF bg_image;       // [3, H, W], the bare gradient
};

// Sprite center in pixel coordinates at frame t.
std::pair<double, double> sprite_center(const SceneSpec& spec, int t, int H, int W);

// Checks the trajectory containment and depth-separation preconditions.
void validate_scene_spec(const SceneSpec& spec, int L, int H, int W);
bool scene_spec_valid(const SceneSpec& spec, int L, int H, int W);

SceneSample generate_scene(const SceneSpec& spec, int L, int H, int W);

// Depth <-> RGB codec. Out-of-range depths are clamped and counted.
TensorF depth_to_rgb(const TensorF& depth, Colormap cm);  // [1,H,W] -> [3,H,W]
TensorF rgb_to_depth(const TensorF& rgb, Colormap cm);    // [3,H,W] -> [1,H,W]
int64_t depth_clamp_warnings();
void reset_depth_clamp_warnings();

// Dataset planning: the train and eval splits draw from disjoint
// (shape, color-bin) combinations; membership is a pure function of the seed.
struct DatasetPlan {
  std::vector<SceneSpec> train;
  std::vector<SceneSpec> eval;
};
DatasetPlan plan_dataset(int train_scenes, int eval_scenes, uint64_t split_seed, int L = 8,
                         int H = 32, int W = 32);

// Convenience: materialize the train split (eval split sized num_scenes/4,
// at least 1).
std::vector<SceneSample> make_dataset(int num_scenes, uint64_t split_seed, int L, int H,
                                      int W);

// Disk layout: <root>/manifest.txt plus <root>/<split>/scene_NNNN/ holding
// video_FF.png, depth_FF.png, pose_FF_kK.png, mask_FF.png, fg.png, bg.png.
// The manifest records the frame geometry and one spec line per scene;
// loading reads only the manifest (samples regenerate exactly from specs).
void write_dataset(const std::string& root, const DatasetPlan& plan, int L, int H, int W);
struct LoadedDataset {
  DatasetPlan plan;
  int frames = 0, height = 0, width = 0;
};
LoadedDataset load_dataset(const std::string& root);

std::string scene_spec_line(const SceneSpec& spec);
SceneSpec parse_scene_spec_line(const std::string& line);

}  // namespace idol
