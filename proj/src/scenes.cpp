#include "idol/scenes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "idol/image.hpp"
#include "idol/rng.hpp"

namespace idol {

namespace {

constexpr double kSigma = 1.5;      // pose bump width in pixels
constexpr double kCapsuleThick = 0.45;  // capsule thickness as a fraction of radius

std::atomic<int64_t> g_clamp_warnings{0};

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double bg_value(const SceneSpec& spec, double y, int H) {
  return spec.bg_top + (spec.bg_bottom - spec.bg_top) * ((y + 0.5) / H);
}

// Signed distance from pixel point p to the sprite boundary, in pixels.
// Every shape fits inside the bounding radius R.
double sprite_sdf(SpriteShape shape, double px, double py, double cx, double cy, double R,
                  double dirx, double diry) {
  const double dx = px - cx, dy = py - cy;
  switch (shape) {
    case SpriteShape::Circle:
      return std::sqrt(dx * dx + dy * dy) - R;
    case SpriteShape::Square:
      return std::max(std::abs(dx), std::abs(dy)) - R;
    case SpriteShape::Capsule: {
      const double thick = kCapsuleThick * R;
      const double half = R - thick;  // segment half-length; total extent = R
      const double ax = cx - dirx * half, ay = cy - diry * half;
      const double bx = cx + dirx * half, by = cy + diry * half;
      const double ux = bx - ax, uy = by - ay;
      const double len2 = ux * ux + uy * uy;
      double s = len2 > 0.0 ? ((px - ax) * ux + (py - ay) * uy) / len2 : 0.0;
      s = std::min(std::max(s, 0.0), 1.0);
      const double qx = ax + s * ux, qy = ay + s * uy;
      const double ex = px - qx, ey = py - qy;
      return std::sqrt(ex * ex + ey * ey) - thick;
    }
  }
  return 0.0;
}

// Unit motion direction at frame t (defaults to +x when nearly stationary).
std::pair<double, double> motion_dir(const SceneSpec& spec, int t, int H, int W) {
  const auto& tr = spec.traj;
  double vx = tr.vx * W;
  double vy = (tr.vy + tr.sway_amp * tr.sway_freq * std::cos(tr.sway_freq * t)) * H;
  const double n = std::sqrt(vx * vx + vy * vy);
  if (n < 1e-9) return {1.0, 0.0};
  return {vx / n, vy / n};
}

void add_gaussian(float* plane, int H, int W, double kx, double ky) {
  const double inv = 1.0 / (2.0 * kSigma * kSigma);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double dx = (x + 0.5) - kx, dy = (y + 0.5) - ky;
      const double v = std::exp(-(dx * dx + dy * dy) * inv);
      float& cell = plane[y * W + x];
      cell = static_cast<float>(std::max(static_cast<double>(cell), v));
    }
}

}  // namespace

std::string shape_name(SpriteShape s) {
  switch (s) {
    case SpriteShape::Circle: return "circle";
    case SpriteShape::Square: return "square";
    case SpriteShape::Capsule: return "capsule";
  }
  return "?";
}

SpriteShape parse_shape(const std::string& s) {
  if (s == "circle") return SpriteShape::Circle;
  if (s == "square") return SpriteShape::Square;
  if (s == "capsule") return SpriteShape::Capsule;
  throw PreconditionError("unknown sprite shape: " + s);
}

std::string colormap_name(Colormap c) {
  return c == Colormap::Hot ? "hot" : "grayscale";
}

Colormap parse_colormap(const std::string& s) {
  if (s == "hot") return Colormap::Hot;
  if (s == "grayscale") return Colormap::Grayscale;
  throw PreconditionError("unknown colormap: " + s);
}

std::pair<double, double> sprite_center(const SceneSpec& spec, int t, int H, int W) {
  const auto& tr = spec.traj;
  const double fx = tr.x0 + tr.vx * t;
  const double fy = tr.y0 + tr.vy * t + tr.sway_amp * std::sin(tr.sway_freq * t);
  return {fx * W, fy * H};
}

void validate_scene_spec(const SceneSpec& spec, int L, int H, int W) {
  if (L < 1 || H < 1 || W < 1) throw PreconditionError("frame geometry must be positive");
  if (spec.radius <= 0.0) throw PreconditionError("sprite radius must be positive");
  if (spec.sprite_depth <= 0.0 || spec.sprite_depth >= 1.0)
    throw PreconditionError("sprite depth must lie in (0,1)");
  for (double c : spec.color)
    if (c < 0.0 || c > 1.0) throw PreconditionError("sprite color must lie in [0,1]");
  if (spec.bg_top < 0.0 || spec.bg_top > 1.0 || spec.bg_bottom < 0.0 || spec.bg_bottom > 1.0)
    throw PreconditionError("background gradient must lie in [0,1]");

  const double R = spec.radius * std::min(H, W);
  double ymin = 1e30, ymax = -1e30;
  for (int t = 0; t < L; ++t) {
    const auto [cx, cy] = sprite_center(spec, t, H, W);
    if (cx - R < 1.0 || cx + R > W - 1.0 || cy - R < 1.0 || cy + R > H - 1.0)
      throw PreconditionError("trajectory leaves the frame at frame " + std::to_string(t));
    ymin = std::min(ymin, cy - R);
    ymax = std::max(ymax, cy + R);
  }
  const int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(ymax)));
  for (int y = y0; y <= y1; ++y)
    if (std::abs(spec.sprite_depth - bg_value(spec, y, H)) < 0.1)
      throw PreconditionError("sprite depth too close to the background at row " +
                              std::to_string(y));
}

bool scene_spec_valid(const SceneSpec& spec, int L, int H, int W) {
  try {
    validate_scene_spec(spec, L, H, W);
    return true;
  } catch (const PreconditionError&) {
    return false;
  }
}

SceneSample generate_scene(const SceneSpec& spec, int L, int H, int W) {
  validate_scene_spec(spec, L, H, W);
  const double R = spec.radius * std::min(H, W);

  SceneSample s;
  s.video = TensorF({L, 3, H, W});
  s.depth = TensorF({L, 1, H, W});
  s.pose_heatmaps = TensorF({L, kPoseKeypoints, H, W});
  s.fg_mask = TensorF({L, H, W});
  s.fg_image = TensorF({3, H, W});
  s.bg_image = TensorF({3, H, W});

  const int64_t plane = static_cast<int64_t>(H) * W;

  for (int y = 0; y < H; ++y) {
    const float bg = static_cast<float>(bg_value(spec, y, H));
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) s.bg_image.data[c * plane + y * W + x] = bg;
  }

  for (int t = 0; t < L; ++t) {
    const auto [cx, cy] = sprite_center(spec, t, H, W);
    const auto [dirx, diry] = motion_dir(spec, t, H, W);
    float* vid = s.video.data.data() + static_cast<int64_t>(t) * 3 * plane;
    float* dep = s.depth.data.data() + static_cast<int64_t>(t) * plane;
    float* mask = s.fg_mask.data.data() + static_cast<int64_t>(t) * plane;
    for (int y = 0; y < H; ++y) {
      const double bg = bg_value(spec, y, H);
      for (int x = 0; x < W; ++x) {
        const double sd =
            sprite_sdf(spec.shape, x + 0.5, y + 0.5, cx, cy, R, dirx, diry);
        const double alpha = clamp01(0.5 - sd);  // one-pixel soft edge
        const bool fg = alpha > 0.5;
        mask[y * W + x] = fg ? 1.0f : 0.0f;
        dep[y * W + x] = static_cast<float>(fg ? spec.sprite_depth : bg);
        for (int c = 0; c < 3; ++c)
          vid[c * plane + y * W + x] =
              static_cast<float>(alpha * spec.color[c] + (1.0 - alpha) * bg);
      }
    }
    float* pose = s.pose_heatmaps.data.data() +
                  static_cast<int64_t>(t) * kPoseKeypoints * plane;
    add_gaussian(pose, H, W, cx, cy);
    add_gaussian(pose + plane, H, W, cx + dirx * R, cy + diry * R);
    add_gaussian(pose + 2 * plane, H, W, cx - dirx * R, cy - diry * R);
  }

  // Identity image: the sprite alone, frame-centered, over black.
  {
    const double cx = W * 0.5, cy = H * 0.5;
    const auto [dirx, diry] = motion_dir(spec, 0, H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double sd =
            sprite_sdf(spec.shape, x + 0.5, y + 0.5, cx, cy, R, dirx, diry);
        const double alpha = clamp01(0.5 - sd);
        for (int c = 0; c < 3; ++c)
          s.fg_image.data[c * plane + y * W + x] =
              static_cast<float>(alpha * spec.color[c]);
      }
  }

  s.depth_rgb = TensorF({L, 3, H, W});
  for (int t = 0; t < L; ++t) {
    TensorF d1({1, H, W});
    std::copy_n(s.depth.data.begin() + static_cast<int64_t>(t) * plane, plane,
                d1.data.begin());
    const TensorF rgb = depth_to_rgb(d1, Colormap::Hot);
    std::copy_n(rgb.data.begin(), 3 * plane,
                s.depth_rgb.data.begin() + static_cast<int64_t>(t) * 3 * plane);
  }
  return s;
}

TensorF depth_to_rgb(const TensorF& depth, Colormap cm) {
  if (depth.ndim() != 3 || depth.shape[0] != 1)
    throw ShapeError("depth_to_rgb expects [1, H, W]");
  const int H = depth.shape[1], W = depth.shape[2];
  const int64_t plane = static_cast<int64_t>(H) * W;
  TensorF out({3, H, W});
  for (int64_t i = 0; i < plane; ++i) {
    double d = depth.data[i];
    if (d < 0.0 || d > 1.0) {
      g_clamp_warnings.fetch_add(1, std::memory_order_relaxed);
      d = clamp01(d);
    }
    if (cm == Colormap::Grayscale) {
      out.data[i] = out.data[plane + i] = out.data[2 * plane + i] = static_cast<float>(d);
    } else {
      out.data[i] = static_cast<float>(clamp01(3.0 * d));
      out.data[plane + i] = static_cast<float>(clamp01(3.0 * d - 1.0));
      out.data[2 * plane + i] = static_cast<float>(clamp01(3.0 * d - 2.0));
    }
  }
  return out;
}

namespace {

// Dense sample table of the hot curve for nearest-point inversion.
const std::vector<std::array<double, 3>>& hot_table() {
  static const std::vector<std::array<double, 3>> table = [] {
    std::vector<std::array<double, 3>> t(1024);
    for (int i = 0; i < 1024; ++i) {
      const double d = static_cast<double>(i) / 1023.0;
      t[i] = {clamp01(3.0 * d), clamp01(3.0 * d - 1.0), clamp01(3.0 * d - 2.0)};
    }
    return t;
  }();
  return table;
}

}  // namespace

TensorF rgb_to_depth(const TensorF& rgb, Colormap cm) {
  if (rgb.ndim() != 3 || rgb.shape[0] != 3) throw ShapeError("rgb_to_depth expects [3, H, W]");
  const int H = rgb.shape[1], W = rgb.shape[2];
  const int64_t plane = static_cast<int64_t>(H) * W;
  TensorF out({1, H, W});
  if (cm == Colormap::Grayscale) {
    for (int64_t i = 0; i < plane; ++i)
      out.data[i] = static_cast<float>(
          (static_cast<double>(rgb.data[i]) + rgb.data[plane + i] + rgb.data[2 * plane + i]) /
          3.0);
    return out;
  }
  const auto& table = hot_table();
  for (int64_t i = 0; i < plane; ++i) {
    const double r = rgb.data[i], g = rgb.data[plane + i], b = rgb.data[2 * plane + i];
    double best = 1e30;
    int best_i = 0;
    for (int k = 0; k < 1024; ++k) {
      const double dr = r - table[k][0], dg = g - table[k][1], db = b - table[k][2];
      const double dist = dr * dr + dg * dg + db * db;
      if (dist < best) {
        best = dist;
        best_i = k;
      }
    }
    out.data[i] = static_cast<float>(static_cast<double>(best_i) / 1023.0);
  }
  return out;
}

int64_t depth_clamp_warnings() { return g_clamp_warnings.load(std::memory_order_relaxed); }
void reset_depth_clamp_warnings() { g_clamp_warnings.store(0, std::memory_order_relaxed); }

namespace {

// Well-separated palette; the bin index is the color identity used for the
// disjoint train/eval split.
const std::array<std::array<double, 3>, 8> kPalette = {{
    {1.00, 0.15, 0.15},  // red
    {1.00, 0.60, 0.10},  // orange
    {0.95, 0.95, 0.20},  // yellow
    {0.20, 0.90, 0.25},  // green
    {0.15, 0.85, 0.90},  // cyan
    {0.20, 0.35, 0.95},  // blue
    {0.60, 0.25, 0.90},  // purple
    {0.95, 0.30, 0.75},  // magenta
}};

SceneSpec draw_scene(Rng& rng, SpriteShape shape, int color_bin, uint64_t seed, int L,
                     int H, int W) {
  SceneSpec spec;
  spec.shape = shape;
  spec.color = kPalette[static_cast<size_t>(color_bin)];
  spec.seed = seed;
  // Rejection-sample a trajectory that satisfies the containment invariant at
  // the target geometry (the margin is absolute, so small frames are the
  // tight case).
  for (int attempt = 0; attempt < 200; ++attempt) {
    spec.radius = rng.uniform(0.12, 0.22);
    spec.traj.x0 = rng.uniform(0.30, 0.70);
    spec.traj.y0 = rng.uniform(0.30, 0.70);
    spec.traj.vx = rng.uniform(-0.035, 0.035);
    spec.traj.vy = rng.uniform(-0.025, 0.025);
    spec.traj.sway_amp = rng.uniform(0.0, 0.03);
    spec.traj.sway_freq = rng.uniform(0.3, 1.0);
    spec.sprite_depth = rng.uniform(0.65, 0.90);
    spec.bg_top = rng.uniform(0.05, 0.45);
    spec.bg_bottom = rng.uniform(0.05, 0.45);
    if (scene_spec_valid(spec, L, H, W)) return spec;
  }
  // Deterministic safe fallback: a slow center orbit.
  spec.radius = 0.15;
  spec.traj = {0.5, 0.5, 0.01, 0.0, 0.02, 0.8};
  spec.sprite_depth = 0.8;
  spec.bg_top = 0.1;
  spec.bg_bottom = 0.4;
  return spec;
}

}  // namespace

DatasetPlan plan_dataset(int train_scenes, int eval_scenes, uint64_t split_seed, int L,
                         int H, int W) {
  if (train_scenes < 1 || eval_scenes < 1)
    throw PreconditionError("both splits need at least one scene");

  // Enumerate the (shape, color-bin) identity combinations and split them
  // disjointly: one quarter (at least one) goes to eval.
  struct Combo {
    SpriteShape shape;
    int bin;
  };
  std::vector<Combo> combos;
  for (SpriteShape sh : {SpriteShape::Circle, SpriteShape::Square, SpriteShape::Capsule})
    for (int b = 0; b < static_cast<int>(kPalette.size()); ++b) combos.push_back({sh, b});

  Rng shuffle_rng = named_stream(split_seed, "dataset.split");
  for (size_t i = combos.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(shuffle_rng.uniform_below(i));
    std::swap(combos[i - 1], combos[j]);
  }
  const size_t eval_combos = std::max<size_t>(1, combos.size() / 4);

  DatasetPlan plan;
  for (int i = 0; i < train_scenes; ++i) {
    const Combo& c = combos[static_cast<size_t>(i) % (combos.size() - eval_combos)];
    Rng rng = named_stream(split_seed, "scene.train." + std::to_string(i));
    plan.train.push_back(draw_scene(
        rng, c.shape, c.bin, split_seed * 1000003ULL + static_cast<uint64_t>(i), L, H, W));
  }
  for (int i = 0; i < eval_scenes; ++i) {
    const Combo& c =
        combos[combos.size() - eval_combos + static_cast<size_t>(i) % eval_combos];
    Rng rng = named_stream(split_seed, "scene.eval." + std::to_string(i));
    plan.eval.push_back(draw_scene(
        rng, c.shape, c.bin, split_seed * 2000003ULL + static_cast<uint64_t>(i), L, H, W));
  }
  return plan;
}

std::vector<SceneSample> make_dataset(int num_scenes, uint64_t split_seed, int L, int H,
                                      int W) {
  if (num_scenes < 1) throw PreconditionError("num_scenes must be >= 1");
  const DatasetPlan plan =
      plan_dataset(num_scenes, std::max(1, num_scenes / 4), split_seed, L, H, W);
  std::vector<SceneSample> out;
  out.reserve(plan.train.size());
  for (const SceneSpec& spec : plan.train) out.push_back(generate_scene(spec, L, H, W));
  return out;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string scene_spec_line(const SceneSpec& spec) {
  std::ostringstream os;
  os << "shape=" << shape_name(spec.shape) << " color=" << fmt_double(spec.color[0]) << ','
     << fmt_double(spec.color[1]) << ',' << fmt_double(spec.color[2])
     << " radius=" << fmt_double(spec.radius) << " x0=" << fmt_double(spec.traj.x0)
     << " y0=" << fmt_double(spec.traj.y0) << " vx=" << fmt_double(spec.traj.vx)
     << " vy=" << fmt_double(spec.traj.vy) << " sway_amp=" << fmt_double(spec.traj.sway_amp)
     << " sway_freq=" << fmt_double(spec.traj.sway_freq)
     << " depth=" << fmt_double(spec.sprite_depth) << " bg=" << fmt_double(spec.bg_top) << ','
     << fmt_double(spec.bg_bottom) << " seed=" << spec.seed;
  return os.str();
}

SceneSpec parse_scene_spec_line(const std::string& line) {
  SceneSpec spec;
  std::istringstream is(line);
  std::string tok;
  bool got_shape = false;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos)
      throw PreconditionError("malformed scene spec token: " + tok);
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    auto three = [&](std::array<double, 3>& out) {
      if (std::sscanf(val.c_str(), "%lf,%lf,%lf", &out[0], &out[1], &out[2]) != 3)
        throw PreconditionError("malformed triple in scene spec: " + tok);
    };
    if (key == "shape") {
      spec.shape = parse_shape(val);
      got_shape = true;
    } else if (key == "color") {
      three(spec.color);
    } else if (key == "radius") {
      spec.radius = std::stod(val);
    } else if (key == "x0") {
      spec.traj.x0 = std::stod(val);
    } else if (key == "y0") {
      spec.traj.y0 = std::stod(val);
    } else if (key == "vx") {
      spec.traj.vx = std::stod(val);
    } else if (key == "vy") {
      spec.traj.vy = std::stod(val);
    } else if (key == "sway_amp") {
      spec.traj.sway_amp = std::stod(val);
    } else if (key == "sway_freq") {
      spec.traj.sway_freq = std::stod(val);
    } else if (key == "depth") {
      spec.sprite_depth = std::stod(val);
    } else if (key == "bg") {
      std::array<double, 3> v{};
      if (std::sscanf(val.c_str(), "%lf,%lf", &v[0], &v[1]) != 2)
        throw PreconditionError("malformed background gradient: " + tok);
      spec.bg_top = v[0];
      spec.bg_bottom = v[1];
    } else if (key == "seed") {
      spec.seed = std::stoull(val);
    } else {
      throw PreconditionError("unknown scene spec key: " + key);
    }
  }
  if (!got_shape) throw PreconditionError("scene spec line missing shape");
  return spec;
}

namespace {

void write_scene_dir(const std::string& dir, const SceneSample& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int L = s.video.shape[0], H = s.video.shape[2], W = s.video.shape[3];
  const int64_t plane = static_cast<int64_t>(H) * W;
  char name[64];
  for (int t = 0; t < L; ++t) {
    TensorF frame({3, H, W});
    std::copy_n(s.video.data.begin() + static_cast<int64_t>(t) * 3 * plane, 3 * plane,
                frame.data.begin());
    std::snprintf(name, sizeof(name), "/video_%02d.png", t);
    write_png(dir + name, frame);

    std::copy_n(s.depth_rgb.data.begin() + static_cast<int64_t>(t) * 3 * plane, 3 * plane,
                frame.data.begin());
    std::snprintf(name, sizeof(name), "/depth_%02d.png", t);
    write_png(dir + name, frame);

    TensorF gray({1, H, W});
    for (int k = 0; k < kPoseKeypoints; ++k) {
      std::copy_n(s.pose_heatmaps.data.begin() +
                      (static_cast<int64_t>(t) * kPoseKeypoints + k) * plane,
                  plane, gray.data.begin());
      std::snprintf(name, sizeof(name), "/pose_%02d_k%d.png", t, k);
      write_png(dir + name, gray);
    }
    std::copy_n(s.fg_mask.data.begin() + static_cast<int64_t>(t) * plane, plane,
                gray.data.begin());
    std::snprintf(name, sizeof(name), "/mask_%02d.png", t);
    write_png(dir + name, gray);
  }
  write_png(dir + "/fg.png", s.fg_image);
  write_png(dir + "/bg.png", s.bg_image);
}

}  // namespace

void write_dataset(const std::string& root, const DatasetPlan& plan, int L, int H, int W) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::ofstream manifest(root + "/manifest.txt");
  if (!manifest) throw IoError("cannot write manifest under " + root);
  manifest << "idol-dataset 1\n";
  manifest << "frames " << L << "\nheight " << H << "\nwidth " << W << "\n";
  manifest << "train " << plan.train.size() << "\neval " << plan.eval.size() << "\n";
  char dirname[64];
  for (size_t i = 0; i < plan.train.size(); ++i) {
    manifest << "spec train " << scene_spec_line(plan.train[i]) << "\n";
    std::snprintf(dirname, sizeof(dirname), "/train/scene_%04zu", i);
    write_scene_dir(root + dirname, generate_scene(plan.train[i], L, H, W));
  }
  for (size_t i = 0; i < plan.eval.size(); ++i) {
    manifest << "spec eval " << scene_spec_line(plan.eval[i]) << "\n";
    std::snprintf(dirname, sizeof(dirname), "/eval/scene_%04zu", i);
    write_scene_dir(root + dirname, generate_scene(plan.eval[i], L, H, W));
  }
  if (!manifest.flush()) throw IoError("manifest write failed under " + root);
}

LoadedDataset load_dataset(const std::string& root) {
  std::ifstream in(root + "/manifest.txt");
  if (!in) throw IoError("cannot read manifest under " + root);
  LoadedDataset out;
  std::string line;
  if (!std::getline(in, line) || line.rfind("idol-dataset ", 0) != 0)
    throw IoError("not a dataset manifest: " + root);
  size_t n_train = 0, n_eval = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "frames") {
      is >> out.frames;
    } else if (key == "height") {
      is >> out.height;
    } else if (key == "width") {
      is >> out.width;
    } else if (key == "train") {
      is >> n_train;
    } else if (key == "eval") {
      is >> n_eval;
    } else if (key == "spec") {
      std::string split;
      is >> split;
      std::string rest;
      std::getline(is, rest);
      const SceneSpec spec = parse_scene_spec_line(rest);
      if (split == "train")
        out.plan.train.push_back(spec);
      else if (split == "eval")
        out.plan.eval.push_back(spec);
      else
        throw IoError("unknown split in manifest: " + split);
    } else {
      throw IoError("unknown manifest key: " + key);
    }
  }
  if (out.plan.train.size() != n_train || out.plan.eval.size() != n_eval)
    throw IoError("manifest scene counts disagree with spec lines");
  if (out.frames < 1 || out.height < 1 || out.width < 1)
    throw IoError("manifest missing frame geometry");
  return out;
}

}  // namespace idol
