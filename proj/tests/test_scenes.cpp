#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <set>

#include "idol/image.hpp"
#include "idol/rng.hpp"
#include "idol/scenes.hpp"

using namespace idol;

namespace {

SceneSpec basic_spec() {
  SceneSpec s;
  s.shape = SpriteShape::Circle;
  s.color = {0.9, 0.2, 0.1};
  s.radius = 0.2;
  s.traj = {0.5, 0.5, 0.0, 0.0, 0.0, 0.0};
  s.sprite_depth = 0.8;
  s.bg_top = 0.1;
  s.bg_bottom = 0.35;
  return s;
}

}  // namespace

TEST_CASE("hot colormap endpoint and midpoint anchors") {
  TensorF d({1, 1, 3}, {0.0f, 0.5f, 1.0f});
  const TensorF hot = depth_to_rgb(d, Colormap::Hot);
  // d=0 -> (0,0,0)
  CHECK(hot.data[0] == 0.0f);
  CHECK(hot.data[3] == 0.0f);
  CHECK(hot.data[6] == 0.0f);
  // d=0.5 -> (1, 0.5, 0)
  CHECK(hot.data[1] == 1.0f);
  CHECK(hot.data[4] == 0.5f);
  CHECK(hot.data[7] == 0.0f);
  // d=1 -> (1,1,1)
  CHECK(hot.data[2] == 1.0f);
  CHECK(hot.data[5] == 1.0f);
  CHECK(hot.data[8] == 1.0f);

  const TensorF gray = depth_to_rgb(d, Colormap::Grayscale);
  for (int c = 0; c < 3; ++c) {
    CHECK(gray.data[c * 3 + 0] == 0.0f);
    CHECK(gray.data[c * 3 + 2] == 1.0f);
  }
  TensorF q({1, 1, 1}, {0.25f});
  const TensorF g2 = depth_to_rgb(q, Colormap::Grayscale);
  CHECK(g2.data[0] == 0.25f);
  CHECK(g2.data[1] == 0.25f);
  CHECK(g2.data[2] == 0.25f);
}

TEST_CASE("codec round trip stays within 1e-3 over a dense sweep") {
  const int n = 1024;
  TensorF d({1, 1, n});
  for (int i = 0; i < n; ++i) d.data[i] = static_cast<float>(i) / (n - 1);
  for (Colormap cm : {Colormap::Hot, Colormap::Grayscale}) {
    const TensorF rgb = depth_to_rgb(d, cm);
    const TensorF back = rgb_to_depth(rgb, cm);
    double worst = 0.0;
    for (int i = 0; i < n; ++i)
      worst = std::max(worst, std::abs(static_cast<double>(back.data[i]) - d.data[i]));
    CHECK(worst <= 1e-3);
  }
  // Off-grid depths (between table samples) must still invert within 1e-3.
  TensorF e({1, 1, 997});
  for (int i = 0; i < 997; ++i) e.data[i] = static_cast<float>(i) / 996.0f;
  const TensorF back = rgb_to_depth(depth_to_rgb(e, Colormap::Hot), Colormap::Hot);
  for (int i = 0; i < 997; ++i)
    CHECK(std::abs(static_cast<double>(back.data[i]) - e.data[i]) <= 1e-3);
}

TEST_CASE("decoder accepts off-manifold colors") {
  TensorF gray({3, 1, 1}, {0.3f, 0.3f, 0.3f});
  CHECK(rgb_to_depth(gray, Colormap::Grayscale).data[0] == doctest::Approx(0.3).epsilon(1e-6));
  TensorF white({3, 1, 1}, {1.0f, 1.0f, 1.0f});
  CHECK(rgb_to_depth(white, Colormap::Hot).data[0] == 1.0f);
  TensorF weird({3, 1, 1}, {0.2f, 0.9f, 0.1f});
  const float d = rgb_to_depth(weird, Colormap::Hot).data[0];
  CHECK(d >= 0.0f);
  CHECK(d <= 1.0f);
}

TEST_CASE("out-of-range depths are clamped and counted") {
  reset_depth_clamp_warnings();
  TensorF d({1, 1, 3}, {-0.1f, 0.5f, 1.2f});
  const TensorF rgb = depth_to_rgb(d, Colormap::Hot);
  CHECK(depth_clamp_warnings() == 2);
  for (float v : rgb.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  reset_depth_clamp_warnings();
  CHECK(depth_clamp_warnings() == 0);
}

TEST_CASE("scene generation is a pure function of the spec") {
  const SceneSpec spec = basic_spec();
  const SceneSample a = generate_scene(spec, 3, 16, 16);
  const SceneSample b = generate_scene(spec, 3, 16, 16);
  CHECK(a.video.data == b.video.data);
  CHECK(a.depth.data == b.depth.data);
  CHECK(a.depth_rgb.data == b.depth_rgb.data);
  CHECK(a.pose_heatmaps.data == b.pose_heatmaps.data);
  CHECK(a.fg_mask.data == b.fg_mask.data);
  CHECK(a.fg_image.data == b.fg_image.data);
  CHECK(a.bg_image.data == b.bg_image.data);
}

TEST_CASE("zero velocity freezes every frame") {
  const SceneSample s = generate_scene(basic_spec(), 4, 16, 16);
  const int64_t frame = s.video.numel() / 4;
  for (int t = 1; t < 4; ++t)
    for (int64_t i = 0; i < frame; ++i)
      CHECK(s.video.data[t * frame + i] == s.video.data[i]);
  const int64_t pframe = s.pose_heatmaps.numel() / 4;
  for (int t = 1; t < 4; ++t)
    for (int64_t i = 0; i < pframe; ++i)
      CHECK(s.pose_heatmaps.data[t * pframe + i] == s.pose_heatmaps.data[i]);
}

TEST_CASE("rasterized circle area matches the analytic formula within 10%") {
  for (int size : {32, 64}) {
    const SceneSample s = generate_scene(basic_spec(), 1, size, size);
    double count = 0;
    for (float v : s.fg_mask.data) count += v;
    const double expected = M_PI * 0.2 * size * 0.2 * size;
    CHECK(count >= 0.9 * expected);
    CHECK(count <= 1.1 * expected);
  }
}

TEST_CASE("depth is two-valued: sprite level under the mask, gradient elsewhere") {
  const SceneSpec spec = basic_spec();
  const int H = 24, W = 20, L = 2;
  const SceneSample s = generate_scene(spec, L, H, W);
  for (int t = 0; t < L; ++t)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float m = s.fg_mask.data[(static_cast<int64_t>(t) * H + y) * W + x];
        const float d = s.depth.data[(static_cast<int64_t>(t) * H + y) * W + x];
        const float bg = static_cast<float>(
            spec.bg_top + (spec.bg_bottom - spec.bg_top) * ((y + 0.5) / H));
        if (m == 1.0f) {
          CHECK(d == static_cast<float>(spec.sprite_depth));
          CHECK(std::abs(d - bg) >= 0.1f);
        } else {
          CHECK(m == 0.0f);
          CHECK(d == bg);
        }
      }
}

TEST_CASE("background image is the vertical gradient on all channels") {
  const SceneSpec spec = basic_spec();
  const int H = 16, W = 16;
  const SceneSample s = generate_scene(spec, 1, H, W);
  for (int y = 0; y < H; ++y) {
    const float expect = static_cast<float>(
        spec.bg_top + (spec.bg_bottom - spec.bg_top) * ((y + 0.5) / H));
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(s.bg_image.data[(static_cast<int64_t>(c) * H + y) * W + x] == expect);
  }
  // A pixel far from the centered sprite shows the bare background.
  CHECK(s.video.data[0] == s.bg_image.data[0]);
}

TEST_CASE("per-sample depth decode recovers the analytic depth within 1e-3 MAE") {
  const SceneSample s = generate_scene(basic_spec(), 2, 16, 16);
  const int64_t plane = 16 * 16;
  for (int t = 0; t < 2; ++t) {
    TensorF rgb({3, 16, 16});
    std::copy_n(s.depth_rgb.data.begin() + t * 3 * plane, 3 * plane, rgb.data.begin());
    const TensorF dec = rgb_to_depth(rgb, Colormap::Hot);
    double mae = 0.0;
    for (int64_t i = 0; i < plane; ++i)
      mae += std::abs(static_cast<double>(dec.data[i]) - s.depth.data[t * plane + i]);
    mae /= static_cast<double>(plane);
    CHECK(mae <= 1e-3);
  }
}

TEST_CASE("pose heatmap peaks sit on the analytic keypoints") {
  SceneSpec spec = basic_spec();
  spec.traj = {0.35, 0.45, 0.03, 0.01, 0.0, 0.0};
  const int H = 32, W = 32, L = 4;
  const SceneSample s = generate_scene(spec, L, H, W);
  const int64_t plane = static_cast<int64_t>(H) * W;
  for (int t = 0; t < L; ++t) {
    const auto [cx, cy] = sprite_center(spec, t, H, W);
    const float* plane0 = s.pose_heatmaps.data.data() + t * kPoseKeypoints * plane;
    int best = 0;
    for (int i = 1; i < plane; ++i)
      if (plane0[i] > plane0[best]) best = i;
    const double px = best % W + 0.5, py = best / W + 0.5;
    CHECK(std::hypot(px - cx, py - cy) <= 1.0);
    for (int k = 0; k < kPoseKeypoints; ++k)
      for (int64_t i = 0; i < plane; ++i) {
        CHECK(plane0[k * plane + i] >= 0.0f);
        CHECK(plane0[k * plane + i] <= 1.0f);
      }
  }
  // Motion direction: the center must drift right and slightly down.
  const auto [x0, y0] = sprite_center(spec, 0, H, W);
  const auto [x3, y3] = sprite_center(spec, 3, H, W);
  CHECK(x3 > x0);
  CHECK(y3 > y0);
}

TEST_CASE("foreground image holds the sprite alone over black") {
  const SceneSample s = generate_scene(basic_spec(), 1, 32, 32);
  const int64_t plane = 32 * 32;
  // Frame center: pure sprite color.
  const int64_t mid = 16 * 32 + 16;
  CHECK(s.fg_image.data[mid] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(s.fg_image.data[plane + mid] == doctest::Approx(0.2).epsilon(1e-6));
  // Far corner: black.
  CHECK(s.fg_image.data[0] == 0.0f);
  CHECK(s.fg_image.data[plane - 1] == 0.0f);
}

TEST_CASE("invalid scenes are rejected") {
  SceneSpec spec = basic_spec();
  spec.traj.vx = 0.2;  // exits the frame within a few frames
  CHECK_THROWS_AS(generate_scene(spec, 8, 32, 32), PreconditionError);

  spec = basic_spec();
  spec.sprite_depth = 0.3;  // within 0.1 of the gradient mid values
  CHECK_THROWS_AS(generate_scene(spec, 2, 32, 32), PreconditionError);

  spec = basic_spec();
  spec.radius = 0.7;  // cannot fit inside the frame
  CHECK_THROWS_AS(generate_scene(spec, 1, 32, 32), PreconditionError);
}

TEST_CASE("all three sprite shapes render with consistent masks") {
  for (SpriteShape sh : {SpriteShape::Circle, SpriteShape::Square, SpriteShape::Capsule}) {
    SceneSpec spec = basic_spec();
    spec.shape = sh;
    spec.traj.vx = 0.01;
    const SceneSample s = generate_scene(spec, 2, 32, 32);
    double area = 0;
    for (float v : s.fg_mask.data) area += v;
    CHECK(area > 0);
    for (float v : s.fg_mask.data) CHECK((v == 0.0f || v == 1.0f));
  }
  CHECK(parse_shape(shape_name(SpriteShape::Capsule)) == SpriteShape::Capsule);
  CHECK_THROWS_AS(parse_shape("triangle"), PreconditionError);
  CHECK(parse_colormap("hot") == Colormap::Hot);
  CHECK_THROWS_AS(parse_colormap("viridis"), PreconditionError);
}

TEST_CASE("train and eval splits share no shape-color identity") {
  const DatasetPlan plan = plan_dataset(24, 8, 77);
  REQUIRE(plan.train.size() == 24);
  REQUIRE(plan.eval.size() == 8);
  auto identity = [](const SceneSpec& s) {
    return shape_name(s.shape) + "/" + std::to_string(s.color[0]) + "," +
           std::to_string(s.color[1]) + "," + std::to_string(s.color[2]);
  };
  std::set<std::string> train_ids, eval_ids;
  for (const auto& s : plan.train) train_ids.insert(identity(s));
  for (const auto& s : plan.eval) eval_ids.insert(identity(s));
  for (const auto& id : eval_ids) CHECK(train_ids.count(id) == 0);

  // Membership is a pure function of the seed.
  const DatasetPlan again = plan_dataset(24, 8, 77);
  for (size_t i = 0; i < plan.train.size(); ++i)
    CHECK(scene_spec_line(plan.train[i]) == scene_spec_line(again.train[i]));
  for (size_t i = 0; i < plan.eval.size(); ++i)
    CHECK(scene_spec_line(plan.eval[i]) == scene_spec_line(again.eval[i]));

  const DatasetPlan other = plan_dataset(24, 8, 78);
  bool any_diff = false;
  for (size_t i = 0; i < plan.train.size(); ++i)
    any_diff |= scene_spec_line(plan.train[i]) != scene_spec_line(other.train[i]);
  CHECK(any_diff);

  // Every planned scene passes its own validation at the nominal geometry.
  for (const auto& s : plan.train) CHECK(scene_spec_valid(s, 8, 32, 32));
  for (const auto& s : plan.eval) CHECK(scene_spec_valid(s, 8, 32, 32));
}

TEST_CASE("spec lines round trip exactly") {
  const DatasetPlan plan = plan_dataset(6, 2, 3);
  for (const auto& s : plan.train) {
    const SceneSpec back = parse_scene_spec_line(scene_spec_line(s));
    CHECK(scene_spec_line(back) == scene_spec_line(s));
    CHECK(back.traj.x0 == s.traj.x0);
    CHECK(back.traj.sway_freq == s.traj.sway_freq);
    CHECK(back.sprite_depth == s.sprite_depth);
    CHECK(back.seed == s.seed);
  }
  CHECK_THROWS_AS(parse_scene_spec_line("radius=0.2"), PreconditionError);
  CHECK_THROWS_AS(parse_scene_spec_line("shape=circle bogus"), PreconditionError);
}

TEST_CASE("64 scenes at 32x32 generate inside the time budget") {
  const auto start = std::chrono::steady_clock::now();
  const auto set = make_dataset(64, 5, 8, 32, 32);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(set.size() == 64);
  CHECK(secs < 10.0);
}

TEST_CASE("bilinear resize: identity at equal size, bounded otherwise") {
  Rng rng(9);
  TensorF img({3, 7, 5});
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const TensorF same = resize_bilinear(img, 7, 5);
  CHECK(same.data == img.data);

  const TensorF up = resize_bilinear(img, 14, 10);
  const TensorF down = resize_bilinear(img, 3, 2);
  float lo = 1e9f, hi = -1e9f;
  for (float v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (float v : up.data) {
    CHECK(v >= lo - 1e-6f);
    CHECK(v <= hi + 1e-6f);
  }
  for (float v : down.data) {
    CHECK(v >= lo - 1e-6f);
    CHECK(v <= hi + 1e-6f);
  }
  TensorF flat = TensorF::full({1, 4, 4}, 0.37f);
  for (float v : resize_bilinear(flat, 9, 3).data) CHECK(v == 0.37f);
}

TEST_CASE("dataset persists to PNG directories and reloads from the manifest") {
  namespace fs = std::filesystem;
  const std::string root = (fs::temp_directory_path() / "idol_ds_test").string();
  fs::remove_all(root);

  const DatasetPlan plan = plan_dataset(2, 1, 123);
  write_dataset(root, plan, 2, 16, 16);

  const LoadedDataset loaded = load_dataset(root);
  CHECK(loaded.frames == 2);
  CHECK(loaded.height == 16);
  CHECK(loaded.width == 16);
  REQUIRE(loaded.plan.train.size() == 2);
  REQUIRE(loaded.plan.eval.size() == 1);
  for (size_t i = 0; i < 2; ++i)
    CHECK(scene_spec_line(loaded.plan.train[i]) == scene_spec_line(plan.train[i]));
  CHECK(scene_spec_line(loaded.plan.eval[0]) == scene_spec_line(plan.eval[0]));

  // The stored frames are the 8-bit quantization of the rendered scene.
  const SceneSample s = generate_scene(plan.train[0], 2, 16, 16);
  const TensorF png = read_png(root + "/train/scene_0000/video_01.png");
  REQUIRE(png.shape == std::vector<int>{3, 16, 16});
  const int64_t frame = 3 * 16 * 16;
  for (int64_t i = 0; i < frame; ++i)
    CHECK(std::abs(png.data[i] - s.video.data[frame + i]) <= 0.5f / 255.0f + 1e-6f);

  CHECK(fs::exists(root + "/train/scene_0001/pose_00_k2.png"));
  CHECK(fs::exists(root + "/eval/scene_0000/mask_01.png"));
  CHECK(fs::exists(root + "/eval/scene_0000/fg.png"));
  CHECK(fs::exists(root + "/eval/scene_0000/bg.png"));

  CHECK_THROWS_AS(load_dataset(root + "/does_not_exist"), IoError);
  fs::remove_all(root);
}
