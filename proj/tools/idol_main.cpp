#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "idol/checkpoint.hpp"
#include "idol/consistency.hpp"
#include "idol/denoiser.hpp"
#include "idol/diffusion.hpp"
#include "idol/eval.hpp"
#include "idol/image.hpp"
#include "idol/rng.hpp"
#include "idol/sampler.hpp"
#include "idol/scenes.hpp"
#include "idol/threading.hpp"
#include "idol/train.hpp"

namespace fs = std::filesystem;
using namespace idol;

namespace {

// ---------------------------------------------------------------------------
// Flat key=value settings with sections, file loading, and override parsing.
// Every run writes the fully resolved set beside its outputs so experiments
// can be replayed from the echo alone.
// ---------------------------------------------------------------------------

class Settings {
 public:
  Settings() {
    for (const auto& [k, v] : schema()) kv_[k] = v;
  }

  static const std::vector<std::pair<std::string, std::string>>& schema() {
    static const std::vector<std::pair<std::string, std::string>> s = {
        {"arch.frames", "8"},
        {"arch.height", "32"},
        {"arch.width", "32"},
        {"arch.latent_channels", "3"},
        {"arch.base_channels", "32"},
        {"arch.channel_mults", "1,2,4"},
        {"arch.heads", "4"},
        {"arch.cond_dim", "64"},
        {"arch.pose_keypoints", "3"},
        {"arch.temporal", "true"},
        {"arch.cross_modal_layers", "true"},
        {"arch.modality_table", "true"},
        {"diffusion.steps", "200"},
        {"diffusion.beta_start", "0.0001"},
        {"diffusion.beta_end", "0.02"},
        {"train.stage", "joint"},
        {"train.steps", "100"},
        {"train.batch_size", "1"},
        {"train.learning_rate", "-1"},
        {"train.momentum", "0.9"},
        {"train.weight_motion", "0.01"},
        {"train.weight_xattn", "0.01"},
        {"train.separate_unets", "false"},
        {"train.no_cross_modal_attn", "false"},
        {"train.xattn_share", "independent"},
        {"train.disable_mo", "false"},
        {"train.disable_xattn", "false"},
        {"train.freeze_resblocks", "false"},
        {"train.dilation_radius", "2"},
        {"train.crop_scale_low", "0.6"},
        {"train.crop_scale_high", "1.0"},
        {"train.seed", "0"},
        {"train.log_every", "50"},
        {"train.checkpoint_every", "0"},
        {"data.root", "data"},
    };
    return s;
  }

  void set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) throw PreconditionError("unknown config key: " + key);
    kv_[key] = value;
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::string line, section;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      const auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = strip(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw PreconditionError(path + ":" + std::to_string(lineno) + ": bad section");
        section = strip(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw PreconditionError(path + ":" + std::to_string(lineno) +
                                ": expected key = value");
      const std::string key = strip(line.substr(0, eq));
      const std::string value = strip(line.substr(eq + 1));
      set(section.empty() ? key : section + "." + key, value);
    }
  }

  const std::string& raw(const std::string& key) const { return kv_.at(key); }

  int geti(const std::string& key) const {
    try {
      return std::stoi(raw(key));
    } catch (const std::exception&) {
      throw PreconditionError("config key " + key + " is not an integer: " + raw(key));
    }
  }
  double getd(const std::string& key) const {
    try {
      return std::stod(raw(key));
    } catch (const std::exception&) {
      throw PreconditionError("config key " + key + " is not a number: " + raw(key));
    }
  }
  bool getb(const std::string& key) const {
    const std::string& v = raw(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw PreconditionError("config key " + key + " is not a boolean: " + v);
  }
  uint64_t getu(const std::string& key) const {
    try {
      return std::stoull(raw(key));
    } catch (const std::exception&) {
      throw PreconditionError("config key " + key + " is not an unsigned int: " + raw(key));
    }
  }
  std::vector<int> getvi(const std::string& key) const {
    std::vector<int> out;
    std::string item;
    std::istringstream ss(raw(key));
    while (std::getline(ss, item, ','))
      try {
        out.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw PreconditionError("config key " + key + " is not an int list: " + raw(key));
      }
    return out;
  }

  DenoiserConfig arch() const {
    DenoiserConfig a;
    a.frames = geti("arch.frames");
    a.height = geti("arch.height");
    a.width = geti("arch.width");
    a.latent_channels = geti("arch.latent_channels");
    a.base_channels = geti("arch.base_channels");
    a.channel_mults = getvi("arch.channel_mults");
    a.heads = geti("arch.heads");
    a.cond_dim = geti("arch.cond_dim");
    a.pose_keypoints = geti("arch.pose_keypoints");
    a.temporal = getb("arch.temporal");
    a.cross_modal_layers = getb("arch.cross_modal_layers");
    a.modality_table = getb("arch.modality_table");
    return a;
  }

  TrainConfig train() const {
    TrainConfig c;
    c.stage = parse_stage(raw("train.stage"));
    c.steps = geti("train.steps");
    c.batch_size = geti("train.batch_size");
    c.learning_rate = getd("train.learning_rate");
    c.momentum = getd("train.momentum");
    c.weights.motion = getd("train.weight_motion");
    c.weights.xattn = getd("train.weight_xattn");
    c.separate_unets = getb("train.separate_unets");
    c.no_cross_modal_attn = getb("train.no_cross_modal_attn");
    c.xattn_share = parse_share_mode(raw("train.xattn_share"));
    c.disable_mo = getb("train.disable_mo");
    c.disable_xattn = getb("train.disable_xattn");
    c.freeze_resblocks = getb("train.freeze_resblocks");
    c.haop.dilation_radius = geti("train.dilation_radius");
    c.haop.crop_scale_low = getd("train.crop_scale_low");
    c.haop.crop_scale_high = getd("train.crop_scale_high");
    c.seed = getu("train.seed");
    return c;
  }

  DiffusionSchedule schedule() const {
    return DiffusionSchedule::linear(geti("diffusion.steps"),
                                     getd("diffusion.beta_start"),
                                     getd("diffusion.beta_end"));
  }

  std::string render() const {
    std::string out;
    std::string section;
    for (const auto& [key, unused] : schema()) {
      (void)unused;
      const auto dot = key.find('.');
      const std::string sec = key.substr(0, dot);
      if (sec != section) {
        if (!section.empty()) out += "\n";
        out += "[" + sec + "]\n";
        section = sec;
      }
      out += key.substr(dot + 1) + " = " + kv_.at(key) + "\n";
    }
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << render();
    if (!f.flush()) throw IoError("config echo write failed: " + path);
  }

 private:
  std::map<std::string, std::string> kv_;
};

// Leftover tokens of the form --section.key=value become settings overrides;
// anything else is a usage error.
void apply_overrides(Settings& s, const std::vector<std::string>& extras,
                     const std::string& usage) {
  for (const std::string& tok : extras) {
    if (tok.rfind("--", 0) != 0 || tok.find('=') == std::string::npos) {
      std::cerr << usage << "\n";
      throw PreconditionError("unrecognized argument: " + tok);
    }
    const auto eq = tok.find('=');
    s.set(tok.substr(2, eq - 2), tok.substr(eq + 1));
  }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

struct LoadedModel {
  DenoiserConfig arch;
  TrainConfig tcfg;
  DiffusionSchedule sched;
  ParameterStore<float> params;
};

LoadedModel load_model(const std::string& path) {
  const LoadedCheckpoint ck = load_checkpoint(path);
  LoadedModel m;
  m.arch = arch_from_json(ck.manifest.at("arch"));
  m.tcfg = train_from_json(ck.manifest.at("train"));
  m.sched = DiffusionSchedule::from_betas(
      ck.manifest.at("schedule").at("betas").get<std::vector<double>>());
  m.params = make_parameter_store(m.arch, m.tcfg.seed);
  const ResumeReport rep = restore_params(m.params, ck.tensors, m.tcfg.seed);
  if (!rep.fresh.empty())
    std::cerr << "warning: " << rep.fresh.size()
              << " parameter tensor(s) missing from checkpoint, freshly initialized\n";
  return m;
}

// Scene reference "<dataset_root>[:split/index]", default eval/0.
struct SceneRef {
  LoadedDataset ds;
  SceneSpec spec;
  std::string label;
};

SceneRef resolve_scene(const std::string& cond) {
  std::string root = cond, sel = "eval/0";
  const auto colon = cond.rfind(':');
  if (colon != std::string::npos && cond.find('/', colon) != std::string::npos) {
    root = cond.substr(0, colon);
    sel = cond.substr(colon + 1);
  }
  SceneRef ref;
  ref.ds = load_dataset(root);
  const auto slash = sel.find('/');
  if (slash == std::string::npos)
    throw PreconditionError("scene reference must look like eval/0: " + sel);
  const std::string split = sel.substr(0, slash);
  const int idx = std::stoi(sel.substr(slash + 1));
  const auto& list = split == "train"  ? ref.ds.plan.train
                     : split == "eval" ? ref.ds.plan.eval
                                       : throw PreconditionError("unknown split: " + split);
  if (idx < 0 || idx >= static_cast<int>(list.size()))
    throw PreconditionError("scene index out of range: " + sel);
  ref.spec = list[idx];
  ref.label = split + "/" + std::to_string(idx);
  return ref;
}

void perturb_store(ParameterStore<double>& params, uint64_t seed, double sigma) {
  for (auto& [name, t] : params.tensors()) {
    Rng rng = named_stream(seed, "perturb." + name);
    for (auto& v : t.data) v += sigma * rng.normal();
  }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int scenes, int frames, int size,
                 uint64_t seed) {
  const int eval_scenes = std::max(1, scenes / 4);
  const DatasetPlan plan = plan_dataset(scenes, eval_scenes, seed, frames, size, size);
  write_dataset(out, plan, frames, size, size);
  {
    std::ofstream f(fs::path(out) / "gen_config.ini", std::ios::trunc);
    if (!f) throw IoError("cannot write config echo in " + out);
    f << "[gen-data]\nout = " << out << "\nscenes = " << scenes
      << "\nframes = " << frames << "\nsize = " << size << "\nseed = " << seed << "\n";
  }
  std::cout << "wrote " << plan.train.size() << " train / " << plan.eval.size()
            << " eval scenes to " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const Settings& s, const std::string& out, const std::string& resume) {
  const TrainConfig cfg = s.train();
  const DenoiserConfig base = s.arch();
  const DiffusionSchedule sched = s.schedule();

  const LoadedDataset ds = load_dataset(s.raw("data.root"));
  std::vector<SceneSample> data;
  data.reserve(ds.plan.train.size());
  for (const auto& spec : ds.plan.train)
    data.push_back(generate_scene(spec, ds.frames, ds.height, ds.width));

  TrainState state = make_train_state(cfg, base, sched, std::move(data));
  fs::create_directories(out);
  s.write((fs::path(out) / "config.resolved.ini").string());

  if (!resume.empty()) {
    const ResumeReport rep = resume_from_checkpoint(state, resume);
    std::cout << "resume: restored=" << rep.restored.size()
              << " fresh=" << rep.fresh.size() << " unused=" << rep.unused.size()
              << "\n";
    for (const auto& n : rep.fresh) std::cout << "resume fresh: " << n << "\n";
    for (const auto& n : rep.unused) std::cout << "resume unused: " << n << "\n";
  }

  const std::string metrics = (fs::path(out) / "metrics.jsonl").string();
  const int log_every = std::max(1, s.geti("train.log_every"));
  const int ckpt_every = s.geti("train.checkpoint_every");

  while (state.step < cfg.steps) {
    const int64_t step = state.step;
    const auto t0 = std::chrono::steady_clock::now();
    const LossBreakdown bd = train_step(state);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    append_metrics(metrics, step, bd);
    if (step % log_every == 0 || state.step == cfg.steps)
      std::printf("step %5lld  total %.6f  denoise %.6f  motion %.6f  xattn %.6f  (%.0f ms)\n",
                  static_cast<long long>(step), bd.total, bd.denoise, bd.motion,
                  bd.xattn, ms);
    if (ckpt_every > 0 && state.step % ckpt_every == 0 && state.step < cfg.steps) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_step%06lld.ckpt",
                    static_cast<long long>(state.step));
      save_train_checkpoint((fs::path(out) / name).string(), state);
    }
  }
  const std::string final_path = (fs::path(out) / "checkpoint.ckpt").string();
  save_train_checkpoint(final_path, state);
  std::cout << "saved " << final_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

int cmd_sample(const std::string& ckpt, const std::string& cond_ref, uint64_t seed,
               const std::string& out) {
  LoadedModel m = load_model(ckpt);
  const SceneRef ref = resolve_scene(cond_ref);
  if (ref.ds.frames != m.arch.frames || ref.ds.height != m.arch.height ||
      ref.ds.width != m.arch.width)
    throw PreconditionError("dataset geometry disagrees with the checkpoint");

  const SceneSample scene =
      generate_scene(ref.spec, ref.ds.frames, ref.ds.height, ref.ds.width);
  const ConditionBundle cond = make_condition(m.arch, m.params, scene);
  const auto [video, depth_rgb] =
      sample_joint(m.arch, m.params, m.sched, cond, seed,
                   !m.tcfg.no_cross_modal_attn, m.tcfg.xattn_share);
  write_sample(out, video, depth_rgb);
  {
    std::ofstream f(fs::path(out) / "sample_config.ini", std::ios::trunc);
    if (!f) throw IoError("cannot write config echo in " + out);
    f << "[sample]\nckpt = " << ckpt << "\ncond = " << cond_ref << "\nscene = "
      << ref.label << "\nseed = " << seed << "\nout = " << out << "\n";
  }
  std::cout << "wrote " << m.arch.frames << " video+depth frame pairs to " << out
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::string& metrics_csv, const std::string& out, uint64_t seed,
             int t_tap) {
  LoadedModel m = load_model(ckpt);
  const LoadedDataset ds = load_dataset(data);
  if (ds.frames != m.arch.frames || ds.height != m.arch.height ||
      ds.width != m.arch.width)
    throw PreconditionError("dataset geometry disagrees with the checkpoint");

  std::vector<std::string> wanted;
  {
    std::istringstream ss(metrics_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item != "depth_l2" && item != "iou" && item != "motion_div")
        throw PreconditionError("unknown metric: " + item);
      wanted.push_back(item);
    }
  }

  EvalOptions opts;
  opts.seed = seed;
  opts.t_tap = t_tap;
  opts.coupled = !m.tcfg.no_cross_modal_attn;
  opts.share = m.tcfg.xattn_share;
  const EvalSummary summary = evaluate_model(m.arch, m.params, m.sched, ds.plan.eval,
                                             ds.frames, ds.height, ds.width, opts);

  fs::create_directories(out);
  write_eval_report((fs::path(out) / "report.json").string(),
                    (fs::path(out) / "report.csv").string(), summary);
  {
    std::ofstream f(fs::path(out) / "eval_config.ini", std::ios::trunc);
    if (!f) throw IoError("cannot write config echo in " + out);
    f << "[eval]\nckpt = " << ckpt << "\ndata = " << data << "\nmetrics = "
      << metrics_csv << "\nseed = " << seed << "\nt = " << t_tap << "\nout = " << out
      << "\n";
  }
  for (const std::string& w : wanted) {
    if (w == "depth_l2") std::printf("depth_l2 %.6f\n", summary.depth_l2);
    if (w == "iou") std::printf("iou %.6f\n", summary.iou);
    if (w == "motion_div") std::printf("motion_div %.6f\n", summary.motion_divergence);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int cmd_gradcheck(const Settings& s, const std::string& losses, double tolerance,
                  double step, int samples, uint64_t seed, const std::string& out) {
  DenoiserConfig cfg = s.arch();
  cfg.validate();
  ParameterStore<double> params = make_parameter_store(cfg, seed).cast<double>();
  // Wake up the zero-initialized gates so every computation path carries
  // gradient; otherwise those checks would trivially compare zero to zero.
  perturb_store(params, seed + 1, 0.02);
  const ProbeBatch batch = make_probe_batch(cfg, seed + 2);

  std::vector<ProbeKind> kinds;
  {
    std::istringstream ss(losses);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "all") {
        kinds = {ProbeKind::Denoise, ProbeKind::Motion, ProbeKind::Xattn,
                 ProbeKind::Total};
      } else if (item == "denoise") {
        kinds.push_back(ProbeKind::Denoise);
      } else if (item == "mo") {
        kinds.push_back(ProbeKind::Motion);
      } else if (item == "xattn") {
        kinds.push_back(ProbeKind::Xattn);
      } else if (item == "total") {
        kinds.push_back(ProbeKind::Total);
      } else {
        throw PreconditionError("unknown loss: " + item);
      }
    }
  }

  nlohmann::json report = nlohmann::json::array();
  bool all_pass = true;
  for (const ProbeKind kind : kinds) {
    const Objective obj = make_joint_objective(cfg, batch, kind);
    const GradcheckReport rep =
        gradcheck(obj, params, nullptr, step, samples, seed + 3, tolerance);
    all_pass = all_pass && rep.pass;
    std::printf("gradcheck %-8s checked=%-5lld max_rel=%.3e %s\n",
                probe_name(kind).c_str(), static_cast<long long>(rep.checked),
                rep.max_rel, rep.pass ? "PASS" : "FAIL");
    if (!rep.pass)
      for (const auto& f : rep.failures)
        std::printf("  %s[%lld] analytic=%.6e numeric=%.6e rel=%.3e\n",
                    f.tensor.c_str(), static_cast<long long>(f.index), f.analytic,
                    f.numeric, f.rel);
    report.push_back({{"loss", probe_name(kind)},
                      {"checked", rep.checked},
                      {"max_rel", rep.max_rel},
                      {"pass", rep.pass}});
  }
  if (!out.empty()) {
    fs::create_directories(fs::path(out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out).parent_path());
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out);
    f << report.dump(2) << "\n";
  }
  return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// inspect-motion
// ---------------------------------------------------------------------------

void hsv_to_rgb(double h, double s, double v, float* rgb) {
  const double c = v * s;
  const double hp = 6.0 * (h - std::floor(h));
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

TensorF load_frames(const std::string& dir, const char* stem) {
  std::vector<TensorF> frames;
  for (int f = 0;; ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%02d.png", stem, f);
    const fs::path p = fs::path(dir) / name;
    if (!fs::exists(p)) break;
    frames.push_back(read_png(p.string()));
  }
  if (frames.empty()) throw IoError("no " + std::string(stem) + "_*.png frames in " + dir);
  const int C = frames[0].shape[0], H = frames[0].shape[1], W = frames[0].shape[2];
  TensorF clip({static_cast<int>(frames.size()), C, H, W});
  for (size_t f = 0; f < frames.size(); ++f) {
    check_shape(frames[f].shape, {C, H, W}, "frame " + std::to_string(f));
    std::copy_n(frames[f].data.begin(), frames[f].numel(),
                clip.data.begin() + static_cast<int64_t>(f) * frames[f].numel());
  }
  return clip;
}

int cmd_inspect_motion(const std::string& ckpt, const std::string& sample_dir,
                       int block, int t, const std::string& out) {
  LoadedModel m = load_model(ckpt);
  const TensorF video = load_frames(sample_dir, "video");
  check_shape(video.shape, {m.arch.frames, 3, m.arch.height, m.arch.width}, "video clip");
  const int tt = t < 0 ? m.sched.steps / 2 : t;
  m.sched.check_t(tt);

  // Attenuate the clip to the chosen timestep and capture the up-block taps.
  TensorF z = image_to_latent(video);
  const float root_abar = static_cast<float>(std::sqrt(m.sched.alpha_bar[tt]));
  for (auto& v : z.data) v *= root_abar;
  ConditionBundle cond;
  cond.fg_tokens = TensorF({DenoiserConfig::kFgTokens, m.arch.cond_dim});
  cond.bg_latent = TensorF({m.arch.latent_channels, m.arch.height, m.arch.width});
  cond.pose = TensorF({m.arch.frames, m.arch.pose_keypoints, m.arch.height, m.arch.width});
  const StreamOut res =
      single_forward(m.arch, m.params, z, tt, Modality::Video, cond, true);

  fs::create_directories(out);
  const int blocks = static_cast<int>(res.tap_features.size());
  for (int n = 0; n < blocks; ++n) {
    if (block >= 0 && n != block) continue;
    const TensorF& f = res.tap_features[n];
    const int L = f.shape[0], D = f.shape[1], H = f.shape[2], W = f.shape[3];
    const float tau = static_cast<float>(1.0 / std::sqrt(static_cast<double>(D)));
    const TensorF norm = normalize_features(f);
    for (int p = 0; p + 1 < L; ++p) {
      TensorF fa({D, H, W}), fb({D, H, W});
      const int64_t sz = fa.numel();
      std::copy_n(norm.data.begin() + static_cast<int64_t>(p) * sz, sz, fa.data.begin());
      std::copy_n(norm.data.begin() + static_cast<int64_t>(p + 1) * sz, sz,
                  fb.data.begin());
      const TensorF field = motion_field(cost_volume(fa, fb), tau);

      // Hue encodes the argmax displacement direction, brightness its length.
      TensorF img({3, H, W});
      const double max_disp = std::sqrt(static_cast<double>(H * H + W * W)) / 2.0;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          int bi = 0, bj = 0;
          float best = -1.0f;
          for (int k = 0; k < H; ++k)
            for (int l = 0; l < W; ++l) {
              const float u =
                  field.data[((static_cast<int64_t>(i) * W + j) * H + k) * W + l];
              if (u > best) best = u, bi = k, bj = l;
            }
          const double dy = bi - i, dx = bj - j;
          const double mag = std::sqrt(dy * dy + dx * dx);
          const double hue =
              (std::atan2(dy, dx) + 3.14159265358979323846) / (2.0 * 3.14159265358979323846);
          float rgb[3];
          hsv_to_rgb(hue, 1.0, std::min(1.0, mag / max_disp), rgb);
          for (int c = 0; c < 3; ++c)
            img.data[(static_cast<int64_t>(c) * H + i) * W + j] = rgb[c];
        }

      // Nearest-neighbor upscale so small grids are inspectable.
      const int k = std::max(1, 128 / std::max(H, W));
      TensorF big({3, H * k, W * k});
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H * k; ++y)
          for (int x = 0; x < W * k; ++x)
            big.data[(static_cast<int64_t>(c) * H * k + y) * W * k + x] =
                img.data[(static_cast<int64_t>(c) * H + y / k) * W + x / k];
      char name[64];
      std::snprintf(name, sizeof(name), "motion_block%d_pair%02d.png", n, p);
      write_png((fs::path(out) / name).string(), big);
    }
  }
  std::cout << "wrote motion-field maps for " << (block >= 0 ? 1 : blocks)
            << " block(s) at t=" << tt << " to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const char* workers = std::getenv("IDOL_NUM_WORKERS");
  set_num_threads(workers ? std::max(1, std::atoi(workers)) : 1);

  CLI::App app{"idol: joint video and depth diffusion workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  std::string gen_out = "data";
  int gen_scenes = 64, gen_frames = 8, gen_size = 32;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Dataset directory");
  gen->add_option("--scenes", gen_scenes, "Number of training scenes");
  gen->add_option("--frames", gen_frames, "Frames per scene");
  gen->add_option("--size", gen_size, "Frame height and width");
  gen->add_option("--seed", gen_seed, "Split/scene seed");

  // train
  auto* train = app.add_subcommand("train", "Train a stage (extra --section.key=value "
                                            "tokens override config keys)");
  train->allow_extras();
  std::string train_config, train_stage, train_resume, train_out = "runs/run",
                            train_data;
  uint64_t train_seed = 0;
  train->add_option("--config", train_config, "Config file (ini)");
  train->add_option("--stage", train_stage, "haop or joint");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_option("--out", train_out, "Run directory");
  train->add_option("--data", train_data, "Dataset directory");
  train->add_option("--seed", train_seed, "Training seed");

  // sample
  auto* sample = app.add_subcommand("sample", "Sample a joint video/depth clip");
  std::string sm_ckpt, sm_cond, sm_out = "samples/out";
  uint64_t sm_seed = 0;
  sample->add_option("--ckpt", sm_ckpt, "Checkpoint path")->required();
  sample->add_option("--cond", sm_cond, "Dataset root, optionally :split/index")
      ->required();
  sample->add_option("--seed", sm_seed, "Sampling seed");
  sample->add_option("--out", sm_out, "Output directory");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the eval split");
  std::string ev_ckpt, ev_data, ev_metrics = "depth_l2,iou,motion_div",
                                ev_out = "eval/out";
  uint64_t ev_seed = 0;
  int ev_t = -1;
  eval->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", ev_data, "Dataset directory")->required();
  eval->add_option("--metrics", ev_metrics, "Comma list: depth_l2,iou,motion_div");
  eval->add_option("--out", ev_out, "Report directory");
  eval->add_option("--seed", ev_seed, "Sampling seed");
  eval->add_option("--t", ev_t, "Tap timestep for motion_div (-1 = steps/2)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "Finite-difference check of the training gradients");
  gc->allow_extras();
  std::string gc_config, gc_loss = "all", gc_out;
  // Default step balances truncation against the objective's accumulated
  // rounding noise (~1e-15), which dominates for full-network sums; the
  // per-operation unit checks use the smaller classic 1e-5.
  double gc_tol = 1e-4, gc_step = 5e-5;
  int gc_samples = 3;
  uint64_t gc_seed = 0;
  gc->add_option("--config", gc_config, "Config file (ini)");
  gc->add_option("--loss", gc_loss, "all or comma list of denoise,mo,xattn,total");
  gc->add_option("--tolerance", gc_tol, "Max relative error");
  gc->add_option("--step", gc_step, "Finite-difference step");
  gc->add_option("--samples", gc_samples, "Checked entries per tensor");
  gc->add_option("--seed", gc_seed, "Probe seed");
  gc->add_option("--out", gc_out, "Optional JSON report path");

  // inspect-motion
  auto* im = app.add_subcommand("inspect-motion",
                                "Render per-block motion fields as hue maps");
  std::string im_ckpt, im_sample, im_out = "motion/out";
  int im_block = -1, im_t = -1;
  im->add_option("--ckpt", im_ckpt, "Checkpoint path")->required();
  im->add_option("--sample", im_sample, "Directory with video_FF.png frames")
      ->required();
  im->add_option("--block", im_block, "Up-block index (-1 = all)");
  im->add_option("--t", im_t, "Timestep (-1 = steps/2)");
  im->add_option("--out", im_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_scenes, gen_frames, gen_size, gen_seed);

    if (train->parsed()) {
      Settings s;
      if (!train_config.empty()) s.load_file(train_config);
      apply_overrides(s, train->remaining(), train->help());
      if (train->count("--stage")) s.set("train.stage", train_stage);
      if (train->count("--seed")) s.set("train.seed", std::to_string(train_seed));
      if (train->count("--data")) s.set("data.root", train_data);
      return cmd_train(s, train_out, train_resume);
    }

    if (sample->parsed()) return cmd_sample(sm_ckpt, sm_cond, sm_seed, sm_out);

    if (eval->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_metrics, ev_out, ev_seed, ev_t);

    if (gc->parsed()) {
      Settings s;
      // The gradient oracle defaults to the tiny double-precision geometry.
      s.set("arch.frames", "2");
      s.set("arch.height", "8");
      s.set("arch.width", "8");
      s.set("arch.base_channels", "8");
      if (!gc_config.empty()) s.load_file(gc_config);
      apply_overrides(s, gc->remaining(), gc->help());
      return cmd_gradcheck(s, gc_loss, gc_tol, gc_step, gc_samples, gc_seed, gc_out);
    }

    if (im->parsed()) return cmd_inspect_motion(im_ckpt, im_sample, im_block, im_t, im_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
