#include "idol/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "idol/image.hpp"
#include "idol/rng.hpp"
#include "idol/tape.hpp"

namespace idol {

std::string stage_name(TrainStage s) { return s == TrainStage::Haop ? "haop" : "joint"; }

TrainStage parse_stage(const std::string& s) {
  if (s == "haop") return TrainStage::Haop;
  if (s == "joint") return TrainStage::Joint;
  throw PreconditionError("unknown training stage: " + s);
}

void TrainConfig::validate() const {
  if (steps < 1) throw PreconditionError("steps must be >= 1");
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0)
    throw PreconditionError("momentum must lie in [0, 1)");
  if (weights.motion < 0.0 || weights.xattn < 0.0)
    throw PreconditionError("loss weights must be non-negative");
  if (haop.dilation_radius < 0) throw PreconditionError("dilation radius must be >= 0");
}

void apply_sgd(ParameterStore<float>& params,
               const std::map<std::string, const TensorF*>& grads,
               std::map<std::string, std::vector<float>>& velocity, double lr,
               double momentum, const std::function<bool(const std::string&)>& frozen) {
  for (const auto& [name, grad] : grads) {
    if (frozen && frozen(name)) continue;
    TensorF& t = params.tensor(name);
    if (grad->shape != t.shape)
      throw PreconditionError("gradient shape mismatch for '" + name + "'");
    auto& v = velocity[name];
    if (v.empty()) v.assign(static_cast<size_t>(t.numel()), 0.0f);
    for (int64_t i = 0; i < t.numel(); ++i) {
      v[i] = static_cast<float>(momentum * v[i] + grad->data[i]);
      t.data[i] -= static_cast<float>(lr * v[i]);
    }
  }
}

DenoiserConfig stage_architecture(const DenoiserConfig& base, const TrainConfig& cfg) {
  DenoiserConfig arch = base;
  arch.separate_unets = cfg.separate_unets;
  if (cfg.stage == TrainStage::Haop) {
    arch.frames = 1;
    arch.temporal = false;
    arch.cross_modal_layers = false;
  }
  arch.validate();
  return arch;
}

TrainState make_train_state(const TrainConfig& cfg, const DenoiserConfig& base,
                            const DiffusionSchedule& schedule,
                            std::vector<SceneSample> data) {
  cfg.validate();
  if (data.empty()) throw PreconditionError("training needs at least one scene");
  TrainState st;
  st.cfg = cfg;
  st.arch = stage_architecture(base, cfg);
  st.schedule = schedule;
  st.params = make_parameter_store(st.arch, cfg.seed);
  st.data = std::move(data);

  const int H = st.data[0].video.shape[2], W = st.data[0].video.shape[3];
  const int L = st.data[0].video.shape[0];
  if (H != st.arch.height || W != st.arch.width)
    throw PreconditionError("dataset geometry disagrees with the architecture");
  if (cfg.stage == TrainStage::Joint && L != st.arch.frames)
    throw PreconditionError("dataset clip length disagrees with the architecture");
  return st;
}

namespace {

template <typename T>
Tensor<T> draw_normal(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(scale * rng.normal());
  return t;
}

template <typename T>
Tensor<T> to_latent(const TensorF& img01, std::vector<int> shape) {
  Tensor<T> t(std::move(shape));
  check_shape(img01.shape, t.shape, "latent source");
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data[i] = static_cast<T>(2.0 * img01.data[i] - 1.0);
  return t;
}

template <typename T>
Tensor<T> cast_tensor(const TensorF& a) {
  Tensor<T> t(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) t.data[i] = static_cast<T>(a.data[i]);
  return t;
}

// Foreground conditioning image: [3, H, W] in [0,1] -> [1, 3, 16, 16].
TensorF fg_condition_image(const TensorF& fg_image) {
  TensorF r = resize_bilinear(fg_image, DenoiserConfig::kFgImageSize,
                              DenoiserConfig::kFgImageSize);
  r.shape = {1, 3, DenoiserConfig::kFgImageSize, DenoiserConfig::kFgImageSize};
  return r;
}

template <typename T>
struct JointLossNodes {
  int denoise_v = -1, denoise_d = -1;
  std::vector<int> motion, xattn;
};

// Records both streams plus every loss component onto the tape.
template <typename T>
JointLossNodes<T> build_joint_losses(Tape<T>& tape, DenoiserBuilder<T>& b,
                                     const Tensor<T>& z_v, const Tensor<T>& z_d, int t,
                                     const Tensor<T>& eps_v, const Tensor<T>& eps_d,
                                     const Tensor<T>& fg_image, const Tensor<T>& bg,
                                     const Tensor<T>& pose, bool capture,
                                     XattnShareMode share, bool coupled) {
  const int fg_tok = b.encode_fg(tape.constant(fg_image));
  const int bg_node = tape.constant(bg);
  const int pose_node = pose.numel() > 0 ? tape.constant(pose) : Tape<T>::kNone;
  using Stream = typename DenoiserBuilder<T>::Stream;
  std::vector<Stream> streams = {{tape.constant(z_v), Modality::Video},
                                 {tape.constant(z_d), Modality::Depth}};
  const auto results = b.run(streams, t, fg_tok, bg_node, pose_node, capture, share, coupled);

  JointLossNodes<T> out;
  out.denoise_v = tape.mse(results[0].eps, tape.constant(eps_v));
  out.denoise_d = tape.mse(results[1].eps, tape.constant(eps_d));
  if (capture) {
    for (size_t n = 0; n < results[0].tap_features.size(); ++n) {
      const int dn = tape.value(results[0].tap_features[n]).shape[1];
      const T tau = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dn)));
      out.motion.push_back(
          tape.motion_consistency(results[0].tap_features[n], results[1].tap_features[n], tau));
      out.xattn.push_back(tape.mse(results[0].tap_xattn[n], results[1].tap_xattn[n]));
    }
  }
  return out;
}

double node_scalar(const Tape<float>& tape, int id) {
  return static_cast<double>(tape.value(id).data[0]);
}

void ensure_finite(double v, const std::string& what, int64_t step,
                   const std::string& extra) {
  if (std::isfinite(v)) return;
  throw TrainingError("non-finite " + what + " at step " + std::to_string(step) +
                      (extra.empty() ? "" : " (" + extra + ")"));
}

std::string tensor_stats(const TensorF& t) {
  double mx = 0.0;
  bool finite = true;
  for (float v : t.data) {
    if (!std::isfinite(v)) finite = false;
    mx = std::max(mx, std::abs(static_cast<double>(v)));
  }
  return "max|x|=" + std::to_string(mx) + (finite ? "" : ", contains non-finite");
}

LossBreakdown joint_train_step(TrainState& st) {
  const TrainConfig& cfg = st.cfg;
  const bool want_mo = !cfg.disable_mo && cfg.weights.motion != 0.0;
  const bool want_xa = !cfg.disable_xattn && cfg.weights.xattn != 0.0;
  const bool capture = want_mo || want_xa;
  const bool coupled = !cfg.no_cross_modal_attn;

  Tape<float> tape;
  DenoiserBuilder<float> b(tape, st.arch, st.params, /*train=*/true);

  LossBreakdown bd;
  int batch_total = Tape<float>::kNone;
  for (int i = 0; i < cfg.batch_size; ++i) {
    Rng rng = named_stream(cfg.seed, "batch." + std::to_string(st.step) + "." +
                                         std::to_string(i));
    const SceneSample& s =
        st.data[static_cast<size_t>(rng.uniform_below(st.data.size()))];
    const int t = static_cast<int>(rng.uniform_below(st.schedule.steps));

    const auto z0_v = to_latent<float>(s.video, s.video.shape);
    const auto z0_d = to_latent<float>(s.depth_rgb, s.depth_rgb.shape);
    const TensorF eps_v = draw_normal<float>(rng, z0_v.shape);
    const TensorF eps_d = draw_normal<float>(rng, z0_d.shape);
    const TensorF z_v = forward_diffuse(st.schedule, z0_v, t, eps_v);
    const TensorF z_d = forward_diffuse(st.schedule, z0_d, t, eps_d);

    const TensorF fg = fg_condition_image(s.fg_image);
    const TensorF bg = to_latent<float>(s.bg_image, s.bg_image.shape);

    const auto nodes = build_joint_losses(tape, b, z_v, z_d, t, eps_v, eps_d, fg, bg,
                                          s.pose_heatmaps, capture, cfg.xattn_share,
                                          coupled);
    const double dv = node_scalar(tape, nodes.denoise_v);
    const double dd = node_scalar(tape, nodes.denoise_d);
    ensure_finite(dv, "video denoising loss", st.step, "");
    ensure_finite(dd, "depth denoising loss", st.step, "");
    bd.denoise_video += dv;
    bd.denoise_depth += dd;

    int item = tape.add(nodes.denoise_v, nodes.denoise_d);
    if (bd.motion_terms.size() < nodes.motion.size())
      bd.motion_terms.resize(nodes.motion.size(), 0.0);
    if (bd.xattn_terms.size() < nodes.xattn.size())
      bd.xattn_terms.resize(nodes.xattn.size(), 0.0);
    for (size_t n = 0; n < nodes.motion.size(); ++n) {
      const double mv = node_scalar(tape, nodes.motion[n]);
      ensure_finite(mv, "motion term " + std::to_string(n), st.step, "");
      bd.motion_terms[n] += mv;
      bd.motion += mv;
      if (want_mo)
        item = tape.add_scaled(item, nodes.motion[n], static_cast<float>(cfg.weights.motion));
    }
    for (size_t n = 0; n < nodes.xattn.size(); ++n) {
      const double xv = node_scalar(tape, nodes.xattn[n]);
      ensure_finite(xv, "attention term " + std::to_string(n), st.step, "");
      bd.xattn_terms[n] += xv;
      bd.xattn += xv;
      if (want_xa)
        item = tape.add_scaled(item, nodes.xattn[n], static_cast<float>(cfg.weights.xattn));
    }
    batch_total = (batch_total == Tape<float>::kNone) ? item : tape.add(batch_total, item);
  }

  const int loss = tape.scale(batch_total, 1.0f / static_cast<float>(cfg.batch_size));
  const double inv_b = 1.0 / cfg.batch_size;
  bd.denoise_video *= inv_b;
  bd.denoise_depth *= inv_b;
  bd.denoise = bd.denoise_video + bd.denoise_depth;
  bd.motion *= inv_b;
  bd.xattn *= inv_b;
  for (auto& v : bd.motion_terms) v *= inv_b;
  for (auto& v : bd.xattn_terms) v *= inv_b;
  bd.total = node_scalar(tape, loss);
  ensure_finite(bd.total, "total loss", st.step, tensor_stats(tape.value(loss)));

  tape.backward(loss);
  std::map<std::string, const TensorF*> grads;
  for (const auto& [name, node] : b.used_params()) grads[name] = &tape.grad(node);
  const auto frozen = [&](const std::string& name) {
    return st.cfg.freeze_resblocks && name.find(".res") != std::string::npos;
  };
  apply_sgd(st.params, grads, st.velocity, cfg.resolved_lr(), cfg.momentum, frozen);
  ++st.step;
  return bd;
}

LossBreakdown haop_train_step(TrainState& st) {
  const TrainConfig& cfg = st.cfg;
  Tape<float> tape;
  DenoiserBuilder<float> b(tape, st.arch, st.params, /*train=*/true);

  const int H = st.arch.height, W = st.arch.width;
  const int64_t plane = static_cast<int64_t>(H) * W;

  LossBreakdown bd;
  int batch_total = Tape<float>::kNone;
  for (int i = 0; i < cfg.batch_size; ++i) {
    Rng rng = named_stream(cfg.seed, "batch." + std::to_string(st.step) + "." +
                                         std::to_string(i));
    const SceneSample& s =
        st.data[static_cast<size_t>(rng.uniform_below(st.data.size()))];
    const int L = s.video.shape[0];
    const int f = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(L)));
    const int t = static_cast<int>(rng.uniform_below(st.schedule.steps));

    TensorF frame({3, H, W}), mask({H, W});
    std::copy_n(s.video.data.begin() + static_cast<int64_t>(f) * 3 * plane, 3 * plane,
                frame.data.begin());
    std::copy_n(s.fg_mask.data.begin() + static_cast<int64_t>(f) * plane, plane,
                mask.data.begin());
    const HaopSample aug = haop_sample(frame, mask, rng, cfg.haop);

    TensorF z0 = to_latent<float>(aug.target, {3, H, W});
    z0.shape = {1, 3, H, W};
    const TensorF eps = draw_normal<float>(rng, {1, 3, H, W});
    const TensorF z_t = forward_diffuse(st.schedule, z0, t, eps);

    const TensorF fg = fg_condition_image(aug.f_aug);
    const TensorF bg = to_latent<float>(aug.b_aug, {3, H, W});

    const int fg_tok = b.encode_fg(tape.constant(fg));
    using Stream = DenoiserBuilder<float>::Stream;
    const auto results =
        b.run({Stream{tape.constant(z_t), Modality::Video}}, t, fg_tok,
              tape.constant(bg), Tape<float>::kNone, /*capture=*/false,
              XattnShareMode::Independent, /*coupled=*/false);
    const int item = tape.mse(results[0].eps, tape.constant(eps));
    const double v = node_scalar(tape, item);
    ensure_finite(v, "reconstruction loss", st.step,
                  tensor_stats(tape.value(results[0].eps)));
    bd.denoise_video += v;
    batch_total = (batch_total == Tape<float>::kNone) ? item : tape.add(batch_total, item);
  }

  const int loss = tape.scale(batch_total, 1.0f / static_cast<float>(cfg.batch_size));
  bd.denoise_video /= cfg.batch_size;
  bd.denoise = bd.denoise_video;
  bd.total = node_scalar(tape, loss);
  ensure_finite(bd.total, "total loss", st.step, "");

  tape.backward(loss);
  std::map<std::string, const TensorF*> grads;
  for (const auto& [name, node] : b.used_params()) grads[name] = &tape.grad(node);
  const auto frozen = [&](const std::string& name) {
    return st.cfg.freeze_resblocks && name.find(".res") != std::string::npos;
  };
  apply_sgd(st.params, grads, st.velocity, cfg.resolved_lr(), cfg.momentum, frozen);
  ++st.step;
  return bd;
}

}  // namespace

LossBreakdown train_step(TrainState& state) {
  return state.cfg.stage == TrainStage::Joint ? joint_train_step(state)
                                              : haop_train_step(state);
}

nlohmann::json arch_to_json(const DenoiserConfig& a) {
  return {{"frames", a.frames},
          {"height", a.height},
          {"width", a.width},
          {"latent_channels", a.latent_channels},
          {"base_channels", a.base_channels},
          {"channel_mults", a.channel_mults},
          {"heads", a.heads},
          {"cond_dim", a.cond_dim},
          {"pose_keypoints", a.pose_keypoints},
          {"temporal", a.temporal},
          {"cross_modal_layers", a.cross_modal_layers},
          {"modality_table", a.modality_table},
          {"separate_unets", a.separate_unets}};
}

DenoiserConfig arch_from_json(const nlohmann::json& j) {
  DenoiserConfig a;
  a.frames = j.at("frames").get<int>();
  a.height = j.at("height").get<int>();
  a.width = j.at("width").get<int>();
  a.latent_channels = j.at("latent_channels").get<int>();
  a.base_channels = j.at("base_channels").get<int>();
  a.channel_mults = j.at("channel_mults").get<std::vector<int>>();
  a.heads = j.at("heads").get<int>();
  a.cond_dim = j.at("cond_dim").get<int>();
  a.pose_keypoints = j.at("pose_keypoints").get<int>();
  a.temporal = j.at("temporal").get<bool>();
  a.cross_modal_layers = j.at("cross_modal_layers").get<bool>();
  a.modality_table = j.at("modality_table").get<bool>();
  a.separate_unets = j.at("separate_unets").get<bool>();
  return a;
}

nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"stage", stage_name(c.stage)},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"resolved_lr", c.resolved_lr()},
          {"momentum", c.momentum},
          {"weight_motion", c.weights.motion},
          {"weight_xattn", c.weights.xattn},
          {"separate_unets", c.separate_unets},
          {"no_cross_modal_attn", c.no_cross_modal_attn},
          {"xattn_share", share_mode_name(c.xattn_share)},
          {"disable_mo", c.disable_mo},
          {"disable_xattn", c.disable_xattn},
          {"freeze_resblocks", c.freeze_resblocks},
          {"dilation_radius", c.haop.dilation_radius},
          {"crop_scale_low", c.haop.crop_scale_low},
          {"crop_scale_high", c.haop.crop_scale_high},
          {"seed", c.seed}};
}

TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.stage = parse_stage(j.at("stage").get<std::string>());
  c.steps = j.at("steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weights.motion = j.at("weight_motion").get<double>();
  c.weights.xattn = j.at("weight_xattn").get<double>();
  c.separate_unets = j.at("separate_unets").get<bool>();
  c.no_cross_modal_attn = j.at("no_cross_modal_attn").get<bool>();
  c.xattn_share = parse_share_mode(j.at("xattn_share").get<std::string>());
  c.disable_mo = j.at("disable_mo").get<bool>();
  c.disable_xattn = j.at("disable_xattn").get<bool>();
  c.freeze_resblocks = j.at("freeze_resblocks").get<bool>();
  c.haop.dilation_radius = j.at("dilation_radius").get<int>();
  c.haop.crop_scale_low = j.at("crop_scale_low").get<double>();
  c.haop.crop_scale_high = j.at("crop_scale_high").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

nlohmann::json make_manifest(const TrainState& state) {
  return {{"format", 1},
          {"step", state.step},
          {"arch", arch_to_json(state.arch)},
          {"train", train_to_json(state.cfg)},
          {"schedule", {{"betas", state.schedule.beta}}},
          {"tensors", state.params.count()}};
}

void save_train_checkpoint(const std::string& path, const TrainState& state) {
  save_checkpoint(path, state.params, make_manifest(state));
}

ResumeReport resume_from_checkpoint(TrainState& state, const std::string& path) {
  const LoadedCheckpoint ck = load_checkpoint(path);
  ResumeReport report = restore_params(state.params, ck.tensors, state.cfg.seed);
  const std::string ck_stage = ck.manifest.at("train").at("stage").get<std::string>();
  if (parse_stage(ck_stage) == state.cfg.stage)
    state.step = ck.manifest.at("step").get<int64_t>();
  else
    state.step = 0;  // cross-stage resume starts a new run
  return report;
}

void append_metrics(const std::string& path, int64_t step, const LossBreakdown& bd) {
  nlohmann::json j = {{"step", step},
                      {"total", bd.total},
                      {"denoise", bd.denoise},
                      {"denoise_video", bd.denoise_video},
                      {"denoise_depth", bd.denoise_depth},
                      {"motion", bd.motion},
                      {"xattn", bd.xattn},
                      {"motion_terms", bd.motion_terms},
                      {"xattn_terms", bd.xattn_terms}};
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("cannot append metrics to " + path);
  f << j.dump() << "\n";
  if (!f.flush()) throw IoError("metrics write failed: " + path);
}

GradcheckReport gradcheck(const Objective& objective, ParameterStore<double>& params,
                          const std::function<bool(const std::string&)>& filter,
                          double step, int max_per_tensor, uint64_t seed,
                          double tolerance) {
  if (step <= 0.0) throw PreconditionError("finite-difference step must be positive");
  if (max_per_tensor < 1) throw PreconditionError("max_per_tensor must be >= 1");

  std::map<std::string, TensorD> grads;
  objective(params, &grads);

  GradcheckReport rep;
  for (auto& [name, t] : params.tensors()) {
    if (filter && !filter(name)) continue;
    const auto git = grads.find(name);
    const int64_t n = t.numel();
    Rng rng = named_stream(seed, "gradcheck." + name);
    const int count = static_cast<int>(std::min<int64_t>(max_per_tensor, n));
    for (int k = 0; k < count; ++k) {
      const int64_t idx =
          n <= max_per_tensor ? k : static_cast<int64_t>(rng.uniform_below(n));
      const double orig = t.data[idx];
      t.data[idx] = orig + step;
      const double fp = objective(params, nullptr);
      t.data[idx] = orig - step;
      const double fm = objective(params, nullptr);
      t.data[idx] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = git == grads.end() ? 0.0 : git->second.data[idx];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      ++rep.checked;
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = {name, idx, analytic, numeric, rel};
      }
      if (rel > tolerance) {
        rep.pass = false;
        if (rep.failures.size() < 32) rep.failures.push_back({name, idx, analytic, numeric, rel});
      }
    }
  }
  return rep;
}

std::string probe_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::Denoise: return "denoise";
    case ProbeKind::Motion: return "motion";
    case ProbeKind::Xattn: return "xattn";
    case ProbeKind::Total: return "total";
  }
  return "?";
}

ProbeBatch make_probe_batch(const DenoiserConfig& cfg, uint64_t seed) {
  ProbeBatch b;
  Rng rng = named_stream(seed, "probe");
  const std::vector<int> zshape = {cfg.frames, cfg.latent_channels, cfg.height, cfg.width};
  b.z_v = draw_normal<double>(rng, zshape, 0.7);
  b.z_d = draw_normal<double>(rng, zshape, 0.7);
  b.eps_v = draw_normal<double>(rng, zshape);
  b.eps_d = draw_normal<double>(rng, zshape);
  b.fg_image = TensorD({1, 3, DenoiserConfig::kFgImageSize, DenoiserConfig::kFgImageSize});
  for (auto& v : b.fg_image.data) v = rng.uniform();
  b.bg = draw_normal<double>(rng, {cfg.latent_channels, cfg.height, cfg.width}, 0.3);
  b.pose = TensorD({cfg.frames, cfg.pose_keypoints, cfg.height, cfg.width});
  for (auto& v : b.pose.data) v = rng.uniform(0.0, 0.5);
  b.t = 7;
  return b;
}

Objective make_joint_objective(const DenoiserConfig& cfg, const ProbeBatch& batch,
                               ProbeKind kind) {
  return [cfg, batch, kind](ParameterStore<double>& params,
                            std::map<std::string, TensorD>* grads_out) -> double {
    Tape<double> tape;
    DenoiserBuilder<double> b(tape, cfg, params, /*train=*/grads_out != nullptr);
    const bool capture = kind != ProbeKind::Denoise;
    const auto nodes = build_joint_losses(tape, b, batch.z_v, batch.z_d, batch.t,
                                          batch.eps_v, batch.eps_d, batch.fg_image,
                                          batch.bg, batch.pose, capture,
                                          XattnShareMode::Independent, /*coupled=*/true);
    int loss = Tape<double>::kNone;
    const LossWeights w;
    switch (kind) {
      case ProbeKind::Denoise:
        loss = tape.add(nodes.denoise_v, nodes.denoise_d);
        break;
      case ProbeKind::Motion:
        for (int m : nodes.motion)
          loss = loss == Tape<double>::kNone ? m : tape.add(loss, m);
        break;
      case ProbeKind::Xattn:
        for (int x : nodes.xattn)
          loss = loss == Tape<double>::kNone ? x : tape.add(loss, x);
        break;
      case ProbeKind::Total: {
        loss = tape.add(nodes.denoise_v, nodes.denoise_d);
        for (int m : nodes.motion)
          loss = tape.add_scaled(loss, m, static_cast<double>(w.motion));
        for (int x : nodes.xattn)
          loss = tape.add_scaled(loss, x, static_cast<double>(w.xattn));
        break;
      }
    }
    const double value = tape.value(loss).data[0];
    if (grads_out) {
      tape.backward(loss);
      grads_out->clear();
      for (const auto& [name, node] : b.used_params()) {
        if (tape.grad_ready(node)) {
          (*grads_out)[name] = tape.grad(node);
        } else {
          // The probed loss never touches this parameter, so its gradient is
          // identically zero (e.g. the output head under a feature-tap loss).
          TensorD zero(tape.value(node).shape);
          (*grads_out)[name] = std::move(zero);
        }
      }
    }
    return value;
  };
}

}  // namespace idol
