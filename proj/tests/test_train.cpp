#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "idol/checkpoint.hpp"
#include "idol/denoiser.hpp"
#include "idol/diffusion.hpp"
#include "idol/rng.hpp"
#include "idol/scenes.hpp"
#include "idol/train.hpp"

using namespace idol;
namespace fs = std::filesystem;

namespace {

DenoiserConfig tiny_base() {
  DenoiserConfig cfg;
  cfg.frames = 2;
  cfg.height = 8;
  cfg.width = 8;
  cfg.base_channels = 8;
  cfg.channel_mults = {1, 2};
  cfg.heads = 2;
  cfg.cond_dim = 16;
  return cfg;
}

std::vector<SceneSample> tiny_data(int L, int H, int W, uint64_t seed = 11) {
  const DatasetPlan plan = plan_dataset(2, 1, seed, L, H, W);
  std::vector<SceneSample> out;
  for (const auto& spec : plan.train) out.push_back(generate_scene(spec, L, H, W));
  return out;
}

TrainState fresh_state(const TrainConfig& cfg, int L = 2) {
  const DenoiserConfig base = tiny_base();
  return make_train_state(cfg, base, DiffusionSchedule::linear(10),
                          tiny_data(L, base.height, base.width));
}

bool stores_equal(const ParameterStore<float>& a, const ParameterStore<float>& b) {
  if (a.count() != b.count()) return false;
  for (const auto& [name, t] : a.tensors()) {
    if (!b.has(name)) return false;
    const TensorF& u = b.tensors().at(name);
    if (u.shape != t.shape || u.data != t.data) return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void dump(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  REQUIRE(f.good());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / "idol_train_tests") {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void perturb_all(ParameterStore<double>& params, uint64_t seed, double sigma) {
  for (auto& [name, t] : params.tensors()) {
    Rng rng = named_stream(seed, "perturb." + name);
    for (auto& v : t.data) v += sigma * rng.normal();
  }
}

}  // namespace

TEST_CASE("training config validation and stage defaults") {
  TrainConfig c;
  CHECK(c.resolved_lr() == doctest::Approx(1e-4));
  c.stage = TrainStage::Haop;
  CHECK(c.resolved_lr() == doctest::Approx(1e-3));
  c.learning_rate = 5e-4;
  CHECK(c.resolved_lr() == doctest::Approx(5e-4));
  CHECK_NOTHROW(c.validate());

  TrainConfig bad = c;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
  bad = c;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
  bad = c;
  bad.weights.motion = -0.5;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);

  CHECK(parse_stage("haop") == TrainStage::Haop);
  CHECK(parse_stage(stage_name(TrainStage::Joint)) == TrainStage::Joint);
  CHECK_THROWS_AS(parse_stage("warmup"), PreconditionError);
}

TEST_CASE("sgd momentum recurrence matches hand computation") {
  ParameterStore<float> params;
  params.define("w", {1}, Init::Zero);
  params.initialize(0);
  params.tensor("w").data[0] = 0.0f;
  TensorF g({1});
  g.data[0] = 1.0f;
  std::map<std::string, const TensorF*> grads{{"w", &g}};
  std::map<std::string, std::vector<float>> vel;

  apply_sgd(params, grads, vel, 1.0, 0.5, nullptr);
  CHECK(params.tensor("w").data[0] == doctest::Approx(-1.0));
  apply_sgd(params, grads, vel, 1.0, 0.5, nullptr);
  CHECK(params.tensor("w").data[0] == doctest::Approx(-2.5));
  apply_sgd(params, grads, vel, 1.0, 0.5, nullptr);
  CHECK(params.tensor("w").data[0] == doctest::Approx(-4.25));
}

TEST_CASE("sgd drives a quadratic to zero and honors lr=0 and freezing") {
  ParameterStore<float> params;
  params.define("theta", {1}, Init::Zero);
  params.define("iced.res.w", {1}, Init::Zero);
  params.initialize(0);
  params.tensor("theta").data[0] = 1.0f;
  params.tensor("iced.res.w").data[0] = 1.0f;
  std::map<std::string, std::vector<float>> vel;

  // Minimize theta^2: gradient 2*theta, lr 0.1 -> contraction factor 0.8.
  for (int i = 0; i < 100; ++i) {
    TensorF g({1});
    g.data[0] = 2.0f * params.tensor("theta").data[0];
    TensorF gf({1});
    gf.data[0] = 2.0f * params.tensor("iced.res.w").data[0];
    std::map<std::string, const TensorF*> grads{{"theta", &g}, {"iced.res.w", &gf}};
    apply_sgd(params, grads, vel, 0.1, 0.0,
              [](const std::string& n) { return n.find(".res") != std::string::npos; });
  }
  CHECK(std::abs(params.tensor("theta").data[0]) < 1e-6);
  CHECK(params.tensor("iced.res.w").data[0] == 1.0f);  // frozen, untouched

  // lr = 0 leaves parameters bit-exact even with momentum active.
  const float before = params.tensor("theta").data[0];
  TensorF g({1});
  g.data[0] = 123.0f;
  std::map<std::string, const TensorF*> grads{{"theta", &g}};
  apply_sgd(params, grads, vel, 0.0, 0.9, nullptr);
  apply_sgd(params, grads, vel, 0.0, 0.9, nullptr);
  CHECK(params.tensor("theta").data[0] == before);
}

TEST_CASE("stage architecture drops temporal and joint layers for stage one") {
  const DenoiserConfig base = tiny_base();
  TrainConfig cfg;
  cfg.stage = TrainStage::Haop;
  const DenoiserConfig s1 = stage_architecture(base, cfg);
  CHECK(s1.frames == 1);
  CHECK_FALSE(s1.temporal);
  CHECK_FALSE(s1.cross_modal_layers);
  CHECK(s1.modality_table);  // kept so stage two restores it

  cfg.stage = TrainStage::Joint;
  cfg.separate_unets = true;
  const DenoiserConfig s2 = stage_architecture(base, cfg);
  CHECK(s2.frames == base.frames);
  CHECK(s2.temporal);
  CHECK(s2.cross_modal_layers);
  CHECK(s2.separate_unets);
}

TEST_CASE("checkpoint save/load round trip is byte-identical and exact") {
  TempDir tmp;
  const DenoiserConfig cfg = tiny_base();
  ParameterStore<float> store = make_parameter_store(cfg, 5);
  const nlohmann::json manifest = {{"format", 1}, {"note", "round trip"}};

  const fs::path a = tmp.path / "a.ckpt";
  save_checkpoint(a.string(), store, manifest);
  const LoadedCheckpoint loaded = load_checkpoint(a.string());
  CHECK(loaded.manifest == manifest);
  REQUIRE(loaded.tensors.size() == store.count());
  for (const auto& [name, t] : store.tensors()) {
    REQUIRE(loaded.tensors.count(name) == 1);
    CHECK(loaded.tensors.at(name).shape == t.shape);
    CHECK(loaded.tensors.at(name).data == t.data);
  }

  // Restoring into a differently-seeded store reproduces every tensor, and
  // re-saving produces the same bytes.
  ParameterStore<float> store2 = make_parameter_store(cfg, 999);
  const ResumeReport rep = restore_params(store2, loaded.tensors, 999);
  CHECK(rep.restored.size() == store.count());
  CHECK(rep.fresh.empty());
  CHECK(rep.unused.empty());
  CHECK(stores_equal(store, store2));

  const fs::path b = tmp.path / "b.ckpt";
  save_checkpoint(b.string(), store2, manifest);
  CHECK(slurp(a) == slurp(b));
}

TEST_CASE("checkpoint loader rejects corruption, version skew, and junk") {
  TempDir tmp;
  ParameterStore<float> store = make_parameter_store(tiny_base(), 7);
  const fs::path p = tmp.path / "c.ckpt";
  save_checkpoint(p.string(), store, {{"k", 1}});
  const std::string good = slurp(p);

  // Flip one payload byte: the per-tensor CRC must catch it.
  std::string bad = good;
  bad[bad.size() - 12] = static_cast<char>(bad[bad.size() - 12] ^ 0x40);
  dump(p, bad);
  CHECK_THROWS_AS(load_checkpoint(p.string()), IoError);

  // Bump the version field (bytes 8..11, little endian).
  bad = good;
  bad[8] = 2;
  dump(p, bad);
  try {
    load_checkpoint(p.string());
    FAIL("version skew not detected");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  // Wrong magic.
  bad = good;
  bad[0] = 'X';
  dump(p, bad);
  CHECK_THROWS_AS(load_checkpoint(p.string()), IoError);

  // Truncation and trailing garbage.
  dump(p, good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(p.string()), IoError);
  dump(p, good + "z");
  CHECK_THROWS_AS(load_checkpoint(p.string()), IoError);

  CHECK_THROWS_AS(load_checkpoint((tmp.path / "missing.ckpt").string()), IoError);

  // Restoring a tensor whose stored shape disagrees with the store throws.
  dump(p, good);
  LoadedCheckpoint loaded = load_checkpoint(p.string());
  const std::string name0 = loaded.tensors.begin()->first;
  loaded.tensors.at(name0) = TensorF({1, 2});
  ParameterStore<float> store2 = make_parameter_store(tiny_base(), 7);
  CHECK_THROWS_AS(restore_params(store2, loaded.tensors, 7), PreconditionError);
}

TEST_CASE("stage one to stage two resume freshly initializes exactly the new layers") {
  TempDir tmp;
  TrainConfig c1;
  c1.stage = TrainStage::Haop;
  c1.seed = 3;
  TrainState s1 = fresh_state(c1, /*L=*/4);
  train_step(s1);
  train_step(s1);
  const fs::path ckpt = tmp.path / "stage1.ckpt";
  save_train_checkpoint(ckpt.string(), s1);

  TrainConfig c2;
  c2.stage = TrainStage::Joint;
  c2.seed = 3;
  TrainState s2 = fresh_state(c2, /*L=*/2);
  const ParameterStore<float> before = s2.params;
  const ResumeReport rep = resume_from_checkpoint(s2, ckpt.string());

  CHECK(s2.step == 0);  // cross-stage resume starts a new run
  CHECK(rep.unused.empty());
  CHECK_FALSE(rep.fresh.empty());
  CHECK_FALSE(rep.restored.empty());
  CHECK(rep.fresh.size() + rep.restored.size() == s2.params.count());
  for (const auto& n : rep.fresh) CHECK(is_temporal_or_cross_modal(n));
  for (const auto& n : rep.restored) CHECK_FALSE(is_temporal_or_cross_modal(n));

  // Restored tensors carry the trained stage-one values bit-exactly; fresh
  // tensors keep their seeded initialization.
  for (const auto& n : rep.restored)
    CHECK(s2.params.tensors().at(n).data == s1.params.tensors().at(n).data);
  for (const auto& n : rep.fresh)
    CHECK(s2.params.tensors().at(n).data == before.tensors().at(n).data);

  // Same-stage resume continues the step counter.
  TrainState s3 = fresh_state(c1, /*L=*/4);
  const ResumeReport rep3 = resume_from_checkpoint(s3, ckpt.string());
  CHECK(s3.step == 2);
  CHECK(rep3.fresh.empty());
  CHECK(rep3.unused.empty());
  CHECK(stores_equal(s3.params, s1.params));
}

TEST_CASE("train state rejects mismatched dataset geometry") {
  TrainConfig cfg;
  const DenoiserConfig base = tiny_base();
  CHECK_THROWS_AS(make_train_state(cfg, base, DiffusionSchedule::linear(10),
                                   tiny_data(2, 16, 16)),
                  PreconditionError);
  CHECK_THROWS_AS(make_train_state(cfg, base, DiffusionSchedule::linear(10),
                                   tiny_data(5, 8, 8)),
                  PreconditionError);
  CHECK_THROWS_AS(
      make_train_state(cfg, base, DiffusionSchedule::linear(10), {}),
      PreconditionError);
}

TEST_CASE("joint training steps are deterministic and actually move parameters") {
  TrainConfig cfg;
  cfg.seed = 21;
  cfg.batch_size = 2;
  TrainState a = fresh_state(cfg);
  TrainState b = fresh_state(cfg);
  const ParameterStore<float> init = a.params;

  for (int i = 0; i < 2; ++i) {
    const LossBreakdown la = train_step(a);
    const LossBreakdown lb = train_step(b);
    CHECK(la.total == lb.total);
    CHECK(la.denoise_video == lb.denoise_video);
    CHECK(la.denoise_depth == lb.denoise_depth);
    CHECK(la.motion == lb.motion);
    CHECK(la.xattn == lb.xattn);
    CHECK(std::isfinite(la.total));
  }
  CHECK(stores_equal(a.params, b.params));
  CHECK_FALSE(stores_equal(a.params, init));
  CHECK(a.step == 2);
}

TEST_CASE("zero learning rate leaves parameters bit-exact") {
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.learning_rate = 0.0;
  cfg.momentum = 0.9;
  TrainState st = fresh_state(cfg);
  const ParameterStore<float> init = st.params;
  const LossBreakdown bd = train_step(st);
  train_step(st);
  CHECK(std::isfinite(bd.total));
  CHECK(stores_equal(st.params, init));
}

TEST_CASE("loss breakdown components add up under the configured weights") {
  TrainConfig cfg;
  cfg.seed = 9;
  TrainState st = fresh_state(cfg);
  const LossBreakdown bd = train_step(st);
  REQUIRE(bd.motion_terms.size() == 2);  // one tap per up block
  REQUIRE(bd.xattn_terms.size() == 2);
  double mo = 0.0, xa = 0.0;
  for (double v : bd.motion_terms) mo += v;
  for (double v : bd.xattn_terms) xa += v;
  CHECK(bd.motion == doctest::Approx(mo).epsilon(1e-9));
  CHECK(bd.xattn == doctest::Approx(xa).epsilon(1e-9));
  CHECK(bd.denoise == doctest::Approx(bd.denoise_video + bd.denoise_depth).epsilon(1e-9));
  CHECK(bd.total ==
        doctest::Approx(bd.denoise + 0.01 * bd.motion + 0.01 * bd.xattn).epsilon(1e-4));

  // Disabling the motion term removes it from the objective but keeps the
  // diagnostic; zero weights skip the extra graphs entirely.
  TrainConfig c2 = cfg;
  c2.disable_mo = true;
  TrainState st2 = fresh_state(c2);
  const LossBreakdown b2 = train_step(st2);
  CHECK(b2.motion > 0.0);
  CHECK(b2.total == doctest::Approx(b2.denoise + 0.01 * b2.xattn).epsilon(1e-4));

  TrainConfig c3 = cfg;
  c3.weights.motion = 0.0;
  c3.weights.xattn = 0.0;
  TrainState st3 = fresh_state(c3);
  const LossBreakdown b3 = train_step(st3);
  CHECK(b3.motion_terms.empty());
  CHECK(b3.xattn_terms.empty());
  CHECK(b3.total == doctest::Approx(b3.denoise).epsilon(1e-5));
}

TEST_CASE("freezing residual blocks pins exactly the .res parameters") {
  TrainConfig cfg;
  cfg.seed = 14;
  cfg.freeze_resblocks = true;
  TrainState st = fresh_state(cfg);
  const ParameterStore<float> init = st.params;
  train_step(st);

  int res_names = 0;
  bool non_res_moved = false;
  for (const auto& [name, t] : st.params.tensors()) {
    if (name.find(".res") != std::string::npos) {
      ++res_names;
      CHECK(t.data == init.tensors().at(name).data);
    } else if (t.data != init.tensors().at(name).data) {
      non_res_moved = true;
    }
  }
  CHECK(res_names > 0);
  CHECK(non_res_moved);
}

TEST_CASE("stage-one training runs single-frame reconstruction only") {
  TrainConfig cfg;
  cfg.stage = TrainStage::Haop;
  cfg.seed = 8;
  cfg.batch_size = 2;
  TrainState st = fresh_state(cfg, /*L=*/4);
  const ParameterStore<float> init = st.params;
  const LossBreakdown bd = train_step(st);
  CHECK(std::isfinite(bd.total));
  CHECK(bd.denoise_depth == 0.0);
  CHECK(bd.motion_terms.empty());
  CHECK(bd.xattn_terms.empty());
  CHECK(bd.total == doctest::Approx(bd.denoise_video).epsilon(1e-5));
  CHECK_FALSE(stores_equal(st.params, init));
  for (const auto& [name, t] : st.params.tensors())
    CHECK_FALSE(is_temporal_or_cross_modal(name));
}

TEST_CASE("non-finite forward aborts with a training error") {
  TrainConfig cfg;
  cfg.seed = 2;
  TrainState st = fresh_state(cfg);
  for (auto& [name, t] : st.params.tensors()) {
    if (name.find("stem") != std::string::npos) {
      t.data[0] = std::numeric_limits<float>::quiet_NaN();
      break;
    }
  }
  CHECK_THROWS_AS(train_step(st), TrainingError);
}

TEST_CASE("gradient checker separates correct from broken analytic gradients") {
  ParameterStore<double> params;
  params.define("w", {4}, Init::Zero);
  params.initialize(0);
  auto& w = params.tensor("w").data;
  w = {0.5, -0.3, 1.2, 0.1};
  const std::vector<double> c = {1.0, 2.0, -1.0, 0.5};

  const auto value = [&c](const ParameterStore<double>& p) {
    double f = 0.0;
    const auto& wd = p.tensors().at("w").data;
    for (size_t i = 0; i < wd.size(); ++i) f += c[i] * wd[i] + wd[i] * wd[i];
    return f;
  };
  const Objective good = [&](ParameterStore<double>& p,
                             std::map<std::string, TensorD>* g) {
    if (g) {
      TensorD grad({4});
      const auto& wd = p.tensors().at("w").data;
      for (size_t i = 0; i < wd.size(); ++i) grad.data[i] = c[i] + 2.0 * wd[i];
      (*g)["w"] = grad;
    }
    return value(p);
  };
  const Objective broken = [&](ParameterStore<double>& p,
                               std::map<std::string, TensorD>* g) {
    if (g) {
      good(p, g);
      for (auto& v : g->at("w").data) v *= 1.01;
    }
    return value(p);
  };

  const GradcheckReport ok = gradcheck(good, params, nullptr, 1e-5, 64, 1);
  CHECK(ok.pass);
  CHECK(ok.checked == 4);
  CHECK(ok.max_rel < 1e-7);

  const GradcheckReport bad = gradcheck(broken, params, nullptr, 1e-5, 64, 1);
  CHECK_FALSE(bad.pass);
  CHECK(bad.failures.size() == 4);
  CHECK(bad.worst.rel > 1e-3);
  CHECK(bad.worst.tensor == "w");

  CHECK_THROWS_AS(gradcheck(good, params, nullptr, 0.0, 64, 1), PreconditionError);
  CHECK_THROWS_AS(gradcheck(good, params, nullptr, 1e-5, 0, 1), PreconditionError);
}

TEST_CASE("probe batches are deterministic and correctly shaped") {
  const DenoiserConfig cfg = tiny_base();
  const ProbeBatch a = make_probe_batch(cfg, 77);
  const ProbeBatch b = make_probe_batch(cfg, 77);
  const ProbeBatch c = make_probe_batch(cfg, 78);
  CHECK(a.z_v.shape == std::vector<int>{2, 3, 8, 8});
  CHECK(a.fg_image.shape == std::vector<int>{1, 3, 16, 16});
  CHECK(a.bg.shape == std::vector<int>{3, 8, 8});
  CHECK(a.pose.shape == std::vector<int>{2, 3, 8, 8});
  CHECK(a.z_v.data == b.z_v.data);
  CHECK(a.eps_d.data == b.eps_d.data);
  CHECK(a.z_v.data != c.z_v.data);
}

TEST_CASE("probe objectives decompose the total loss") {
  const DenoiserConfig cfg = tiny_base();
  ParameterStore<double> params = make_parameter_store(cfg, 33).cast<double>();
  perturb_all(params, 51, 0.02);
  const ProbeBatch batch = make_probe_batch(cfg, 6);

  const double den = make_joint_objective(cfg, batch, ProbeKind::Denoise)(params, nullptr);
  const double mo = make_joint_objective(cfg, batch, ProbeKind::Motion)(params, nullptr);
  const double xa = make_joint_objective(cfg, batch, ProbeKind::Xattn)(params, nullptr);
  const double tot = make_joint_objective(cfg, batch, ProbeKind::Total)(params, nullptr);
  CHECK(den > 0.0);
  CHECK(mo > 0.0);
  CHECK(xa > 0.0);
  CHECK(tot == doctest::Approx(den + 0.01 * mo + 0.01 * xa).epsilon(1e-9));
}

TEST_CASE("analytic gradients of the network match finite differences") {
  const DenoiserConfig cfg = tiny_base();
  ParameterStore<double> params = make_parameter_store(cfg, 19).cast<double>();
  perturb_all(params, 23, 0.02);
  const ProbeBatch batch = make_probe_batch(cfg, 29);
  const Objective obj = make_joint_objective(cfg, batch, ProbeKind::Total);
  const auto mid_only = [](const std::string& n) {
    return n.find(".mid.") != std::string::npos;
  };
  // The step is sized for a full-network objective, where accumulated rounding
  // noise (~1e-15 absolute) dominates truncation for near-zero gradients.
  const GradcheckReport rep = gradcheck(obj, params, mid_only, 5e-5, 2, 31);
  CHECK(rep.checked > 20);
  INFO("worst ", rep.worst.tensor, "[", rep.worst.index, "] analytic ",
       rep.worst.analytic, " numeric ", rep.worst.numeric, " rel ", rep.worst.rel);
  CHECK(rep.max_rel < 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("config json round trips and the manifest carries the run") {
  DenoiserConfig a = tiny_base();
  a.separate_unets = true;
  a.temporal = false;
  const DenoiserConfig a2 = arch_from_json(arch_to_json(a));
  CHECK(a2.frames == a.frames);
  CHECK(a2.channel_mults == a.channel_mults);
  CHECK(a2.cond_dim == a.cond_dim);
  CHECK(a2.temporal == a.temporal);
  CHECK(a2.separate_unets == a.separate_unets);

  TrainConfig c;
  c.stage = TrainStage::Haop;
  c.learning_rate = 0.02;
  c.momentum = 0.5;
  c.weights.motion = 0.25;
  c.no_cross_modal_attn = true;
  c.xattn_share = XattnShareMode::ShareAvg;
  c.freeze_resblocks = true;
  c.haop.dilation_radius = 5;
  c.seed = (1ull << 40) + 17;
  const TrainConfig c2 = train_from_json(train_to_json(c));
  CHECK(c2.stage == c.stage);
  CHECK(c2.learning_rate == doctest::Approx(c.learning_rate));
  CHECK(c2.momentum == doctest::Approx(c.momentum));
  CHECK(c2.weights.motion == doctest::Approx(c.weights.motion));
  CHECK(c2.no_cross_modal_attn == c.no_cross_modal_attn);
  CHECK(c2.xattn_share == c.xattn_share);
  CHECK(c2.freeze_resblocks == c.freeze_resblocks);
  CHECK(c2.haop.dilation_radius == c.haop.dilation_radius);
  CHECK(c2.seed == c.seed);

  TrainConfig jc;
  jc.seed = 1;
  TrainState st = fresh_state(jc);
  st.step = 42;
  const nlohmann::json m = make_manifest(st);
  CHECK(m.at("step") == 42);
  CHECK(m.at("tensors") == st.params.count());
  CHECK(m.at("schedule").at("betas").size() == 10);
  CHECK(arch_from_json(m.at("arch")).frames == 2);
  CHECK(train_from_json(m.at("train")).seed == 1);
}

TEST_CASE("metrics log appends one parseable json object per step") {
  TempDir tmp;
  const fs::path p = tmp.path / "metrics.jsonl";
  LossBreakdown bd;
  bd.total = 1.5;
  bd.denoise = 1.0;
  bd.motion_terms = {0.2, 0.3};
  append_metrics(p.string(), 0, bd);
  bd.total = 1.25;
  append_metrics(p.string(), 1, bd);

  std::ifstream f(p);
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.at("step") == n);
    CHECK(j.at("motion_terms").size() == 2);
    CHECK(j.contains("total"));
    CHECK(j.contains("denoise"));
    ++n;
  }
  CHECK(n == 2);
}
