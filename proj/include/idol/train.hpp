#pragma once

#include <json.hpp>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "idol/checkpoint.hpp"
#include "idol/consistency.hpp"
#include "idol/denoiser.hpp"
#include "idol/diffusion.hpp"
#include "idol/haop.hpp"
#include "idol/params.hpp"
#include "idol/scenes.hpp"

namespace idol {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainStage { Haop, Joint };

std::string stage_name(TrainStage s);
TrainStage parse_stage(const std::string& s);

struct TrainConfig {
  TrainStage stage = TrainStage::Joint;
  int steps = 100;
  int batch_size = 1;
  double learning_rate = -1.0;  // negative = stage default (1e-3 / 1e-4)
  double momentum = 0.9;
  LossWeights weights;
  // Ablation switches.
  bool separate_unets = false;
  bool no_cross_modal_attn = false;
  XattnShareMode xattn_share = XattnShareMode::Independent;
  bool disable_mo = false;
  bool disable_xattn = false;
  bool freeze_resblocks = false;
  HaopParams haop;
  uint64_t seed = 0;

  double resolved_lr() const {
    if (learning_rate >= 0.0) return learning_rate;
    return stage == TrainStage::Haop ? 1e-3 : 1e-4;
  }
  void validate() const;
};

struct LossBreakdown {
  double total = 0.0;
  double denoise = 0.0;
  double denoise_video = 0.0;
  double denoise_depth = 0.0;
  double motion = 0.0;  // unweighted sum over tap levels
  double xattn = 0.0;   // unweighted sum over tap levels
  std::vector<double> motion_terms;
  std::vector<double> xattn_terms;
};

// Plain SGD with optional momentum; `frozen` names are skipped entirely.
void apply_sgd(ParameterStore<float>& params,
               const std::map<std::string, const TensorF*>& grads,
               std::map<std::string, std::vector<float>>& velocity, double lr,
               double momentum, const std::function<bool(const std::string&)>& frozen);

// Architecture actually trained at each stage: stage 1 drops the temporal and
// joint-attention layers and runs on single frames.
DenoiserConfig stage_architecture(const DenoiserConfig& base, const TrainConfig& cfg);

struct TrainState {
  TrainConfig cfg;
  DenoiserConfig arch;  // stage-resolved
  DiffusionSchedule schedule;
  ParameterStore<float> params;
  std::map<std::string, std::vector<float>> velocity;
  std::vector<SceneSample> data;
  int64_t step = 0;
};

TrainState make_train_state(const TrainConfig& cfg, const DenoiserConfig& base,
                            const DiffusionSchedule& schedule,
                            std::vector<SceneSample> data);

// One optimizer step; deterministic in (cfg.seed, state.step, data).
LossBreakdown train_step(TrainState& state);

// Checkpoint manifest round trip for the training state.
nlohmann::json arch_to_json(const DenoiserConfig& a);
DenoiserConfig arch_from_json(const nlohmann::json& j);
nlohmann::json train_to_json(const TrainConfig& c);
TrainConfig train_from_json(const nlohmann::json& j);
nlohmann::json make_manifest(const TrainState& state);
void save_train_checkpoint(const std::string& path, const TrainState& state);

// Restores params/step from a checkpoint whose stage may differ (stage-1 ->
// stage-2 resume freshly initializes the missing layer families).
ResumeReport resume_from_checkpoint(TrainState& state, const std::string& path);

// Appends one JSON object per step to a metrics log. Only deterministic
// quantities are recorded, so identical runs produce identical logs.
void append_metrics(const std::string& path, int64_t step, const LossBreakdown& bd);

// --- gradient checking ------------------------------------------------------

// Scalar objective over a double-precision store; when grads_out is non-null
// the objective must also fill analytic gradients for every parameter it
// touched.
using Objective =
    std::function<double(ParameterStore<double>&, std::map<std::string, TensorD>*)>;

struct GradcheckEntry {
  std::string tensor;
  int64_t index = 0;
  double analytic = 0.0, numeric = 0.0, rel = 0.0;
};

struct GradcheckReport {
  bool pass = true;
  double max_rel = 0.0;
  int64_t checked = 0;
  GradcheckEntry worst;
  std::vector<GradcheckEntry> failures;
};

// Central differences on a random subsample of at most `max_per_tensor`
// entries per parameter tensor; relative error uses a 1e-6 floor so that
// finite-difference noise on near-zero gradients cannot dominate.
GradcheckReport gradcheck(const Objective& objective, ParameterStore<double>& params,
                          const std::function<bool(const std::string&)>& filter,
                          double step, int max_per_tensor, uint64_t seed,
                          double tolerance = 1e-4);

// Named probe objectives through the full two-stream graph on a fixed batch.
enum class ProbeKind { Denoise, Motion, Xattn, Total };
std::string probe_name(ProbeKind k);

struct ProbeBatch {
  TensorD z_v, z_d;        // [L, C, H, W]
  TensorD eps_v, eps_d;    // targets
  TensorD fg_image;        // [1, 3, 16, 16]
  TensorD bg, pose;
  int t = 0;
};
ProbeBatch make_probe_batch(const DenoiserConfig& cfg, uint64_t seed);
Objective make_joint_objective(const DenoiserConfig& cfg, const ProbeBatch& batch,
                               ProbeKind kind);

}  // namespace idol
