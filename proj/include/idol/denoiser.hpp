#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "idol/consistency.hpp"
#include "idol/params.hpp"
#include "idol/tape.hpp"
#include "idol/tensor.hpp"

namespace idol {

enum class Modality { Video = 0, Depth = 1 };

// Architecture of the dual-stream denoiser. One parameter set serves both the
// video and the depth stream; the modality embedding table is the only tensor
// that exists solely because there are two streams.
struct DenoiserConfig {
  int frames = 8;
  int height = 32;
  int width = 32;
  int latent_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_mults{1, 2, 4};
  int heads = 4;
  int cond_dim = 64;      // width of timestep/modality embeddings and fg tokens
  int pose_keypoints = 3;

  // Architectural switches. `temporal` controls the temporal conv inside each
  // residual block and the temporal attention layers; `cross_modal_layers`
  // controls whether the joint-attention layers exist at all (the runtime
  // decoupling ablation instead keeps them and feeds each stream only its own
  // tokens). `modality_table` is false for the single-modality parameter set
  // used in parameter-count comparisons.
  bool temporal = true;
  bool cross_modal_layers = true;
  bool modality_table = true;
  bool separate_unets = false;

  // Foreground conditioning crops are always encoded at this fixed size.
  static constexpr int kFgImageSize = 16;
  static constexpr int kFgTokens = 4;  // 2x2 token grid from the encoder

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int channels(int level) const { return base_channels * channel_mults[level]; }
  void validate() const;
};

// Conditioning inputs shared by both streams of one scene.
template <typename T>
struct ConditionBundleT {
  Tensor<T> fg_tokens;  // [K_f, E] encoded foreground tokens
  Tensor<T> bg_latent;  // [latent_channels, H, W]
  Tensor<T> pose;       // [L, K_p, H, W] keypoint heatmaps
};
using ConditionBundle = ConditionBundleT<float>;

// Output of one denoising stream.
template <typename T>
struct StreamOutT {
  Tensor<T> eps;                         // [L, C, H, W] noise prediction
  std::vector<Tensor<T>> tap_features;   // per up block: [L, D_n, H_n, W_n]
  std::vector<Tensor<T>> tap_xattn;      // per up block: [L, heads, S_n, K_f]
};
using StreamOut = StreamOutT<float>;

// Registers every learnable tensor for `cfg` into `store` (no values yet);
// call store.initialize(seed) afterwards.
template <typename T>
void define_parameters(const DenoiserConfig& cfg, ParameterStore<T>& store);

ParameterStore<float> make_parameter_store(const DenoiserConfig& cfg, uint64_t seed);

// Names that a stage-1 (single-frame, single-modality) store lacks and a
// stage-2 store must freshly initialize: temporal and joint-attention weights.
bool is_temporal_or_cross_modal(const std::string& name);

// Sinusoidal position code for an integer timestep: even entries sin, odd
// entries cos, geometric frequency ladder.
std::vector<double> sinusoidal_embedding(int t, int dim);

// Graph builder: records one denoiser evaluation (one or two streams in
// lockstep) onto a tape. With train=true, store tensors become differentiable
// tape parameters; otherwise constants.
template <typename T>
class DenoiserBuilder {
 public:
  struct Stream {
    int z = Tape<T>::kNone;  // [L, C, H, W] noisy latent node
    Modality y = Modality::Video;
  };
  struct Result {
    int eps = Tape<T>::kNone;
    std::vector<int> tap_features;
    std::vector<int> tap_xattn;
  };

  DenoiserBuilder(Tape<T>& tape, const DenoiserConfig& cfg, ParameterStore<T>& store,
                  bool train);

  // Node for a named store tensor (created on first use).
  int param_node(const std::string& name);

  // Foreground encoder: image node [1, 3, 16, 16] -> token node [1, E, K_f].
  int encode_fg(int image_node, const std::string& prefix = "");

  // Token constant from a [K_f, E] tensor (transposed to the internal layout).
  int fg_token_node(const Tensor<T>& tokens);

  // Runs the denoiser over one or two streams sharing timestep t.
  //   fg_tok: [1, E, K_f] node; bg: [C, H, W] node or kNone;
  //   pose: [L, K_p, H, W] node or kNone (pose branch skipped when absent).
  // With two streams and coupled=true, joint attention couples them; with
  // coupled=false each stream degenerates to self-attention (identical to a
  // one-stream run).
  std::vector<Result> run(const std::vector<Stream>& streams, int t, int fg_tok, int bg,
                          int pose, bool capture_taps, XattnShareMode share,
                          bool coupled);

  // Parameter nodes created so far, keyed by store name.
  const std::map<std::string, int>& used_params() const { return pnodes_; }

 private:
  struct Ctx;  // per-run state (stream features, embeddings, prefixes)

  int gn(int x, const std::string& p, int groups);
  int linear(int x, const std::string& p);
  int conv(int x, const std::string& p, int stride, int pad);
  int res_block(int x, int st, const std::string& p, int cin, int cout,
                const std::string& prefix);
  int spatial_attn(int x, const std::string& p);
  int temporal_attn(int x, const std::string& p);
  void fg_attn(Ctx& c, int level_or_mid, const std::string& stem, bool capture);
  void cross_modal_attn(Ctx& c, const std::string& stem);
  int adapter_residual(int pose, int st, int level, const std::string& prefix,
                       std::vector<int>& cache);

  Tape<T>& tape_;
  const DenoiserConfig& cfg_;
  ParameterStore<T>& store_;
  bool train_;
  std::map<std::string, int> pnodes_;
};

// Plain-tensor entry points (no gradients).
template <typename T>
StreamOutT<T> single_forward(const DenoiserConfig& cfg, ParameterStore<T>& store,
                             const Tensor<T>& z, int t, Modality y,
                             const ConditionBundleT<T>& cond, bool capture_taps);

template <typename T>
std::pair<StreamOutT<T>, StreamOutT<T>> joint_forward(
    const DenoiserConfig& cfg, ParameterStore<T>& store, const Tensor<T>& z_v,
    const Tensor<T>& z_d, int t, const ConditionBundleT<T>& cond, bool capture_taps,
    XattnShareMode share = XattnShareMode::Independent, bool coupled = true);

// Foreground encoder on plain tensors: [3, 16, 16] -> [K_f, E].
template <typename T>
Tensor<T> encode_foreground(const DenoiserConfig& cfg, ParameterStore<T>& store,
                            const Tensor<T>& image);

// Stand-alone joint attention reference on row-major token matrices [S, D]:
// concatenate both token sets, run multi-head self-attention with one shared
// weight set, split, and add residually. tokens_d may be null (one set).
template <typename T>
struct JointAttnWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // [D,D] and [D]
  int heads = 1;
};
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_modal_attention(const Tensor<T>& tokens_v,
                                                      const Tensor<T>* tokens_d,
                                                      const JointAttnWeights<T>& w);

extern template class DenoiserBuilder<float>;
extern template class DenoiserBuilder<double>;

}  // namespace idol
