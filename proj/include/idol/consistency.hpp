#pragma once

#include <string>
#include <utility>
#include <vector>

#include "idol/tensor.hpp"

namespace idol {

// How foreground cross-attention maps are combined between the two streams.
enum class XattnShareMode { Independent, ShareAvg, ShareVideo };
XattnShareMode parse_share_mode(const std::string& s);  // throws on unknown mode
std::string share_mode_name(XattnShareMode m);

// Reference implementations of the motion-field construction and the
// cross-stream consistency losses. These favor clarity over speed and are the
// ground truth the fused training-time operations are checked against.

// L2-normalizes the channel vector at every spatial location. Accepts
// [L,D,H,W] or [D,H,W]. Locations with norm < 1e-8 map to the zero vector.
template <typename T>
Tensor<T> normalize_features(const Tensor<T>& f);

// All-pairs channel dot products between two single-frame feature maps
// [D,H,W]: out[i,j,k,l] = sum_d fa[d,i,j] * fb[d,k,l], shape [H,W,H,W].
template <typename T>
Tensor<T> cost_volume(const Tensor<T>& fa, const Tensor<T>& fb);

// Softmax over the last two axes of a cost volume [H,W,H,W] at temperature
// tau: each source location (i,j) yields a distribution over targets.
template <typename T>
Tensor<T> motion_field(const Tensor<T>& cost, T tau);

// Motion consistency between two feature stacks [L,D,H,W] (L >= 2): mean
// squared difference between the two streams' motion fields, averaged over
// the L-1 frame pairs and all (source, target) pairs.
template <typename T>
double motion_consistency_loss(const Tensor<T>& fa, const Tensor<T>& fb, T tau);

// Cross-attention map consistency: elementwise mean squared difference.
template <typename T>
double attention_consistency_loss(const Tensor<T>& ma, const Tensor<T>& mb);

// Scalar weights applied to the per-block consistency terms.
struct LossWeights {
  double motion = 0.01;
  double xattn = 0.01;
};

// Sum of the two streams' mean squared noise-prediction errors.
template <typename T>
double denoise_loss(const Tensor<T>& eps_v_hat, const Tensor<T>& eps_v,
                    const Tensor<T>& eps_d_hat, const Tensor<T>& eps_d);

// Full training objective: denoise + sum over blocks of the weighted
// consistency terms. The two vectors carry one value per tapped block and must
// have equal length.
double total_loss(double denoise, const std::vector<double>& motion_terms,
                  const std::vector<double>& xattn_terms, const LossWeights& w);

// Combines the two streams' attention maps according to the sharing ablation:
// independent returns the inputs unchanged, share_avg replaces both with their
// mean, share_video replaces both with the video stream's maps.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> shared_xattn_variant(const Tensor<T>& mv,
                                                     const Tensor<T>& md,
                                                     XattnShareMode mode);

}  // namespace idol
