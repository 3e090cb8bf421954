#pragma once

#include <functional>
#include <vector>

#include "idol/tensor.hpp"

namespace idol {

// Define-by-run reverse-mode autodiff tape. Each operation records its output
// value and a backward closure; backward() replays the closures in reverse
// creation order, accumulating gradients into parent nodes.
//
// Layout conventions:
//   * Activations are channel-major: [F, C, H, W] (F = frames) or the
//     flattened view [F, C, S] with S = H*W. Attention and token projections
//     operate on the flattened view directly, so no layout shuffles are
//     recorded on the tape.
//   * Weights: channel_linear [Cout, Cin]; conv2d [Cout, Cin, kh, kw];
//     time_conv [C, C, 3]; biases are 1-D.
//
// Memory control: attention and the motion-consistency loss are fused
// operations that never materialize full probability/cost matrices on the
// tape; the backward pass recomputes them block-by-block from the stored
// inputs.
//
// Instantiated for float (training, checkpoints) and double (gradient
// checking).
template <typename T>
class Tape {
 public:
  static constexpr int kNone = -1;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- node management -----------------------------------------------------
  int constant(Tensor<T> v);                 // no gradient
  int param(Tensor<T> v);                    // gradient tracked
  int input(Tensor<T> v, bool requires_grad);

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor<T>& value(int id) const { return nodes_[check_id(id)].value; }
  const Tensor<T>& grad(int id) const;       // valid after backward()
  bool grad_ready(int id) const;             // false for nodes the loss never reached
  bool requires_grad(int id) const { return nodes_[check_id(id)].rg; }

  // Runs reverse-mode accumulation from a scalar loss node (shape [1]).
  void backward(int loss);

  // --- elementwise / structural --------------------------------------------
  int add(int a, int b);                     // same shape
  int add_scaled(int a, int b, T s);         // a + s*b, same shape
  int scale(int a, T s);
  int silu(int a);
  int add_frame_bias(int x, int b);          // x [F,C,...], b [C,...] broadcast over F
  int add_channel_vec(int x, int v);         // x [F,C,S], v [C] broadcast
  int select_row(int table, int row);        // [R,E] -> [E]
  int reshape(int a, std::vector<int> shape);
  int concat_channels(int a, int b);         // along dim 1
  int concat_spatial(int a, int b);          // [F,C,Sa]+[F,C,Sb] -> [F,C,Sa+Sb]
  int slice_spatial(int x, int s0, int s1, std::vector<int> out_shape);
  int upsample2x(int x);                     // nearest neighbor, [F,C,H,W]
  int avgpool_to(int x, int oh, int ow);

  // --- linear algebra -------------------------------------------------------
  int channel_linear(int x, int w, int b);   // x [..Cin,S] ; w [Cout,Cin]
  int conv2d(int x, int w, int b, int stride, int pad);
  int time_conv(int x, int w, int b);        // kernel 3 over the frame axis
  int group_norm(int x, int gamma, int beta, int groups);  // eps = 1e-5

  // --- attention ------------------------------------------------------------
  // Scaled dot-product attention over spatial positions, per frame.
  // q,k,v: [F,D,S] (or [F,D,H,W]); output matches q's shape.
  int sdp_attention(int q, int k, int v, int heads);
  // Attention across frames, independently per spatial site.
  int time_sdp_attention(int q, int k, int v, int heads);
  // Cross-attention probabilities against a small token set.
  // q [F,D,S]; kf [D,Kf] (any shape with D*Kf elements) -> [F,heads,S,Kf].
  int xattn_probs(int q, int kf, int heads);
  // p [F,heads,S,Kf], vf [D,Kf] -> [F,D,S].
  int xattn_apply(int p, int vf, std::vector<int> out_shape);

  // --- losses ---------------------------------------------------------------
  int mse(int a, int b);                     // mean over all elements -> [1]
  // Fused temporal motion-consistency loss between two feature stacks
  // [L,D,H,W]; see motion-field helpers for the underlying definition.
  int motion_consistency(int fa, int fb, T tau);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool rg = false;
    std::function<void()> back;
  };

  int check_id(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw PreconditionError("invalid tape node id");
    return id;
  }

  int push(Tensor<T> v, bool rg) {
    Node n;
    n.value = std::move(v);
    n.rg = rg;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor<T>& grad_buf(int id);
  bool rg(int id) const { return nodes_[id].rg; }
  const Tensor<T>& val(int id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace idol
