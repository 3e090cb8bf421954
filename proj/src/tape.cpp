#include "idol/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "idol/gemm.hpp"
#include "idol/threading.hpp"

namespace idol {

namespace {

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// Fixed-width fragment used for the vectorized row kernels below. All
// reductions combine fragment partials in index order, so the result depends
// only on the row contents and length — never on buffer alignment — keeping
// repeated graph evaluations bit-identical.
template <typename T>
struct RowVec {
  static constexpr int64_t kB = 64 / static_cast<int64_t>(sizeof(T));
  using Frag = Eigen::Array<T, kB, 1>;
  using MapF = Eigen::Map<Frag, Eigen::Unaligned>;
  using MapCF = Eigen::Map<const Frag, Eigen::Unaligned>;
};

// In-place softmax over one row of length n, with logits pre-scaled by
// inv_temp. Max-subtraction for stability. The exp over the row is the single
// hottest operation in attention-heavy graphs, so it runs through Eigen's
// packet math instead of scalar libm.
template <typename T>
inline void softmax_row(T* row, int64_t n, T inv_temp) {
  using RV = RowVec<T>;
  const int64_t nb = n - n % RV::kB;
  T mx = row[0];
  if (nb > 0) {
    typename RV::Frag vmax = typename RV::MapCF(row);
    for (int64_t j = RV::kB; j < nb; j += RV::kB)
      vmax = vmax.max(typename RV::MapCF(row + j));
    mx = vmax.maxCoeff();
  }
  for (int64_t j = nb; j < n; ++j) mx = std::max(mx, row[j]);
  mx *= inv_temp;
  T sum = T(0);
  if (nb > 0) {
    typename RV::Frag vsum = RV::Frag::Zero();
    for (int64_t j = 0; j < nb; j += RV::kB) {
      typename RV::MapF m(row + j);
      m = (m * inv_temp - mx).exp();
      vsum += m;
    }
    sum = vsum.sum();
  }
  for (int64_t j = nb; j < n; ++j) {
    const T e = std::exp(row[j] * inv_temp - mx);
    row[j] = e;
    sum += e;
  }
  const T inv = T(1) / sum;
  for (int64_t j = 0; j < nb; j += RV::kB) {
    typename RV::MapF m(row + j);
    m *= inv;
  }
  for (int64_t j = nb; j < n; ++j) row[j] *= inv;
}

// Backward through softmax for one row: given probabilities p and upstream
// dp, writes ds = p * (dp - <dp, p>) scaled by inv_temp into out (may alias dp).
template <typename T>
inline void softmax_row_backward(const T* p, const T* dp, T* out, int64_t n, T inv_temp) {
  using RV = RowVec<T>;
  using DFrag = Eigen::Array<double, RowVec<T>::kB, 1>;
  const int64_t nb = n - n % RV::kB;
  double dot = 0.0;
  if (nb > 0) {
    DFrag vdot = DFrag::Zero();
    for (int64_t j = 0; j < nb; j += RV::kB)
      vdot += typename RV::MapCF(dp + j).template cast<double>() *
              typename RV::MapCF(p + j).template cast<double>();
    dot = vdot.sum();
  }
  for (int64_t j = nb; j < n; ++j)
    dot += static_cast<double>(dp[j]) * static_cast<double>(p[j]);
  const T d = static_cast<T>(dot);
  for (int64_t j = 0; j < nb; j += RV::kB) {
    typename RV::MapF o(out + j);
    o = inv_temp * typename RV::MapCF(p + j) * (typename RV::MapCF(dp + j) - d);
  }
  for (int64_t j = nb; j < n; ++j) out[j] = inv_temp * p[j] * (dp[j] - d);
}

// Row-major Eigen views over strided blocks of channel-major activations.
// Eigen's packed GEMM handles transposed operands directly, so the heavy
// products need no hand-rolled repacking; its blocking depends only on the
// operand dimensions, which keeps repeated evaluations bit-identical.
template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

template <typename T>
inline MapRM<T> map_rm(T* p, int64_t rows, int64_t cols, int64_t ld) {
  return MapRM<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}
template <typename T>
inline CMapRM<T> map_rm(const T* p, int64_t rows, int64_t cols, int64_t ld) {
  return CMapRM<T>(p, rows, cols, Eigen::OuterStride<>(ld));
}

// Frame/channel/spatial decomposition of an activation shape.
struct FCS {
  int64_t F, C, S;
};

template <typename T>
FCS fcs_of(const Tensor<T>& t, const char* op) {
  if (t.ndim() == 1) return {1, t.shape[0], 1};
  if (t.ndim() == 2) return {1, t.shape[0], t.shape[1]};
  int64_t s = 1;
  for (int i = 2; i < t.ndim(); ++i) s *= t.shape[i];
  if (t.shape[0] == 0 || t.shape[1] == 0)
    throw ShapeError(std::string(op) + ": empty activation " + shape_str(t.shape));
  return {t.shape[0], t.shape[1], s};
}

}  // namespace

// ---------------------------------------------------------------------------
// node management

template <typename T>
int Tape<T>::constant(Tensor<T> v) {
  return push(std::move(v), false);
}

template <typename T>
int Tape<T>::param(Tensor<T> v) {
  return push(std::move(v), true);
}

template <typename T>
int Tape<T>::input(Tensor<T> v, bool requires_grad) {
  return push(std::move(v), requires_grad);
}

template <typename T>
const Tensor<T>& Tape<T>::grad(int id) const {
  const Node& n = nodes_[check_id(id)];
  if (n.grad.data.empty())
    throw PreconditionError("gradient not populated for node; run backward() first");
  return n.grad;
}

template <typename T>
bool Tape<T>::grad_ready(int id) const {
  return !nodes_[check_id(id)].grad.data.empty();
}

template <typename T>
Tensor<T>& Tape<T>::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
  return n.grad;
}

template <typename T>
void Tape<T>::backward(int loss) {
  check_id(loss);
  if (nodes_[loss].value.numel() != 1)
    throw PreconditionError("backward() expects a scalar loss node");
  grad_buf(loss).data[0] = T(1);
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.back && !n.grad.data.empty()) n.back();
  }
}

// ---------------------------------------------------------------------------
// elementwise / structural

template <typename T>
int Tape<T>::add(int a, int b) {
  return add_scaled(a, b, T(1));
}

template <typename T>
int Tape<T>::add_scaled(int a, int b, T s) {
  const Tensor<T>&A = val(check_id(a)), &B = val(check_id(b));
  check_shape(A.same_shape(B), "add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor<T> y = A;
  axpy(y.numel(), s, B.ptr(), y.ptr());
  const bool g = rg(a) || rg(b);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, b, s, out]() {
      const Tensor<T>& gy = nodes_[out].grad;
      if (rg(a)) axpy(gy.numel(), T(1), gy.ptr(), grad_buf(a).ptr());
      if (rg(b)) axpy(gy.numel(), s, gy.ptr(), grad_buf(b).ptr());
    };
  }
  return out;
}

template <typename T>
int Tape<T>::scale(int a, T s) {
  const Tensor<T>& A = val(check_id(a));
  Tensor<T> y = A;
  for (auto& v : y.data) v *= s;
  const bool g = rg(a);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, s, out]() {
      const Tensor<T>& gy = nodes_[out].grad;
      axpy(gy.numel(), s, gy.ptr(), grad_buf(a).ptr());
    };
  }
  return out;
}

template <typename T>
int Tape<T>::silu(int a) {
  const Tensor<T>& A = val(check_id(a));
  Tensor<T> y = A;
  for (auto& v : y.data) v *= sigmoid(v);
  const bool g = rg(a);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, out]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>& x = val(a);
      Tensor<T>& gx = grad_buf(a);
      const int64_t n = gy.numel();
      for (int64_t i = 0; i < n; ++i) {
        const T sg = sigmoid(x.data[i]);
        gx.data[i] += gy.data[i] * sg * (T(1) + x.data[i] * (T(1) - sg));
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::add_frame_bias(int x, int b) {
  const Tensor<T>&X = val(check_id(x)), &B = val(check_id(b));
  const int64_t per = B.numel();
  check_shape(per > 0 && X.numel() % per == 0 && X.ndim() >= 1,
              "add_frame_bias: incompatible shapes " + shape_str(X.shape) + " / " + shape_str(B.shape));
  const int64_t F = X.numel() / per;
  check_shape(X.shape[0] == static_cast<int>(F),
              "add_frame_bias: bias must cover all non-frame dims of " + shape_str(X.shape));
  Tensor<T> y = X;
  for (int64_t f = 0; f < F; ++f) axpy(per, T(1), B.ptr(), y.ptr() + f * per);
  const bool g = rg(x) || rg(b);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, b, out, F, per]() {
      const Tensor<T>& gy = nodes_[out].grad;
      if (rg(x)) axpy(gy.numel(), T(1), gy.ptr(), grad_buf(x).ptr());
      if (rg(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (int64_t f = 0; f < F; ++f) axpy(per, T(1), gy.ptr() + f * per, gb.ptr());
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::add_channel_vec(int x, int v) {
  const Tensor<T>&X = val(check_id(x)), &V = val(check_id(v));
  const FCS d = fcs_of(X, "add_channel_vec");
  check_shape(V.numel() == d.C, "add_channel_vec: vector " + shape_str(V.shape) +
                                    " does not match channels of " + shape_str(X.shape));
  Tensor<T> y = X;
  for (int64_t f = 0; f < d.F; ++f) {
    for (int64_t c = 0; c < d.C; ++c) {
      T* row = y.ptr() + (f * d.C + c) * d.S;
      const T add = V.data[c];
      for (int64_t s = 0; s < d.S; ++s) row[s] += add;
    }
  }
  const bool g = rg(x) || rg(v);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, v, out, d]() {
      const Tensor<T>& gy = nodes_[out].grad;
      if (rg(x)) axpy(gy.numel(), T(1), gy.ptr(), grad_buf(x).ptr());
      if (rg(v)) {
        Tensor<T>& gv = grad_buf(v);
        for (int64_t c = 0; c < d.C; ++c) {
          double acc = 0.0;
          for (int64_t f = 0; f < d.F; ++f) {
            const T* row = gy.ptr() + (f * d.C + c) * d.S;
            for (int64_t s = 0; s < d.S; ++s) acc += row[s];
          }
          gv.data[c] += static_cast<T>(acc);
        }
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::select_row(int table, int row) {
  const Tensor<T>& Tb = val(check_id(table));
  check_shape(Tb.ndim() == 2, "select_row: table must be 2-D, got " + shape_str(Tb.shape));
  check_shape(row >= 0 && row < Tb.shape[0], "select_row: row index out of range");
  const int E = Tb.shape[1];
  Tensor<T> y({E});
  std::memcpy(y.ptr(), Tb.ptr() + static_cast<int64_t>(row) * E, sizeof(T) * E);
  const bool g = rg(table);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, table, row, out, E]() {
      const Tensor<T>& gy = nodes_[out].grad;
      axpy<T>(E, T(1), gy.ptr(), grad_buf(table).ptr() + static_cast<int64_t>(row) * E);
    };
  }
  return out;
}

template <typename T>
int Tape<T>::reshape(int a, std::vector<int> shape) {
  const Tensor<T>& A = val(check_id(a));
  check_shape(numel_of(shape) == A.numel(),
              "reshape: cannot view " + shape_str(A.shape) + " as " + shape_str(shape));
  Tensor<T> y(std::move(shape), A.data);
  const bool g = rg(a);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, out]() {
      const Tensor<T>& gy = nodes_[out].grad;
      axpy(gy.numel(), T(1), gy.ptr(), grad_buf(a).ptr());
    };
  }
  return out;
}

template <typename T>
int Tape<T>::concat_channels(int a, int b) {
  const Tensor<T>&A = val(check_id(a)), &B = val(check_id(b));
  const FCS da = fcs_of(A, "concat_channels"), db = fcs_of(B, "concat_channels");
  check_shape(da.F == db.F && da.S == db.S && A.ndim() == B.ndim(),
              "concat_channels: incompatible " + shape_str(A.shape) + " / " + shape_str(B.shape));
  std::vector<int> shape = A.shape;
  shape[1] = static_cast<int>(da.C + db.C);
  Tensor<T> y(shape);
  const int64_t ra = da.C * da.S, rb = db.C * db.S;
  for (int64_t f = 0; f < da.F; ++f) {
    std::memcpy(y.ptr() + f * (ra + rb), A.ptr() + f * ra, sizeof(T) * ra);
    std::memcpy(y.ptr() + f * (ra + rb) + ra, B.ptr() + f * rb, sizeof(T) * rb);
  }
  const bool g = rg(a) || rg(b);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, b, out, da, ra, rb]() {
      const Tensor<T>& gy = nodes_[out].grad;
      for (int64_t f = 0; f < da.F; ++f) {
        if (rg(a)) axpy(ra, T(1), gy.ptr() + f * (ra + rb), grad_buf(a).ptr() + f * ra);
        if (rg(b)) axpy(rb, T(1), gy.ptr() + f * (ra + rb) + ra, grad_buf(b).ptr() + f * rb);
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::concat_spatial(int a, int b) {
  const Tensor<T>&A = val(check_id(a)), &B = val(check_id(b));
  const FCS da = fcs_of(A, "concat_spatial"), db = fcs_of(B, "concat_spatial");
  check_shape(da.F == db.F && da.C == db.C,
              "concat_spatial: incompatible " + shape_str(A.shape) + " / " + shape_str(B.shape));
  Tensor<T> y({static_cast<int>(da.F), static_cast<int>(da.C), static_cast<int>(da.S + db.S)});
  const int64_t S = da.S + db.S;
  for (int64_t fc = 0; fc < da.F * da.C; ++fc) {
    std::memcpy(y.ptr() + fc * S, A.ptr() + fc * da.S, sizeof(T) * da.S);
    std::memcpy(y.ptr() + fc * S + da.S, B.ptr() + fc * db.S, sizeof(T) * db.S);
  }
  const bool g = rg(a) || rg(b);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, b, out, da, db, S]() {
      const Tensor<T>& gy = nodes_[out].grad;
      for (int64_t fc = 0; fc < da.F * da.C; ++fc) {
        if (rg(a)) axpy(da.S, T(1), gy.ptr() + fc * S, grad_buf(a).ptr() + fc * da.S);
        if (rg(b)) axpy(db.S, T(1), gy.ptr() + fc * S + da.S, grad_buf(b).ptr() + fc * db.S);
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::slice_spatial(int x, int s0, int s1, std::vector<int> out_shape) {
  const Tensor<T>& X = val(check_id(x));
  const FCS d = fcs_of(X, "slice_spatial");
  check_shape(0 <= s0 && s0 < s1 && s1 <= d.S, "slice_spatial: range out of bounds");
  const int64_t W = s1 - s0;
  check_shape(numel_of(out_shape) == d.F * d.C * W,
              "slice_spatial: output shape " + shape_str(out_shape) + " has wrong size");
  Tensor<T> y(std::move(out_shape));
  for (int64_t fc = 0; fc < d.F * d.C; ++fc)
    std::memcpy(y.ptr() + fc * W, X.ptr() + fc * d.S + s0, sizeof(T) * W);
  const bool g = rg(x);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, out, d, s0, W]() {
      const Tensor<T>& gy = nodes_[out].grad;
      Tensor<T>& gx = grad_buf(x);
      for (int64_t fc = 0; fc < d.F * d.C; ++fc)
        axpy(W, T(1), gy.ptr() + fc * W, gx.ptr() + fc * d.S + s0);
    };
  }
  return out;
}

template <typename T>
int Tape<T>::upsample2x(int x) {
  const Tensor<T>& X = val(check_id(x));
  check_shape(X.ndim() == 4, "upsample2x: expected [F,C,H,W], got " + shape_str(X.shape));
  const int F = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  Tensor<T> y({F, C, 2 * H, 2 * W});
  for (int64_t fc = 0; fc < static_cast<int64_t>(F) * C; ++fc) {
    const T* src = X.ptr() + fc * H * W;
    T* dst = y.ptr() + fc * 4 * H * W;
    for (int i = 0; i < H; ++i) {
      T* r0 = dst + (2 * i) * (2 * W);
      T* r1 = r0 + 2 * W;
      const T* s = src + i * W;
      for (int j = 0; j < W; ++j) {
        r0[2 * j] = r0[2 * j + 1] = s[j];
        r1[2 * j] = r1[2 * j + 1] = s[j];
      }
    }
  }
  const bool g = rg(x);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, out, F, C, H, W]() {
      const Tensor<T>& gy = nodes_[out].grad;
      Tensor<T>& gx = grad_buf(x);
      for (int64_t fc = 0; fc < static_cast<int64_t>(F) * C; ++fc) {
        const T* src = gy.ptr() + fc * 4 * H * W;
        T* dst = gx.ptr() + fc * H * W;
        for (int i = 0; i < H; ++i) {
          const T* r0 = src + (2 * i) * (2 * W);
          const T* r1 = r0 + 2 * W;
          T* s = dst + i * W;
          for (int j = 0; j < W; ++j)
            s[j] += r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
        }
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::avgpool_to(int x, int oh, int ow) {
  const Tensor<T>& X = val(check_id(x));
  check_shape(X.ndim() == 4, "avgpool_to: expected [F,C,H,W], got " + shape_str(X.shape));
  const int F = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  check_shape(oh > 0 && ow > 0 && H % oh == 0 && W % ow == 0,
              "avgpool_to: output size must divide input size");
  const int ch = H / oh, cw = W / ow;
  const T inv = T(1) / static_cast<T>(ch * cw);
  Tensor<T> y({F, C, oh, ow});
  for (int64_t fc = 0; fc < static_cast<int64_t>(F) * C; ++fc) {
    const T* src = X.ptr() + fc * H * W;
    T* dst = y.ptr() + fc * oh * ow;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int a = 0; a < ch; ++a)
          for (int b = 0; b < cw; ++b) acc += src[(i * ch + a) * W + j * cw + b];
        dst[i * ow + j] = static_cast<T>(acc) * inv;
      }
    }
  }
  const bool g = rg(x);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, out, F, C, H, W, oh, ow, ch, cw, inv]() {
      const Tensor<T>& gy = nodes_[out].grad;
      Tensor<T>& gx = grad_buf(x);
      for (int64_t fc = 0; fc < static_cast<int64_t>(F) * C; ++fc) {
        const T* src = gy.ptr() + fc * oh * ow;
        T* dst = gx.ptr() + fc * H * W;
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            const T gv = src[i * ow + j] * inv;
            for (int a = 0; a < ch; ++a)
              for (int b = 0; b < cw; ++b) dst[(i * ch + a) * W + j * cw + b] += gv;
          }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
int Tape<T>::channel_linear(int x, int w, int b) {
  const Tensor<T>&X = val(check_id(x)), &W = val(check_id(w));
  check_shape(W.ndim() == 2, "channel_linear: weight must be [Cout,Cin]");
  const FCS d = fcs_of(X, "channel_linear");
  const int Cout = W.shape[0], Cin = W.shape[1];
  check_shape(d.C == Cin, "channel_linear: input channels " + shape_str(X.shape) +
                              " do not match weight " + shape_str(W.shape));
  if (b != kNone)
    check_shape(val(check_id(b)).numel() == Cout, "channel_linear: bias size mismatch");

  std::vector<int> oshape;
  if (X.ndim() == 1) {
    oshape = {Cout};
  } else {
    oshape = X.shape;
    oshape[1] = Cout;
  }
  Tensor<T> y(std::move(oshape));
  for (int64_t f = 0; f < d.F; ++f) {
    T* yf = y.ptr() + f * Cout * d.S;
    gemm_nn<T>(Cout, d.S, Cin, W.ptr(), Cin, X.ptr() + f * Cin * d.S, d.S, yf, d.S, false);
    if (b != kNone) {
      const Tensor<T>& B = val(b);
      for (int o = 0; o < Cout; ++o) {
        T* row = yf + static_cast<int64_t>(o) * d.S;
        const T add = B.data[o];
        for (int64_t s = 0; s < d.S; ++s) row[s] += add;
      }
    }
  }
  const bool g = rg(x) || rg(w) || (b != kNone && rg(b));
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, w, b, out, d, Cout, Cin]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&X = val(x), &W = val(w);
      if (rg(x)) {
        Tensor<T>& gx = grad_buf(x);
        std::vector<T> wt(static_cast<size_t>(Cin) * Cout);
        pack_transpose(W.ptr(), Cout, Cin, Cin, wt.data(), Cout);
        for (int64_t f = 0; f < d.F; ++f)
          gemm_nn<T>(Cin, d.S, Cout, wt.data(), Cout, gy.ptr() + f * Cout * d.S, d.S,
                     gx.ptr() + f * Cin * d.S, d.S, true);
      }
      if (rg(w)) {
        Tensor<T>& gw = grad_buf(w);
        for (int64_t f = 0; f < d.F; ++f)
          gemm_nt_acc<T>(Cout, Cin, d.S, gy.ptr() + f * Cout * d.S, d.S,
                         X.ptr() + f * Cin * d.S, d.S, gw.ptr(), Cin);
      }
      if (b != kNone && rg(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (int o = 0; o < Cout; ++o) {
          double acc = 0.0;
          for (int64_t f = 0; f < d.F; ++f) {
            const T* row = gy.ptr() + (f * Cout + o) * d.S;
            for (int64_t s = 0; s < d.S; ++s) acc += row[s];
          }
          gb.data[o] += static_cast<T>(acc);
        }
      }
    };
  }
  return out;
}

namespace {

// im2col for one frame: x [Cin,H,W] -> col [Cin*kh*kw, OH*OW].
template <typename T>
void im2col(const T* x, int Cin, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, T* col) {
  for (int ci = 0; ci < Cin; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* drow = dst + static_cast<int64_t>(oh) * OW;
          if (ih < 0 || ih >= H) {
            std::fill(drow, drow + OW, T(0));
            continue;
          }
          const T* srow = x + (static_cast<int64_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kj;
            drow[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
          }
        }
      }
    }
  }
}

// Accumulates col gradients back into the frame: inverse scatter of im2col.
template <typename T>
void col2im_acc(const T* col, int Cin, int H, int W, int kh, int kw, int stride, int pad, int OH,
                int OW, T* gx) {
  for (int ci = 0; ci < Cin; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + ((static_cast<int64_t>(ci) * kh + ki) * kw + kj) * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const T* srow = src + static_cast<int64_t>(oh) * OW;
          T* drow = gx + (static_cast<int64_t>(ci) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
int Tape<T>::conv2d(int x, int w, int b, int stride, int pad) {
  const Tensor<T>&X = val(check_id(x)), &W = val(check_id(w));
  check_shape(X.ndim() == 4, "conv2d: input must be [F,Cin,H,W], got " + shape_str(X.shape));
  check_shape(W.ndim() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(W.shape));
  const int F = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  const int Cout = W.shape[0], kh = W.shape[2], kw = W.shape[3];
  check_shape(W.shape[1] == Cin, "conv2d: channel mismatch " + shape_str(X.shape) + " vs " +
                                     shape_str(W.shape));
  check_shape(stride >= 1, "conv2d: stride must be >= 1");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (Wd + 2 * pad - kw) / stride + 1;
  check_shape(OH > 0 && OW > 0, "conv2d: kernel larger than padded input");
  if (b != kNone)
    check_shape(val(check_id(b)).numel() == Cout, "conv2d: bias size mismatch");

  const int64_t CK = static_cast<int64_t>(Cin) * kh * kw;
  const int64_t OS = static_cast<int64_t>(OH) * OW;
  Tensor<T> y({F, Cout, OH, OW});
  {
    std::vector<T> col(static_cast<size_t>(CK * OS));
    for (int f = 0; f < F; ++f) {
      im2col(X.ptr() + static_cast<int64_t>(f) * Cin * H * Wd, Cin, H, Wd, kh, kw, stride, pad,
             OH, OW, col.data());
      T* yf = y.ptr() + static_cast<int64_t>(f) * Cout * OS;
      map_rm(yf, Cout, OS, OS).noalias() =
          map_rm(W.ptr(), Cout, CK, CK) * map_rm(col.data(), CK, OS, OS);
      if (b != kNone) {
        const Tensor<T>& B = val(b);
        for (int o = 0; o < Cout; ++o) {
          T* row = yf + static_cast<int64_t>(o) * OS;
          const T add = B.data[o];
          for (int64_t s = 0; s < OS; ++s) row[s] += add;
        }
      }
    }
  }
  const bool g = rg(x) || rg(w) || (b != kNone && rg(b));
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, w, b, out, F, Cin, H, Wd, Cout, kh, kw, stride, pad, OH, OW, CK,
                        OS]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&X = val(x), &W = val(w);
      std::vector<T> col(static_cast<size_t>(CK * OS));
      std::vector<T> dcol(rg(x) ? static_cast<size_t>(CK * OS) : 0);
      for (int f = 0; f < F; ++f) {
        const T* gyf = gy.ptr() + static_cast<int64_t>(f) * Cout * OS;
        const auto gym = map_rm(gyf, Cout, OS, OS);
        if (rg(w) || rg(x)) {
          im2col(X.ptr() + static_cast<int64_t>(f) * Cin * H * Wd, Cin, H, Wd, kh, kw, stride,
                 pad, OH, OW, col.data());
        }
        if (rg(w)) {
          map_rm(grad_buf(w).ptr(), Cout, CK, CK).noalias() +=
              gym * map_rm(col.data(), CK, OS, OS).transpose();
        }
        if (rg(x)) {
          map_rm(dcol.data(), CK, OS, OS).noalias() =
              map_rm(W.ptr(), Cout, CK, CK).transpose() * gym;
          col2im_acc(dcol.data(), Cin, H, Wd, kh, kw, stride, pad, OH, OW,
                     grad_buf(x).ptr() + static_cast<int64_t>(f) * Cin * H * Wd);
        }
      }
      if (b != kNone && rg(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (int o = 0; o < Cout; ++o) {
          double acc = 0.0;
          for (int f = 0; f < F; ++f) {
            const T* row = gy.ptr() + (static_cast<int64_t>(f) * Cout + o) * OS;
            for (int64_t s = 0; s < OS; ++s) acc += row[s];
          }
          gb.data[o] += static_cast<T>(acc);
        }
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::time_conv(int x, int w, int b) {
  const Tensor<T>&X = val(check_id(x)), &W = val(check_id(w));
  const FCS d = fcs_of(X, "time_conv");
  check_shape(W.ndim() == 3 && W.shape[2] == 3, "time_conv: weight must be [C,C,3]");
  check_shape(W.shape[0] == d.C && W.shape[1] == d.C,
              "time_conv: weight channels do not match input " + shape_str(X.shape));
  if (b != kNone) check_shape(val(check_id(b)).numel() == d.C, "time_conv: bias size mismatch");

  Tensor<T> y(X.shape);
  for (int64_t f = 0; f < d.F; ++f) {
    for (int64_t co = 0; co < d.C; ++co) {
      T* yrow = y.ptr() + (f * d.C + co) * d.S;
      if (b != kNone) {
        const T bias = val(b).data[co];
        for (int64_t s = 0; s < d.S; ++s) yrow[s] = bias;
      }
      for (int k = 0; k < 3; ++k) {
        const int64_t fs = f + k - 1;
        if (fs < 0 || fs >= d.F) continue;
        for (int64_t ci = 0; ci < d.C; ++ci) {
          const T wv = W.data[(co * d.C + ci) * 3 + k];
          if (wv == T(0)) continue;
          axpy(d.S, wv, X.ptr() + (fs * d.C + ci) * d.S, yrow);
        }
      }
    }
  }
  const bool g = rg(x) || rg(w) || (b != kNone && rg(b));
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, w, b, out, d]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&X = val(x), &W = val(w);
      for (int64_t f = 0; f < d.F; ++f) {
        for (int64_t co = 0; co < d.C; ++co) {
          const T* grow = gy.ptr() + (f * d.C + co) * d.S;
          for (int k = 0; k < 3; ++k) {
            const int64_t fs = f + k - 1;
            if (fs < 0 || fs >= d.F) continue;
            for (int64_t ci = 0; ci < d.C; ++ci) {
              if (rg(x)) {
                const T wv = W.data[(co * d.C + ci) * 3 + k];
                if (wv != T(0))
                  axpy(d.S, wv, grow, grad_buf(x).ptr() + (fs * d.C + ci) * d.S);
              }
              if (rg(w)) {
                const T* xrow = X.ptr() + (fs * d.C + ci) * d.S;
                double acc = 0.0;
                for (int64_t s = 0; s < d.S; ++s) acc += static_cast<double>(grow[s]) * xrow[s];
                grad_buf(w).data[(co * d.C + ci) * 3 + k] += static_cast<T>(acc);
              }
            }
          }
          if (b != kNone && rg(b)) {
            double acc = 0.0;
            for (int64_t s = 0; s < d.S; ++s) acc += grow[s];
            grad_buf(b).data[co] += static_cast<T>(acc);
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::group_norm(int x, int gamma, int beta, int groups) {
  const Tensor<T>&X = val(check_id(x)), &G = val(check_id(gamma)), &Bt = val(check_id(beta));
  const FCS d = fcs_of(X, "group_norm");
  check_shape(groups >= 1 && d.C % groups == 0,
              "group_norm: groups must divide channels of " + shape_str(X.shape));
  check_shape(G.numel() == d.C && Bt.numel() == d.C, "group_norm: affine size mismatch");
  const int64_t cg = d.C / groups;
  const int64_t n = cg * d.S;
  const T eps = static_cast<T>(1e-5);

  auto stats = std::make_shared<std::vector<T>>(static_cast<size_t>(d.F * groups * 2));
  Tensor<T> y(X.shape);
  for (int64_t f = 0; f < d.F; ++f) {
    for (int64_t g0 = 0; g0 < groups; ++g0) {
      const T* src = X.ptr() + (f * d.C + g0 * cg) * d.S;
      double sum = 0.0, sq = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        sum += src[i];
        sq += static_cast<double>(src[i]) * src[i];
      }
      const double mean = sum / static_cast<double>(n);
      const double var = sq / static_cast<double>(n) - mean * mean;
      const T m = static_cast<T>(mean);
      const T inv = T(1) / std::sqrt(static_cast<T>(var) + eps);
      (*stats)[(f * groups + g0) * 2] = m;
      (*stats)[(f * groups + g0) * 2 + 1] = inv;
      T* dst = y.ptr() + (f * d.C + g0 * cg) * d.S;
      for (int64_t c = 0; c < cg; ++c) {
        const T gm = G.data[g0 * cg + c] * inv;
        const T bb = Bt.data[g0 * cg + c];
        const T* sr = src + c * d.S;
        T* dr = dst + c * d.S;
        for (int64_t s = 0; s < d.S; ++s) dr[s] = (sr[s] - m) * gm + bb;
      }
    }
  }
  const bool g = rg(x) || rg(gamma) || rg(beta);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, x, gamma, beta, out, d, groups, cg, n, stats]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&X = val(x), &G = val(gamma);
      for (int64_t f = 0; f < d.F; ++f) {
        for (int64_t g0 = 0; g0 < groups; ++g0) {
          const T m = (*stats)[(f * groups + g0) * 2];
          const T inv = (*stats)[(f * groups + g0) * 2 + 1];
          const T* src = X.ptr() + (f * d.C + g0 * cg) * d.S;
          const T* gsrc = gy.ptr() + (f * d.C + g0 * cg) * d.S;
          // Means of dxhat and dxhat*xhat over the group.
          double s1 = 0.0, s2 = 0.0;
          for (int64_t c = 0; c < cg; ++c) {
            const T gm = G.data[g0 * cg + c];
            const T* sr = src + c * d.S;
            const T* gr = gsrc + c * d.S;
            for (int64_t s = 0; s < d.S; ++s) {
              const double dxh = static_cast<double>(gr[s]) * gm;
              const double xh = static_cast<double>(sr[s] - m) * inv;
              s1 += dxh;
              s2 += dxh * xh;
            }
          }
          const T mean_dxh = static_cast<T>(s1 / static_cast<double>(n));
          const T mean_dxh_xh = static_cast<T>(s2 / static_cast<double>(n));
          for (int64_t c = 0; c < cg; ++c) {
            const T gm = G.data[g0 * cg + c];
            const T* sr = src + c * d.S;
            const T* gr = gsrc + c * d.S;
            if (rg(x)) {
              T* gx = grad_buf(x).ptr() + ((f * d.C + g0 * cg) + c) * d.S;
              for (int64_t s = 0; s < d.S; ++s) {
                const T xh = (sr[s] - m) * inv;
                gx[s] += inv * (gr[s] * gm - mean_dxh - xh * mean_dxh_xh);
              }
            }
            if (rg(gamma) || rg(beta)) {
              double gga = 0.0, gbe = 0.0;
              for (int64_t s = 0; s < d.S; ++s) {
                const T xh = (sr[s] - m) * inv;
                gga += static_cast<double>(gr[s]) * xh;
                gbe += gr[s];
              }
              if (rg(gamma)) grad_buf(gamma).data[g0 * cg + c] += static_cast<T>(gga);
              if (rg(beta)) grad_buf(beta).data[g0 * cg + c] += static_cast<T>(gbe);
            }
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention

namespace {

// Gathers [d,S] slice pointers for head h of a channel-major tensor [F,D,S].
template <typename T>
inline const T* head_slice(const T* base, int64_t f, int64_t D, int64_t S, int64_t hd) {
  return base + (f * D + hd) * S;
}

// Row-block size for streaming attention: probabilities are only ever
// materialized for this many query rows at a time. Sized so the score block
// amortizes GEMM packing while staying cache-resident.
constexpr int64_t kAttnRowBlock = 256;

}  // namespace

template <typename T>
int Tape<T>::sdp_attention(int q, int k, int v, int heads) {
  const Tensor<T>&Q = val(check_id(q)), &K = val(check_id(k)), &V = val(check_id(v));
  check_shape(Q.same_shape(K) && Q.same_shape(V),
              "sdp_attention: q/k/v shapes differ: " + shape_str(Q.shape));
  const FCS dq = fcs_of(Q, "sdp_attention");
  check_shape(heads >= 1 && dq.C % heads == 0, "sdp_attention: heads must divide channels");
  const int64_t F = dq.F, D = dq.C, S = dq.S;
  const int64_t dh = D / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  const int64_t RB = kAttnRowBlock;

  Tensor<T> y(Q.shape);
  auto run_forward = [&](const T* qp, const T* kp, const T* vp, T* yp) {
    parallel_for(F * heads, [&](int64_t i0, int64_t i1) {
      std::vector<T> sc(static_cast<size_t>(RB * S));
      for (int64_t i = i0; i < i1; ++i) {
        const int64_t f = i / heads, h = i % heads;
        const int64_t off = (f * D + h * dh) * S;
        const auto qm = map_rm(qp + off, dh, S, S);
        const auto km = map_rm(kp + off, dh, S, S);
        const auto vm = map_rm(vp + off, dh, S, S);
        auto om = map_rm(yp + off, dh, S, S);
        for (int64_t r0 = 0; r0 < S; r0 += RB) {
          const int64_t rb = std::min(RB, S - r0);
          auto scm = map_rm(sc.data(), rb, S, S);
          scm.noalias() = (qm.middleCols(r0, rb).transpose() * scl) * km;
          for (int64_t r = 0; r < rb; ++r) softmax_row(sc.data() + r * S, S, T(1));
          om.middleCols(r0, rb).noalias() = vm * scm.transpose();
        }
      }
    });
  };
  run_forward(Q.ptr(), K.ptr(), V.ptr(), y.ptr());

  const bool g = rg(q) || rg(k) || rg(v);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, q, k, v, out, F, D, S, dh, heads, scl]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&Q = val(q), &K = val(k), &V = val(v);
      // Allocate grad buffers up front; the parallel region writes disjoint
      // head slices.
      T* gq = rg(q) ? grad_buf(q).ptr() : nullptr;
      T* gk = rg(k) ? grad_buf(k).ptr() : nullptr;
      T* gv = rg(v) ? grad_buf(v).ptr() : nullptr;
      const int64_t RB = kAttnRowBlock;
      parallel_for(F * heads, [&](int64_t i0, int64_t i1) {
        std::vector<T> sc(static_cast<size_t>(RB * S));
        std::vector<T> dp(static_cast<size_t>(RB * S));
        for (int64_t i = i0; i < i1; ++i) {
          const int64_t f = i / heads, h = i % heads;
          const int64_t off = (f * D + h * dh) * S;
          const auto qm = map_rm(Q.ptr() + off, dh, S, S);
          const auto km = map_rm(K.ptr() + off, dh, S, S);
          const auto vm = map_rm(V.ptr() + off, dh, S, S);
          const auto gom = map_rm(gy.ptr() + off, dh, S, S);
          for (int64_t r0 = 0; r0 < S; r0 += RB) {
            const int64_t rb = std::min(RB, S - r0);
            // Recompute probabilities for this row block.
            auto scm = map_rm(sc.data(), rb, S, S);
            scm.noalias() = (qm.middleCols(r0, rb).transpose() * scl) * km;
            for (int64_t r = 0; r < rb; ++r) softmax_row(sc.data() + r * S, S, T(1));
            if (gv != nullptr) {
              // dV += dO[:,block] * P
              map_rm(gv + off, dh, S, S).noalias() += gom.middleCols(r0, rb) * scm;
            }
            if (gq != nullptr || gk != nullptr) {
              // dP = dO[:,block]^T * V, then back through the row softmax.
              auto dpm = map_rm(dp.data(), rb, S, S);
              dpm.noalias() = gom.middleCols(r0, rb).transpose() * vm;
              for (int64_t r = 0; r < rb; ++r) {
                softmax_row_backward(sc.data() + r * S, dp.data() + r * S, dp.data() + r * S, S,
                                     scl);
              }
              if (gk != nullptr) {
                // dK += Q[:,block] * dS
                map_rm(gk + off, dh, S, S).noalias() += qm.middleCols(r0, rb) * dpm;
              }
              if (gq != nullptr) {
                // dQ[:,block] += K * dS^T
                map_rm(gq + off, dh, S, S).middleCols(r0, rb).noalias() += km * dpm.transpose();
              }
            }
          }
        }
      });
    };
  }
  return out;
}

template <typename T>
int Tape<T>::time_sdp_attention(int q, int k, int v, int heads) {
  const Tensor<T>&Q = val(check_id(q)), &K = val(check_id(k)), &V = val(check_id(v));
  check_shape(Q.same_shape(K) && Q.same_shape(V),
              "time_sdp_attention: q/k/v shapes differ: " + shape_str(Q.shape));
  const FCS dq = fcs_of(Q, "time_sdp_attention");
  check_shape(heads >= 1 && dq.C % heads == 0, "time_sdp_attention: heads must divide channels");
  const int64_t F = dq.F, D = dq.C, S = dq.S;
  const int64_t dh = D / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> y(Q.shape);
  auto site_kernel = [F, D, S, dh, scl](const T* qp, const T* kp, const T* vp, T* yp, int64_t hd,
                                        int64_t s, T* qt, T* kt, T* vt, T* pr) {
    // Gather tokens across frames for one spatial site and one head.
    for (int64_t f = 0; f < F; ++f)
      for (int64_t c = 0; c < dh; ++c) {
        qt[f * dh + c] = qp[(f * D + hd + c) * S + s] * scl;
        kt[f * dh + c] = kp[(f * D + hd + c) * S + s];
        vt[f * dh + c] = vp[(f * D + hd + c) * S + s];
      }
    for (int64_t r = 0; r < F; ++r) {
      T* prow = pr + r * F;
      for (int64_t j = 0; j < F; ++j) {
        T acc = T(0);
        for (int64_t c = 0; c < dh; ++c) acc += qt[r * dh + c] * kt[j * dh + c];
        prow[j] = acc;
      }
      softmax_row(prow, F, T(1));
      for (int64_t c = 0; c < dh; ++c) {
        T acc = T(0);
        for (int64_t j = 0; j < F; ++j) acc += prow[j] * vt[j * dh + c];
        yp[(r * D + hd + c) * S + s] = acc;
      }
    }
  };

  parallel_for(heads * S, [&](int64_t i0, int64_t i1) {
    std::vector<T> qt(F * dh), kt(F * dh), vt(F * dh), pr(F * F);
    for (int64_t i = i0; i < i1; ++i) {
      const int64_t h = i / S, s = i % S;
      site_kernel(Q.ptr(), K.ptr(), V.ptr(), y.ptr(), h * dh, s, qt.data(), kt.data(), vt.data(),
                  pr.data());
    }
  }, /*grain=*/256);

  const bool g = rg(q) || rg(k) || rg(v);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, q, k, v, out, F, D, S, dh, heads, scl]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&Q = val(q), &K = val(k), &V = val(v);
      T* gq = rg(q) ? grad_buf(q).ptr() : nullptr;
      T* gk = rg(k) ? grad_buf(k).ptr() : nullptr;
      T* gv = rg(v) ? grad_buf(v).ptr() : nullptr;
      parallel_for(heads * S, [&](int64_t i0, int64_t i1) {
        std::vector<T> qt(F * dh), kt(F * dh), vt(F * dh), pr(F), dp(F), ds(F), go(F * dh);
        for (int64_t i = i0; i < i1; ++i) {
          const int64_t h = i / S, s = i % S;
          const int64_t hd = h * dh;
          for (int64_t f = 0; f < F; ++f)
            for (int64_t c = 0; c < dh; ++c) {
              qt[f * dh + c] = Q.ptr()[(f * D + hd + c) * S + s] * scl;
              kt[f * dh + c] = K.ptr()[(f * D + hd + c) * S + s];
              vt[f * dh + c] = V.ptr()[(f * D + hd + c) * S + s];
              go[f * dh + c] = gy.ptr()[(f * D + hd + c) * S + s];
            }
          for (int64_t r = 0; r < F; ++r) {
            for (int64_t j = 0; j < F; ++j) {
              T acc = T(0);
              for (int64_t c = 0; c < dh; ++c) acc += qt[r * dh + c] * kt[j * dh + c];
              pr[j] = acc;
            }
            softmax_row(pr.data(), F, T(1));
            for (int64_t j = 0; j < F; ++j) {
              T acc = T(0);
              for (int64_t c = 0; c < dh; ++c) acc += go[r * dh + c] * vt[j * dh + c];
              dp[j] = acc;
            }
            if (gv != nullptr) {
              for (int64_t j = 0; j < F; ++j)
                for (int64_t c = 0; c < dh; ++c)
                  gv[(j * D + hd + c) * S + s] += pr[j] * go[r * dh + c];
            }
            softmax_row_backward(pr.data(), dp.data(), ds.data(), F, scl);
            for (int64_t j = 0; j < F; ++j) {
              if (gq != nullptr)
                for (int64_t c = 0; c < dh; ++c)
                  gq[(r * D + hd + c) * S + s] += ds[j] * kt[j * dh + c];
              if (gk != nullptr)
                for (int64_t c = 0; c < dh; ++c)
                  // qt carries the 1/sqrt(d) factor; ds carries the other.
                  // Undo the double scale by using the raw q value.
                  gk[(j * D + hd + c) * S + s] += ds[j] * qt[r * dh + c] / scl;
            }
          }
        }
      }, /*grain=*/256);
    };
  }
  return out;
}

template <typename T>
int Tape<T>::xattn_probs(int q, int kf, int heads) {
  const Tensor<T>&Q = val(check_id(q)), &Kf = val(check_id(kf));
  const FCS dq = fcs_of(Q, "xattn_probs");
  const int64_t F = dq.F, D = dq.C, S = dq.S;
  check_shape(heads >= 1 && D % heads == 0, "xattn_probs: heads must divide channels");
  check_shape(Kf.numel() % D == 0,
              "xattn_probs: token tensor " + shape_str(Kf.shape) + " incompatible with channels");
  const int64_t Kt = Kf.numel() / D;
  check_shape(Kt >= 1, "xattn_probs: need at least one token");
  const int64_t dh = D / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> y({static_cast<int>(F), heads, static_cast<int>(S), static_cast<int>(Kt)});
  {
    std::vector<T> qt(static_cast<size_t>(S * dh));
    for (int64_t f = 0; f < F; ++f) {
      for (int h = 0; h < heads; ++h) {
        const T* qh = head_slice(Q.ptr(), f, D, S, h * dh);
        const T* kh = Kf.ptr() + static_cast<int64_t>(h) * dh * Kt;
        T* p = y.ptr() + ((f * heads + h) * S) * Kt;
        pack_transpose(qh, dh, S, S, qt.data(), dh);
        for (auto& qv : qt) qv *= scl;
        gemm_nn<T>(S, Kt, dh, qt.data(), dh, kh, Kt, p, Kt, false);
        for (int64_t s = 0; s < S; ++s) softmax_row(p + s * Kt, Kt, T(1));
      }
    }
  }
  const bool g = rg(q) || rg(kf);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, q, kf, out, F, D, S, dh, heads, Kt, scl]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&Q = val(q);
      const Tensor<T>& P = val(out);
      std::vector<T> ds(static_cast<size_t>(S * Kt));
      std::vector<T> dst(static_cast<size_t>(Kt * S));
      for (int64_t f = 0; f < F; ++f) {
        for (int h = 0; h < heads; ++h) {
          const T* p = P.ptr() + ((f * heads + h) * S) * Kt;
          const T* gp = gy.ptr() + ((f * heads + h) * S) * Kt;
          for (int64_t s = 0; s < S; ++s)
            softmax_row_backward(p + s * Kt, gp + s * Kt, ds.data() + s * Kt, Kt, scl);
          const T* kh = val(kf).ptr() + static_cast<int64_t>(h) * dh * Kt;
          if (rg(q)) {
            // dQ[d,S] += Kh * dS^T
            pack_transpose(ds.data(), S, Kt, Kt, dst.data(), S);
            gemm_nn<T>(dh, S, Kt, kh, Kt, dst.data(), S,
                       grad_buf(q).ptr() + (f * D + h * dh) * S, S, true);
          }
          if (rg(kf)) {
            // dK[d,Kt] += Qh * dS
            gemm_nn<T>(dh, Kt, S, head_slice(Q.ptr(), f, D, S, h * dh), S, ds.data(), Kt,
                       grad_buf(kf).ptr() + static_cast<int64_t>(h) * dh * Kt, Kt, true);
          }
        }
      }
    };
  }
  return out;
}

template <typename T>
int Tape<T>::xattn_apply(int p, int vf, std::vector<int> out_shape) {
  const Tensor<T>&P = val(check_id(p)), &Vf = val(check_id(vf));
  check_shape(P.ndim() == 4, "xattn_apply: probabilities must be [F,heads,S,K]");
  const int64_t F = P.shape[0], heads = P.shape[1], S = P.shape[2], Kt = P.shape[3];
  check_shape(Vf.numel() % Kt == 0, "xattn_apply: value tensor incompatible with token count");
  const int64_t D = Vf.numel() / Kt;
  check_shape(D % heads == 0, "xattn_apply: heads must divide value channels");
  const int64_t dh = D / heads;
  check_shape(numel_of(out_shape) == F * D * S,
              "xattn_apply: output shape " + shape_str(out_shape) + " has wrong size");

  Tensor<T> y(std::move(out_shape));
  {
    std::vector<T> pt(static_cast<size_t>(Kt * S));
    for (int64_t f = 0; f < F; ++f) {
      for (int64_t h = 0; h < heads; ++h) {
        const T* pp = P.ptr() + ((f * heads + h) * S) * Kt;
        const T* vh = Vf.ptr() + h * dh * Kt;
        pack_transpose(pp, S, Kt, Kt, pt.data(), S);
        gemm_nn<T>(dh, S, Kt, vh, Kt, pt.data(), S, y.ptr() + (f * D + h * dh) * S, S, false);
      }
    }
  }
  const bool g = rg(p) || rg(vf);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, p, vf, out, F, D, S, dh, heads, Kt]() {
      const Tensor<T>& gy = nodes_[out].grad;
      const Tensor<T>&P = val(p), &Vf = val(vf);
      std::vector<T> got(static_cast<size_t>(S * dh));
      for (int64_t f = 0; f < F; ++f) {
        for (int64_t h = 0; h < heads; ++h) {
          const T* goh = gy.ptr() + (f * D + h * dh) * S;
          if (rg(p)) {
            // dP[S,Kt] += dO^T * Vh
            pack_transpose(goh, dh, S, S, got.data(), dh);
            gemm_nn<T>(S, Kt, dh, got.data(), dh, Vf.ptr() + h * dh * Kt, Kt,
                       grad_buf(p).ptr() + ((f * heads + h) * S) * Kt, Kt, true);
          }
          if (rg(vf)) {
            // dV[d,Kt] += dO * P
            gemm_nn<T>(dh, Kt, S, goh, S, P.ptr() + ((f * heads + h) * S) * Kt, Kt,
                       grad_buf(vf).ptr() + h * dh * Kt, Kt, true);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
int Tape<T>::mse(int a, int b) {
  const Tensor<T>&A = val(check_id(a)), &B = val(check_id(b));
  check_shape(A.same_shape(B), "mse: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  const int64_t n = A.numel();
  check_shape(n > 0, "mse: empty tensors");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double dlt = static_cast<double>(A.data[i]) - static_cast<double>(B.data[i]);
    acc += dlt * dlt;
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  const bool g = rg(a) || rg(b);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, a, b, out, n]() {
      const T g0 = nodes_[out].grad.data[0];
      const Tensor<T>&A = val(a), &B = val(b);
      const T c = T(2) * g0 / static_cast<T>(n);
      if (rg(a)) {
        Tensor<T>& ga = grad_buf(a);
        for (int64_t i = 0; i < n; ++i) ga.data[i] += c * (A.data[i] - B.data[i]);
      }
      if (rg(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (int64_t i = 0; i < n; ++i) gb.data[i] -= c * (A.data[i] - B.data[i]);
      }
    };
  }
  return out;
}

namespace {

// Normalizes channel vectors at every (frame, site): n[:,s] = x[:,s]/||x[:,s]||,
// or zero when the norm falls below 1e-8. Writes norms (pre-threshold) as well.
template <typename T>
void normalize_columns(const T* x, int64_t L, int64_t D, int64_t S, T* nrm_out, T* n_out) {
  for (int64_t l = 0; l < L; ++l) {
    const T* xf = x + l * D * S;
    T* nf = n_out + l * D * S;
    T* nr = nrm_out + l * S;
    for (int64_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (int64_t c = 0; c < D; ++c) {
        const double v = xf[c * S + s];
        acc += v * v;
      }
      const T norm = static_cast<T>(std::sqrt(acc));
      nr[s] = norm;
      if (norm < static_cast<T>(1e-8)) {
        for (int64_t c = 0; c < D; ++c) nf[c * S + s] = T(0);
      } else {
        const T inv = T(1) / norm;
        for (int64_t c = 0; c < D; ++c) nf[c * S + s] = xf[c * S + s] * inv;
      }
    }
  }
}

}  // namespace

template <typename T>
int Tape<T>::motion_consistency(int fa, int fb, T tau) {
  const Tensor<T>&A = val(check_id(fa)), &B = val(check_id(fb));
  check_shape(A.same_shape(B), "motion_consistency: feature shapes differ: " +
                                   shape_str(A.shape) + " vs " + shape_str(B.shape));
  const FCS d = fcs_of(A, "motion_consistency");
  if (d.F < 2)
    throw PreconditionError("motion_consistency: needs at least two frames, got " +
                            std::to_string(d.F));
  if (!(tau > T(0))) throw PreconditionError("motion_consistency: temperature must be positive");
  const int64_t L = d.F, D = d.C, S = d.S;
  const T inv_tau = T(1) / tau;

  // Normalized features are stored for the backward pass; cost matrices are
  // recomputed row-block-wise and never live on the tape.
  auto na = std::make_shared<Tensor<T>>(std::vector<int>{static_cast<int>(L),
                                                         static_cast<int>(D), static_cast<int>(S)});
  auto nb = std::make_shared<Tensor<T>>(std::vector<int>{static_cast<int>(L),
                                                         static_cast<int>(D), static_cast<int>(S)});
  auto nrm_a = std::make_shared<std::vector<T>>(static_cast<size_t>(L * S));
  auto nrm_b = std::make_shared<std::vector<T>>(static_cast<size_t>(L * S));
  normalize_columns(A.ptr(), L, D, S, nrm_a->data(), na->ptr());
  normalize_columns(B.ptr(), L, D, S, nrm_b->data(), nb->ptr());

  const double denom = static_cast<double>(L - 1) * static_cast<double>(S) * static_cast<double>(S);
  double acc = 0.0;
  {
    std::vector<T> nat(static_cast<size_t>(S * D));
    std::vector<T> nbt(static_cast<size_t>(S * D));
    std::vector<T> ca(static_cast<size_t>(S * S));
    std::vector<T> cb(static_cast<size_t>(S * S));
    for (int64_t l = 0; l + 1 < L; ++l) {
      pack_transpose(na->ptr() + l * D * S, D, S, S, nat.data(), D);
      pack_transpose(nb->ptr() + l * D * S, D, S, S, nbt.data(), D);
      gemm_nn<T>(S, S, D, nat.data(), D, na->ptr() + (l + 1) * D * S, S, ca.data(), S, false);
      gemm_nn<T>(S, S, D, nbt.data(), D, nb->ptr() + (l + 1) * D * S, S, cb.data(), S, false);
      for (int64_t s = 0; s < S; ++s) {
        T* ra = ca.data() + s * S;
        T* rb = cb.data() + s * S;
        softmax_row(ra, S, inv_tau);
        softmax_row(rb, S, inv_tau);
        for (int64_t t = 0; t < S; ++t) {
          const double dlt = static_cast<double>(ra[t]) - static_cast<double>(rb[t]);
          acc += dlt * dlt;
        }
      }
    }
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / denom));
  const bool g = rg(fa) || rg(fb);
  int out = push(std::move(y), g);
  if (g) {
    nodes_[out].back = [this, fa, fb, out, L, D, S, inv_tau, denom, na, nb, nrm_a, nrm_b]() {
      const T g0 = nodes_[out].grad.data[0];
      const T gscale = static_cast<T>(2.0 / denom) * g0;
      // Gradients w.r.t. the normalized features, then chained through
      // normalization into the raw features.
      Tensor<T> dna(na->shape), dnb(nb->shape);
      std::vector<T> nat(static_cast<size_t>(S * D));
      std::vector<T> nbt(static_cast<size_t>(S * D));
      std::vector<T> ca(static_cast<size_t>(S * S));
      std::vector<T> cb(static_cast<size_t>(S * S));
      std::vector<T> dca(static_cast<size_t>(S * S));
      std::vector<T> dcb(static_cast<size_t>(S * S));
      std::vector<T> dct(static_cast<size_t>(S * S));
      std::vector<T> du(static_cast<size_t>(S));
      for (int64_t l = 0; l + 1 < L; ++l) {
        pack_transpose(na->ptr() + l * D * S, D, S, S, nat.data(), D);
        pack_transpose(nb->ptr() + l * D * S, D, S, S, nbt.data(), D);
        gemm_nn<T>(S, S, D, nat.data(), D, na->ptr() + (l + 1) * D * S, S, ca.data(), S, false);
        gemm_nn<T>(S, S, D, nbt.data(), D, nb->ptr() + (l + 1) * D * S, S, cb.data(), S, false);
        for (int64_t s = 0; s < S; ++s) {
          T* ra = ca.data() + s * S;
          T* rb = cb.data() + s * S;
          softmax_row(ra, S, inv_tau);
          softmax_row(rb, S, inv_tau);
          for (int64_t t = 0; t < S; ++t) du[t] = gscale * (ra[t] - rb[t]);
          softmax_row_backward(ra, du.data(), dca.data() + s * S, S, inv_tau);
          for (int64_t t = 0; t < S; ++t) du[t] = -du[t];
          softmax_row_backward(rb, du.data(), dcb.data() + s * S, S, inv_tau);
        }
        // dN_l += N_{l+1} * dC^T ; dN_{l+1} += N_l * dC
        pack_transpose(dca.data(), S, S, S, dct.data(), S);
        gemm_nn<T>(D, S, S, na->ptr() + (l + 1) * D * S, S, dct.data(), S, dna.ptr() + l * D * S,
                   S, true);
        gemm_nn<T>(D, S, S, na->ptr() + l * D * S, S, dca.data(), S,
                   dna.ptr() + (l + 1) * D * S, S, true);
        pack_transpose(dcb.data(), S, S, S, dct.data(), S);
        gemm_nn<T>(D, S, S, nb->ptr() + (l + 1) * D * S, S, dct.data(), S, dnb.ptr() + l * D * S,
                   S, true);
        gemm_nn<T>(D, S, S, nb->ptr() + l * D * S, S, dcb.data(), S,
                   dnb.ptr() + (l + 1) * D * S, S, true);
      }
      auto chain_normalize = [&](int node, const Tensor<T>& nrm_feats,
                                 const std::vector<T>& norms, const Tensor<T>& dn) {
        if (!rg(node)) return;
        Tensor<T>& gx = grad_buf(node);
        for (int64_t l = 0; l < L; ++l) {
          for (int64_t s = 0; s < S; ++s) {
            const T norm = norms[l * S + s];
            if (norm < static_cast<T>(1e-8)) continue;
            const T* nv = nrm_feats.ptr() + l * D * S;
            const T* dv = dn.ptr() + l * D * S;
            double dot = 0.0;
            for (int64_t c = 0; c < D; ++c)
              dot += static_cast<double>(nv[c * S + s]) * dv[c * S + s];
            const T dt = static_cast<T>(dot);
            const T inv = T(1) / norm;
            T* gxl = gx.ptr() + l * D * S;
            for (int64_t c = 0; c < D; ++c)
              gxl[c * S + s] += (dv[c * S + s] - nv[c * S + s] * dt) * inv;
          }
        }
      };
      chain_normalize(fa, *na, *nrm_a, dna);
      chain_normalize(fb, *nb, *nrm_b, dnb);
    };
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace idol
