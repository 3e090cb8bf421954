#include "idol/consistency.hpp"

#include <cmath>
#include <string>

namespace idol {

namespace {

template <typename T>
void split_ld(const Tensor<T>& f, int64_t& L, int64_t& D, int64_t& S, const char* op) {
  if (f.ndim() == 4) {
    L = f.shape[0];
    D = f.shape[1];
    S = static_cast<int64_t>(f.shape[2]) * f.shape[3];
  } else if (f.ndim() == 3) {
    L = 1;
    D = f.shape[0];
    S = static_cast<int64_t>(f.shape[1]) * f.shape[2];
  } else {
    throw ShapeError(std::string(op) + ": expected [L,D,H,W] or [D,H,W], got " +
                     shape_str(f.shape));
  }
  if (L < 1 || D < 1 || S < 1) throw ShapeError(std::string(op) + ": empty feature map");
}

}  // namespace

template <typename T>
Tensor<T> normalize_features(const Tensor<T>& f) {
  int64_t L, D, S;
  split_ld(f, L, D, S, "normalize_features");
  Tensor<T> out(f.shape);
  for (int64_t l = 0; l < L; ++l) {
    const T* src = f.ptr() + l * D * S;
    T* dst = out.ptr() + l * D * S;
    for (int64_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (int64_t c = 0; c < D; ++c) {
        const double v = src[c * S + s];
        acc += v * v;
      }
      const double norm = std::sqrt(acc);
      if (norm < 1e-8) {
        for (int64_t c = 0; c < D; ++c) dst[c * S + s] = T(0);
      } else {
        const T inv = static_cast<T>(1.0 / norm);
        for (int64_t c = 0; c < D; ++c) dst[c * S + s] = src[c * S + s] * inv;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> cost_volume(const Tensor<T>& fa, const Tensor<T>& fb) {
  check_shape(fa.ndim() == 3 && fb.ndim() == 3,
              "cost_volume: expected [D,H,W] inputs, got " + shape_str(fa.shape) + " / " +
                  shape_str(fb.shape));
  check_shape(fa.same_shape(fb), "cost_volume: feature shapes differ");
  const int64_t D = fa.shape[0], H = fa.shape[1], W = fa.shape[2];
  const int64_t S = H * W;
  Tensor<T> out({static_cast<int>(H), static_cast<int>(W), static_cast<int>(H), static_cast<int>(W)});
  for (int64_t s = 0; s < S; ++s) {
    T* row = out.ptr() + s * S;
    for (int64_t t = 0; t < S; ++t) {
      double acc = 0.0;
      for (int64_t c = 0; c < D; ++c)
        acc += static_cast<double>(fa.ptr()[c * S + s]) * fb.ptr()[c * S + t];
      row[t] = static_cast<T>(acc);
    }
  }
  return out;
}

template <typename T>
Tensor<T> motion_field(const Tensor<T>& cost, T tau) {
  check_shape(cost.ndim() == 4, "motion_field: expected [H,W,H,W], got " + shape_str(cost.shape));
  check_shape(cost.shape[0] == cost.shape[2] && cost.shape[1] == cost.shape[3],
              "motion_field: cost volume must pair identical grids");
  if (!(tau > T(0))) throw PreconditionError("motion_field: temperature must be positive");
  const int64_t S = static_cast<int64_t>(cost.shape[0]) * cost.shape[1];
  Tensor<T> out(cost.shape);
  for (int64_t s = 0; s < S; ++s) {
    const T* src = cost.ptr() + s * S;
    T* dst = out.ptr() + s * S;
    // Max-subtracted softmax over all target locations.
    double mx = static_cast<double>(src[0]) / static_cast<double>(tau);
    for (int64_t t = 1; t < S; ++t)
      mx = std::max(mx, static_cast<double>(src[t]) / static_cast<double>(tau));
    double sum = 0.0;
    for (int64_t t = 0; t < S; ++t) {
      const double e = std::exp(static_cast<double>(src[t]) / static_cast<double>(tau) - mx);
      dst[t] = static_cast<T>(e);
      sum += e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int64_t t = 0; t < S; ++t) dst[t] *= inv;
  }
  return out;
}

template <typename T>
double motion_consistency_loss(const Tensor<T>& fa, const Tensor<T>& fb, T tau) {
  check_shape(fa.same_shape(fb), "motion_consistency_loss: feature shapes differ");
  check_shape(fa.ndim() == 4, "motion_consistency_loss: expected [L,D,H,W]");
  const int L = fa.shape[0];
  if (L < 2)
    throw PreconditionError("motion_consistency_loss: needs at least two frames, got " +
                            std::to_string(L));
  const Tensor<T> na = normalize_features(fa);
  const Tensor<T> nb = normalize_features(fb);
  const std::vector<int> frame_shape = {fa.shape[1], fa.shape[2], fa.shape[3]};
  const int64_t per = numel_of(frame_shape);
  double acc = 0.0;
  int64_t count = 0;
  for (int l = 0; l + 1 < L; ++l) {
    Tensor<T> a0(frame_shape), a1(frame_shape), b0(frame_shape), b1(frame_shape);
    std::copy_n(na.ptr() + l * per, per, a0.ptr());
    std::copy_n(na.ptr() + (l + 1) * per, per, a1.ptr());
    std::copy_n(nb.ptr() + l * per, per, b0.ptr());
    std::copy_n(nb.ptr() + (l + 1) * per, per, b1.ptr());
    const Tensor<T> ua = motion_field(cost_volume(a0, a1), tau);
    const Tensor<T> ub = motion_field(cost_volume(b0, b1), tau);
    for (int64_t i = 0; i < ua.numel(); ++i) {
      const double d = static_cast<double>(ua.data[i]) - static_cast<double>(ub.data[i]);
      acc += d * d;
    }
    count += ua.numel();
  }
  return acc / static_cast<double>(count);
}

template <typename T>
double attention_consistency_loss(const Tensor<T>& ma, const Tensor<T>& mb) {
  check_shape(ma.same_shape(mb), "attention_consistency_loss: map shapes differ");
  check_shape(ma.numel() > 0, "attention_consistency_loss: empty maps");
  double acc = 0.0;
  for (int64_t i = 0; i < ma.numel(); ++i) {
    const double d = static_cast<double>(ma.data[i]) - static_cast<double>(mb.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(ma.numel());
}

XattnShareMode parse_share_mode(const std::string& s) {
  if (s == "independent") return XattnShareMode::Independent;
  if (s == "share_avg") return XattnShareMode::ShareAvg;
  if (s == "share_video") return XattnShareMode::ShareVideo;
  throw PreconditionError("unknown cross-attention share mode: " + s);
}

std::string share_mode_name(XattnShareMode m) {
  switch (m) {
    case XattnShareMode::Independent: return "independent";
    case XattnShareMode::ShareAvg: return "share_avg";
    case XattnShareMode::ShareVideo: return "share_video";
  }
  return "independent";
}

template <typename T>
double denoise_loss(const Tensor<T>& eps_v_hat, const Tensor<T>& eps_v,
                    const Tensor<T>& eps_d_hat, const Tensor<T>& eps_d) {
  check_shape(eps_v_hat.same_shape(eps_v), "denoise_loss: video shapes differ");
  check_shape(eps_d_hat.same_shape(eps_d), "denoise_loss: depth shapes differ");
  check_shape(eps_v.numel() > 0 && eps_d.numel() > 0, "denoise_loss: empty tensors");
  auto msq = [](const Tensor<T>& a, const Tensor<T>& b) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
      acc += d * d;
    }
    return acc / static_cast<double>(a.numel());
  };
  return msq(eps_v_hat, eps_v) + msq(eps_d_hat, eps_d);
}

double total_loss(double denoise, const std::vector<double>& motion_terms,
                  const std::vector<double>& xattn_terms, const LossWeights& w) {
  if (motion_terms.size() != xattn_terms.size())
    throw PreconditionError("total_loss: per-block term counts differ (" +
                            std::to_string(motion_terms.size()) + " vs " +
                            std::to_string(xattn_terms.size()) + ")");
  double total = denoise;
  for (size_t n = 0; n < motion_terms.size(); ++n)
    total += w.motion * motion_terms[n] + w.xattn * xattn_terms[n];
  return total;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> shared_xattn_variant(const Tensor<T>& mv,
                                                     const Tensor<T>& md,
                                                     XattnShareMode mode) {
  check_shape(mv.same_shape(md), "shared_xattn_variant: map shapes differ");
  switch (mode) {
    case XattnShareMode::Independent:
      return {mv, md};
    case XattnShareMode::ShareAvg: {
      Tensor<T> avg(mv.shape);
      for (int64_t i = 0; i < mv.numel(); ++i)
        avg.data[i] = static_cast<T>(0.5 * (static_cast<double>(mv.data[i]) +
                                            static_cast<double>(md.data[i])));
      return {avg, avg};
    }
    case XattnShareMode::ShareVideo:
      return {mv, mv};
  }
  return {mv, md};
}

template Tensor<float> normalize_features(const Tensor<float>&);
template Tensor<double> normalize_features(const Tensor<double>&);
template Tensor<float> cost_volume(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> cost_volume(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> motion_field(const Tensor<float>&, float);
template Tensor<double> motion_field(const Tensor<double>&, double);
template double motion_consistency_loss(const Tensor<float>&, const Tensor<float>&, float);
template double motion_consistency_loss(const Tensor<double>&, const Tensor<double>&, double);
template double attention_consistency_loss(const Tensor<float>&, const Tensor<float>&);
template double attention_consistency_loss(const Tensor<double>&, const Tensor<double>&);
template double denoise_loss(const Tensor<float>&, const Tensor<float>&,
                             const Tensor<float>&, const Tensor<float>&);
template double denoise_loss(const Tensor<double>&, const Tensor<double>&,
                             const Tensor<double>&, const Tensor<double>&);
template std::pair<Tensor<float>, Tensor<float>> shared_xattn_variant(
    const Tensor<float>&, const Tensor<float>&, XattnShareMode);
template std::pair<Tensor<double>, Tensor<double>> shared_xattn_variant(
    const Tensor<double>&, const Tensor<double>&, XattnShareMode);

}  // namespace idol
