#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "idol/consistency.hpp"
#include "idol/rng.hpp"
#include "idol/tape.hpp"

using idol::Rng;
using idol::Tape;
using idol::Tensor;
using TensorD = idol::TensorD;

namespace {

TensorD randn(Rng& r, std::vector<int> shape, double scale = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = r.normal() * scale;
  return t;
}

// Central-difference check of d(loss)/d(input) for every entry of every
// input. The builder must construct the same graph on any tape it is given.
using Builder = std::function<int(Tape<double>&, const std::vector<int>&)>;

void check_grads(const std::vector<TensorD>& inputs, const Builder& build, double tol = 1e-6) {
  Tape<double> tape;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const auto& t : inputs) ids.push_back(tape.input(t, true));
  const int loss = build(tape, ids);
  REQUIRE(tape.value(loss).numel() == 1);
  tape.backward(loss);

  const double h = 1e-6;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      auto eval = [&](double delta) {
        std::vector<TensorD> pert = inputs;
        pert[i].data[static_cast<size_t>(j)] += delta;
        Tape<double> tp;
        std::vector<int> pid;
        pid.reserve(pert.size());
        for (auto& t : pert) pid.push_back(tp.input(std::move(t), true));
        return tp.value(build(tp, pid)).data[0];
      };
      const double num = (eval(h) - eval(-h)) / (2.0 * h);
      const double ana = tape.grad(ids[i]).data[static_cast<size_t>(j)];
      const double err =
          std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1.0});
      if (err > tol) {
        CAPTURE(i);
        CAPTURE(j);
        CAPTURE(num);
        CAPTURE(ana);
      }
      CHECK(err <= tol);
    }
  }
}

// Reduces any node to a scalar by MSE against a fixed pseudorandom target, so
// gradient signal reaches every output element.
int to_scalar(Tape<double>& t, int node) {
  const auto& v = t.value(node);
  Rng r(998877);
  TensorD target(v.shape);
  for (auto& x : target.data) x = r.normal();
  return t.mse(node, t.constant(std::move(target)));
}

}  // namespace

TEST_CASE("elementwise and structural op gradients") {
  Rng r(11);

  SUBCASE("add_scaled / scale / silu") {
    std::vector<TensorD> in = {randn(r, {2, 3, 4}), randn(r, {2, 3, 4})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int a = t.add_scaled(id[0], id[1], 0.7);
      int b = t.silu(t.scale(a, -1.3));
      return to_scalar(t, b);
    });
  }

  SUBCASE("add_frame_bias and add_channel_vec") {
    std::vector<TensorD> in = {randn(r, {3, 2, 2, 2}), randn(r, {2, 2, 2}), randn(r, {2})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int x = t.add_frame_bias(id[0], id[1]);
      x = t.add_channel_vec(x, id[2]);
      return to_scalar(t, x);
    });
  }

  SUBCASE("select_row and reshape") {
    std::vector<TensorD> in = {randn(r, {2, 5})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int row = t.select_row(id[0], 1);
      int rs = t.reshape(row, {5, 1});
      return to_scalar(t, rs);
    });
  }

  SUBCASE("concat and slice") {
    std::vector<TensorD> in = {randn(r, {2, 3, 4}), randn(r, {2, 2, 4}), randn(r, {2, 3, 5})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int cc = t.concat_channels(id[0], id[1]);  // [2,5,4]
      int cs = t.concat_spatial(id[0], id[2]);   // [2,3,9]
      int sl = t.slice_spatial(cs, 2, 6, {2, 3, 4});
      int sum = t.add(t.slice_spatial(cc, 0, 4, {2, 5, 4}), t.constant(TensorD({2, 5, 4})));
      return t.add(to_scalar(t, sum), to_scalar(t, sl));
    });
  }

  SUBCASE("upsample2x and avgpool_to") {
    std::vector<TensorD> in = {randn(r, {1, 2, 3, 3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int up = t.upsample2x(id[0]);          // [1,2,6,6]
      int pool = t.avgpool_to(up, 2, 2);     // [1,2,2,2]
      return to_scalar(t, pool);
    });
  }
}

TEST_CASE("linear algebra op gradients") {
  Rng r(22);

  SUBCASE("channel_linear with bias") {
    std::vector<TensorD> in = {randn(r, {2, 3, 4}), randn(r, {5, 3}), randn(r, {5})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.channel_linear(id[0], id[1], id[2]));
    });
  }

  SUBCASE("channel_linear on a vector") {
    std::vector<TensorD> in = {randn(r, {4}), randn(r, {3, 4}), randn(r, {3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.channel_linear(id[0], id[1], id[2]));
    });
  }

  SUBCASE("conv2d 3x3 stride 1") {
    std::vector<TensorD> in = {randn(r, {2, 3, 5, 5}), randn(r, {4, 3, 3, 3}), randn(r, {4})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.conv2d(id[0], id[1], id[2], 1, 1));
    });
  }

  SUBCASE("conv2d 3x3 stride 2") {
    std::vector<TensorD> in = {randn(r, {1, 2, 6, 6}), randn(r, {3, 2, 3, 3}), randn(r, {3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.conv2d(id[0], id[1], id[2], 2, 1));
    });
  }

  SUBCASE("conv2d 1x1 no bias") {
    std::vector<TensorD> in = {randn(r, {2, 3, 4, 4}), randn(r, {5, 3, 1, 1})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.conv2d(id[0], id[1], Tape<double>::kNone, 1, 0));
    });
  }

  SUBCASE("time_conv") {
    std::vector<TensorD> in = {randn(r, {4, 3, 2, 2}), randn(r, {3, 3, 3}), randn(r, {3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.time_conv(id[0], id[1], id[2]));
    });
  }

  SUBCASE("group_norm") {
    std::vector<TensorD> in = {randn(r, {2, 4, 3, 3}), randn(r, {4}, 0.5), randn(r, {4})};
    // Shift gamma away from zero so the map is nondegenerate.
    for (auto& g : in[1].data) g += 1.0;
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.group_norm(id[0], id[1], id[2], 2));
    });
  }
}

namespace {

// Straightforward attention reference, channel-major [F,D,S].
TensorD naive_attention(const TensorD& q, const TensorD& k, const TensorD& v, int heads) {
  const int F = q.shape[0], D = q.shape[1];
  int64_t S = 1;
  for (int i = 2; i < q.ndim(); ++i) S *= q.shape[i];
  const int d = D / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(d));
  TensorD out(q.shape);
  for (int f = 0; f < F; ++f) {
    for (int h = 0; h < heads; ++h) {
      const double* qp = q.ptr() + (static_cast<int64_t>(f) * D + h * d) * S;
      const double* kp = k.ptr() + (static_cast<int64_t>(f) * D + h * d) * S;
      const double* vp = v.ptr() + (static_cast<int64_t>(f) * D + h * d) * S;
      double* op = out.ptr() + (static_cast<int64_t>(f) * D + h * d) * S;
      std::vector<double> row(static_cast<size_t>(S));
      for (int64_t s = 0; s < S; ++s) {
        double mx = -1e300;
        for (int64_t j = 0; j < S; ++j) {
          double acc = 0.0;
          for (int c = 0; c < d; ++c) acc += qp[c * S + s] * kp[c * S + j];
          row[static_cast<size_t>(j)] = acc * scl;
          mx = std::max(mx, row[static_cast<size_t>(j)]);
        }
        double sum = 0.0;
        for (int64_t j = 0; j < S; ++j) {
          row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
          sum += row[static_cast<size_t>(j)];
        }
        for (int c = 0; c < d; ++c) {
          double acc = 0.0;
          for (int64_t j = 0; j < S; ++j) acc += row[static_cast<size_t>(j)] * vp[c * S + j];
          op[c * S + s] = acc / sum;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("fused attention matches the naive reference") {
  Rng r(33);
  // S = 144 exceeds the streaming row-block size, so block boundaries are hit.
  const TensorD q = randn(r, {2, 4, 12, 12});
  const TensorD k = randn(r, {2, 4, 12, 12});
  const TensorD v = randn(r, {2, 4, 12, 12});
  for (int heads : {1, 2, 4}) {
    Tape<double> t;
    const int out = t.sdp_attention(t.constant(q), t.constant(k), t.constant(v), heads);
    const TensorD ref = naive_attention(q, k, v, heads);
    double worst = 0.0;
    for (int64_t i = 0; i < ref.numel(); ++i)
      worst = std::max(worst, std::abs(ref.data[i] - t.value(out).data[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("attention op gradients") {
  Rng r(44);

  SUBCASE("sdp_attention single block") {
    std::vector<TensorD> in = {randn(r, {1, 4, 2, 3}), randn(r, {1, 4, 2, 3}),
                               randn(r, {1, 4, 2, 3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.sdp_attention(id[0], id[1], id[2], 2));
    });
  }

  SUBCASE("sdp_attention across row blocks") {
    std::vector<TensorD> in = {randn(r, {1, 2, 12, 12}), randn(r, {1, 2, 12, 12}),
                               randn(r, {1, 2, 12, 12})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.sdp_attention(id[0], id[1], id[2], 1));
    }, 1e-5);
  }

  SUBCASE("time_sdp_attention") {
    std::vector<TensorD> in = {randn(r, {3, 4, 2, 2}), randn(r, {3, 4, 2, 2}),
                               randn(r, {3, 4, 2, 2})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return to_scalar(t, t.time_sdp_attention(id[0], id[1], id[2], 2));
    });
  }

  SUBCASE("cross-attention probs and apply") {
    std::vector<TensorD> in = {randn(r, {2, 4, 3, 3}), randn(r, {4, 3}), randn(r, {4, 3})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      int p = t.xattn_probs(id[0], id[1], 2);
      int o = t.xattn_apply(p, id[2], {2, 4, 3, 3});
      // Route gradient through both the probabilities and the output.
      return t.add(to_scalar(t, o), t.scale(to_scalar(t, p), 0.3));
    });
  }
}

TEST_CASE("cross-attention probabilities are row-stochastic") {
  Rng r(55);
  Tape<double> t;
  const int p = t.xattn_probs(t.constant(randn(r, {2, 6, 4, 4})), t.constant(randn(r, {6, 5})), 3);
  const auto& P = t.value(p);
  REQUIRE(P.shape == std::vector<int>({2, 3, 16, 5}));
  for (int64_t row = 0; row < P.numel() / 5; ++row) {
    double sum = 0.0;
    for (int j = 0; j < 5; ++j) {
      const double v = P.data[row * 5 + j];
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("loss op gradients") {
  Rng r(66);

  SUBCASE("mse") {
    std::vector<TensorD> in = {randn(r, {3, 4}), randn(r, {3, 4})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return t.mse(id[0], id[1]);
    });
  }

  SUBCASE("motion_consistency") {
    std::vector<TensorD> in = {randn(r, {3, 3, 3, 2}), randn(r, {3, 3, 3, 2})};
    check_grads(in, [](Tape<double>& t, const std::vector<int>& id) {
      return t.motion_consistency(id[0], id[1], 0.5);
    }, 1e-5);
  }
}

TEST_CASE("fused motion consistency matches the reference implementation") {
  Rng r(77);
  const TensorD a = randn(r, {4, 5, 3, 3});
  const TensorD b = randn(r, {4, 5, 3, 3});
  const double ref = idol::motion_consistency_loss(a, b, 0.7);
  Tape<double> t;
  const int loss = t.motion_consistency(t.constant(a), t.constant(b), 0.7);
  CHECK(std::abs(t.value(loss).data[0] - ref) < 1e-12);
}

TEST_CASE("motion consistency rejects single-frame stacks") {
  Tape<double> t;
  const int a = t.constant(TensorD({1, 2, 2, 2}));
  const int b = t.constant(TensorD({1, 2, 2, 2}));
  CHECK_THROWS_AS(t.motion_consistency(a, b, 1.0), idol::PreconditionError);
}

TEST_CASE("shape mismatches are rejected") {
  Tape<double> t;
  const int a = t.constant(TensorD({2, 3}));
  const int b = t.constant(TensorD({3, 2}));
  CHECK_THROWS_AS(t.add(a, b), idol::ShapeError);
  CHECK_THROWS_AS(t.mse(a, b), idol::ShapeError);
  CHECK_THROWS_AS(t.channel_linear(a, t.constant(TensorD({4, 5})), Tape<double>::kNone),
                  idol::ShapeError);
}
