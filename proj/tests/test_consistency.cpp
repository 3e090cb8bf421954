#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "idol/consistency.hpp"
#include "idol/rng.hpp"

using namespace idol;

namespace {

TensorD randn_tensor(Rng& rng, std::vector<int> shape) {
  TensorD t(std::move(shape));
  for (auto& v : t.data) v = rng.normal();
  return t;
}

// Deliberately naive reference: four nested spatial loops, direct softmax.
TensorD brute_cost(const TensorD& fa, const TensorD& fb) {
  const int d = fa.shape[0], h = fa.shape[1], w = fa.shape[2];
  TensorD out({h, w, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l) {
          double acc = 0.0;
          for (int c = 0; c < d; ++c) acc += fa.at(c, i, j) * fb.at(c, k, l);
          out.at(i, j, k, l) = acc;
        }
  return out;
}

TensorD brute_field(const TensorD& cost, double tau) {
  const int h = cost.shape[0], w = cost.shape[1];
  TensorD out(cost.shape);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double mx = -1e300;
      for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l) mx = std::max(mx, cost.at(i, j, k, l) / tau);
      double z = 0.0;
      for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l) z += std::exp(cost.at(i, j, k, l) / tau - mx);
      for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l)
          out.at(i, j, k, l) = std::exp(cost.at(i, j, k, l) / tau - mx) / z;
    }
  return out;
}

}  // namespace

TEST_CASE("normalization scales each location to unit length") {
  TensorD f({2, 1, 2});  // D=2, H=1, W=2
  f.at(0, 0, 0) = 3.0;
  f.at(1, 0, 0) = 4.0;
  f.at(0, 0, 1) = 0.6;
  f.at(1, 0, 1) = 0.8;  // already unit
  const TensorD n = normalize_features(f);
  CHECK(n.at(0, 0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n.at(1, 0, 0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(n.at(0, 0, 1) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n.at(1, 0, 1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("normalization maps zero vectors to zero without NaN") {
  TensorD f({3, 2, 2});
  f.at(0, 1, 1) = 5.0;
  const TensorD n = normalize_features(f);
  for (int c = 0; c < 3; ++c) {
    CHECK(n.at(c, 0, 0) == 0.0);
    CHECK(std::isfinite(n.at(c, 0, 0)));
  }
  CHECK(n.at(0, 1, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalization applies per frame on 4-D stacks") {
  Rng rng(42);
  const TensorD f = randn_tensor(rng, {3, 4, 2, 5});
  const TensorD n = normalize_features(f);
  for (int l = 0; l < 3; ++l)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int c = 0; c < 4; ++c) acc += n.at(l, c, i, j) * n.at(l, c, i, j);
        CHECK(std::sqrt(acc) == doctest::Approx(1.0).epsilon(1e-10));
      }
}

TEST_CASE("cost volume reproduces the two-location hand example") {
  // Sources: (1,0) and (0,1); targets: (1,0) twice.
  TensorD fl({2, 1, 2}), fl1({2, 1, 2});
  fl.at(0, 0, 0) = 1.0;
  fl.at(1, 0, 1) = 1.0;
  fl1.at(0, 0, 0) = 1.0;
  fl1.at(0, 0, 1) = 1.0;
  const TensorD c = cost_volume(fl, fl1);
  check_shape(c.shape, {1, 2, 1, 2}, "cost shape");
  CHECK(c.data[0] == 1.0);
  CHECK(c.data[1] == 1.0);
  CHECK(c.data[2] == 0.0);
  CHECK(c.data[3] == 0.0);
}

TEST_CASE("cost volume of identical vectors is all ones") {
  TensorD f({3, 2, 2});
  for (int i = 0; i < 4; ++i) {
    f.data[0 * 4 + i] = 1.0 / std::sqrt(3.0);
    f.data[1 * 4 + i] = 1.0 / std::sqrt(3.0);
    f.data[2 * 4 + i] = 1.0 / std::sqrt(3.0);
  }
  const TensorD c = cost_volume(f, f);
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(c.data[i] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("orthonormal distinct vectors give an identity cost pattern") {
  TensorD f({4, 2, 2});
  for (int s = 0; s < 4; ++s) f.data[s * 4 + s] = 1.0;  // channel s hot at location s
  const TensorD c = cost_volume(f, f);
  for (int s = 0; s < 4; ++s)
    for (int t = 0; t < 4; ++t)
      CHECK(c.data[s * 4 + t] == (s == t ? 1.0 : 0.0));
}

TEST_CASE("motion field softmax matches hand values") {
  TensorD c({1, 2, 1, 2});
  c.data[0] = std::log(2.0);
  c.data[1] = 0.0;
  c.data[2] = std::log(2.0);
  c.data[3] = 0.0;
  const TensorD u = motion_field(c, 1.0);
  CHECK(u.data[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(u.data[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("constant cost volume gives the uniform field") {
  const TensorD c = TensorD::full({2, 3, 2, 3}, 0.7);
  const TensorD u = motion_field(c, 0.5);
  for (int64_t i = 0; i < u.numel(); ++i)
    CHECK(u.data[i] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("low temperature saturates to one-hot") {
  Rng rng(7);
  TensorD c({2, 2, 2, 2});
  for (auto& v : c.data) v = rng.uniform(0.0, 0.3);
  // Give every source row a unique max with gap >= 0.5.
  for (int s = 0; s < 4; ++s) c.data[s * 4 + (s * 3) % 4] = 1.0;
  const TensorD u = motion_field(c, 1e-3);
  for (int s = 0; s < 4; ++s)
    for (int t = 0; t < 4; ++t) {
      const double expect = (t == (s * 3) % 4) ? 1.0 : 0.0;
      CHECK(std::abs(u.data[s * 4 + t] - expect) <= 1e-6);
    }
}

TEST_CASE("motion field rejects non-positive temperature") {
  const TensorD c({1, 2, 1, 2});
  CHECK_THROWS_AS(motion_field(c, 0.0), PreconditionError);
  CHECK_THROWS_AS(motion_field(c, -1.0), PreconditionError);
}

TEST_CASE("fast cost/field implementations match the brute-force loops") {
  Rng rng(20240812);
  for (int rep = 0; rep < 30; ++rep) {
    const int h = 1 + static_cast<int>(rng.uniform_below(3));
    const int w = 1 + static_cast<int>(rng.uniform_below(3));
    const int d = 1 + static_cast<int>(rng.uniform_below(4));
    const TensorD fa = normalize_features(randn_tensor(rng, {d, h, w}));
    const TensorD fb = normalize_features(randn_tensor(rng, {d, h, w}));
    const TensorD c = cost_volume(fa, fb);
    const TensorD cb = brute_cost(fa, fb);
    for (int64_t i = 0; i < c.numel(); ++i) CHECK(std::abs(c.data[i] - cb.data[i]) <= 1e-10);
    const double tau = rng.uniform(0.2, 2.0);
    const TensorD u = motion_field(c, tau);
    const TensorD ub = brute_field(cb, tau);
    for (int64_t i = 0; i < u.numel(); ++i) CHECK(std::abs(u.data[i] - ub.data[i]) <= 1e-10);
  }
}

TEST_CASE("motion field rows always sum to one") {
  Rng rng(5150);
  for (int rep = 0; rep < 50; ++rep) {
    const int h = 1 + static_cast<int>(rng.uniform_below(3));
    const int w = 1 + static_cast<int>(rng.uniform_below(3));
    TensorD c({h, w, h, w});
    for (auto& v : c.data) v = rng.uniform(-5.0, 5.0);
    const TensorD u = motion_field(c, rng.uniform(0.05, 3.0));
    const int s = h * w;
    for (int i = 0; i < s; ++i) {
      double sum = 0.0;
      for (int t = 0; t < s; ++t) sum += u.data[static_cast<int64_t>(i) * s + t];
      CHECK(std::abs(sum - 1.0) <= 1e-5);
    }
  }
}

TEST_CASE("motion consistency of a stream with itself is zero") {
  Rng rng(99);
  const TensorD f = randn_tensor(rng, {4, 3, 2, 2});
  CHECK(motion_consistency_loss(f, f, 0.5) == 0.0);
}

TEST_CASE("motion consistency reproduces the quarter hand value") {
  // Video: identical unit vectors everywhere -> uniform rows [0.5, 0.5].
  // Depth: sources aligned with target 0 only -> saturated rows [1, 0] at
  // tau = 1e-3. Mean squared gap is exactly 0.25.
  TensorD fv({2, 2, 1, 2}), fd({2, 2, 1, 2});
  for (int l = 0; l < 2; ++l)
    for (int j = 0; j < 2; ++j) fv.at(l, 0, 0 * 2 + j) = 1.0;  // all (1,0)
  // Depth frame 0: both sources (1,0); frame 1: targets (1,0) and (0,1).
  fd.at(0, 0, 0) = 1.0;
  fd.at(0, 0, 1) = 1.0;
  fd.at(1, 0, 0) = 1.0;
  fd.at(1, 1, 1) = 1.0;
  const double loss = motion_consistency_loss(fv, fd, 1e-3);
  CHECK(loss == 0.25);
}

TEST_CASE("motion consistency is symmetric and non-negative") {
  Rng rng(123);
  const TensorD fa = randn_tensor(rng, {3, 4, 2, 2});
  const TensorD fb = randn_tensor(rng, {3, 4, 2, 2});
  const double ab = motion_consistency_loss(fa, fb, 0.7);
  const double ba = motion_consistency_loss(fb, fa, 0.7);
  CHECK(ab >= 0.0);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
}

TEST_CASE("motion consistency is invariant to a shared spatial permutation") {
  Rng rng(321);
  const TensorD fa = randn_tensor(rng, {3, 3, 2, 2});
  const TensorD fb = randn_tensor(rng, {3, 3, 2, 2});
  const std::vector<int> perm = {2, 0, 3, 1};
  auto permute = [&](const TensorD& f) {
    TensorD out(f.shape);
    for (int l = 0; l < 3; ++l)
      for (int c = 0; c < 3; ++c)
        for (int s = 0; s < 4; ++s)
          out.data[(static_cast<int64_t>(l) * 3 + c) * 4 + perm[s]] =
              f.data[(static_cast<int64_t>(l) * 3 + c) * 4 + s];
    return out;
  };
  const double base = motion_consistency_loss(fa, fb, 0.9);
  const double moved = motion_consistency_loss(permute(fa), permute(fb), 0.9);
  CHECK(base == doctest::Approx(moved).epsilon(1e-12));
}

TEST_CASE("motion consistency needs at least two frames") {
  const TensorD f({1, 3, 2, 2});
  CHECK_THROWS_AS(motion_consistency_loss(f, f, 0.5), PreconditionError);
}

TEST_CASE("attention consistency identities and hand value") {
  TensorD mv({1, 2}), md({1, 2});
  mv.data = {1.0, 0.0};
  md.data = {0.0, 1.0};
  CHECK(attention_consistency_loss(mv, mv) == 0.0);
  CHECK(attention_consistency_loss(mv, md) == 1.0);  // (1 + 1) / 2

  // Applying the same row permutation to both maps leaves the loss unchanged.
  TensorD a({2, 2}), b({2, 2});
  a.data = {0.2, 0.8, 0.5, 0.5};
  b.data = {0.9, 0.1, 0.3, 0.7};
  TensorD ap({2, 2}), bp({2, 2});
  ap.data = {0.5, 0.5, 0.2, 0.8};
  bp.data = {0.3, 0.7, 0.9, 0.1};
  CHECK(attention_consistency_loss(a, b) ==
        doctest::Approx(attention_consistency_loss(ap, bp)).epsilon(1e-15));
}

TEST_CASE("denoise loss sums both streams' mean squared errors") {
  Rng rng(888);
  const TensorD ev = randn_tensor(rng, {2, 3});
  const TensorD ed = randn_tensor(rng, {2, 3});
  CHECK(denoise_loss(ev, ev, ed, ed) == 0.0);

  TensorD ev1 = ev, ed1 = ed;
  for (auto& v : ev1.data) v += 1.0;
  for (auto& v : ed1.data) v += 1.0;
  CHECK(denoise_loss(ev1, ev, ed1, ed) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(denoise_loss(ev1, ev, ed, ed) >= 0.0);
}

TEST_CASE("total loss composes the weighted per-block terms") {
  LossWeights w;
  w.motion = 0.01;
  w.xattn = 0.01;
  CHECK(total_loss(2.0, {1.0, 1.0}, {3.0, 1.0}, w) == doctest::Approx(2.06).epsilon(1e-14));

  LossWeights zero;
  zero.motion = 0.0;
  zero.xattn = 0.0;
  CHECK(total_loss(1.75, {9.0, 2.0}, {4.0, 4.0}, zero) == 1.75);

  // Monotonicity in any motion term under a positive weight.
  const double lo = total_loss(1.0, {0.5, 0.5}, {0.0, 0.0}, w);
  const double hi = total_loss(1.0, {0.5, 0.9}, {0.0, 0.0}, w);
  CHECK(hi > lo);

  CHECK_THROWS_AS(total_loss(1.0, {1.0}, {1.0, 2.0}, w), PreconditionError);
}

TEST_CASE("attention sharing variants") {
  TensorD mv({1, 2}), md({1, 2});
  mv.data = {1.0, 0.0};
  md.data = {0.0, 1.0};

  auto [iv, id] = shared_xattn_variant(mv, md, XattnShareMode::Independent);
  CHECK(iv.data == mv.data);
  CHECK(id.data == md.data);

  auto [av, ad] = shared_xattn_variant(mv, md, XattnShareMode::ShareAvg);
  CHECK(av.data[0] == 0.5);
  CHECK(av.data[1] == 0.5);
  CHECK(ad.data == av.data);

  auto [sv, sd] = shared_xattn_variant(mv, md, XattnShareMode::ShareVideo);
  CHECK(sd.data == mv.data);
  CHECK(sv.data == mv.data);

  auto [ev, ed] = shared_xattn_variant(mv, mv, XattnShareMode::ShareAvg);
  CHECK(ev.data == mv.data);
  CHECK(ed.data == mv.data);

  CHECK_THROWS_AS(parse_share_mode("mystery"), PreconditionError);
  CHECK(parse_share_mode("share_avg") == XattnShareMode::ShareAvg);
  CHECK(share_mode_name(XattnShareMode::ShareVideo) == "share_video");
}
