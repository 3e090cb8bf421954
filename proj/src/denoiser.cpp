#include "idol/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace idol {

namespace {

// Largest group count <= 8 that divides the channel count.
int norm_groups(int c) {
  for (int g = std::min(8, c); g >= 1; --g)
    if (c % g == 0) return g;
  return 1;
}

template <typename T>
void define_resblock(ParameterStore<T>& st, const std::string& p, int cin, int cout,
                     int emb_dim, bool temporal) {
  st.define(p + ".gn1.g", {cin}, Init::One);
  st.define(p + ".gn1.b", {cin}, Init::Zero);
  st.define(p + ".conv1.w", {cout, cin, 3, 3}, Init::FanIn);
  st.define(p + ".conv1.b", {cout}, Init::Zero);
  st.define(p + ".emb.w", {cout, emb_dim}, Init::FanIn);
  st.define(p + ".emb.b", {cout}, Init::Zero);
  st.define(p + ".gn2.g", {cout}, Init::One);
  st.define(p + ".gn2.b", {cout}, Init::Zero);
  st.define(p + ".conv2.w", {cout, cout, 3, 3}, Init::FanIn);
  st.define(p + ".conv2.b", {cout}, Init::Zero);
  if (cin != cout) {
    st.define(p + ".skip.w", {cout, cin, 1, 1}, Init::FanIn);
    st.define(p + ".skip.b", {cout}, Init::Zero);
  }
  if (temporal) {
    st.define(p + ".tconv.w", {cout, cout, 3}, Init::FanIn);
    st.define(p + ".tconv.b", {cout}, Init::Zero);
  }
}

template <typename T>
void define_attn(ParameterStore<T>& st, const std::string& p, int c, int kdim,
                 bool zero_out) {
  st.define(p + ".gn.g", {c}, Init::One);
  st.define(p + ".gn.b", {c}, Init::Zero);
  st.define(p + ".q.w", {c, c}, Init::FanIn);
  st.define(p + ".q.b", {c}, Init::Zero);
  st.define(p + ".k.w", {c, kdim}, Init::FanIn);
  st.define(p + ".k.b", {c}, Init::Zero);
  st.define(p + ".v.w", {c, kdim}, Init::FanIn);
  st.define(p + ".v.b", {c}, Init::Zero);
  st.define(p + ".o.w", {c, c}, zero_out ? Init::Zero : Init::FanIn);
  st.define(p + ".o.b", {c}, Init::Zero);
}

// Attention sublayers attached to every block (down, middle, up).
template <typename T>
void define_attn_stack(ParameterStore<T>& st, const DenoiserConfig& cfg,
                       const std::string& p, int c) {
  define_attn(st, p + ".sattn", c, c, /*zero_out=*/false);
  define_attn(st, p + ".fattn", c, cfg.cond_dim, /*zero_out=*/false);
  if (cfg.temporal) define_attn(st, p + ".tattn", c, c, /*zero_out=*/true);
  if (cfg.cross_modal_layers) define_attn(st, p + ".xmodal", c, c, /*zero_out=*/true);
}

}  // namespace

void DenoiserConfig::validate() const {
  if (frames < 1) throw PreconditionError("frames must be >= 1");
  if (latent_channels < 1) throw PreconditionError("latent_channels must be >= 1");
  if (base_channels < 1) throw PreconditionError("base_channels must be >= 1");
  if (heads < 1) throw PreconditionError("heads must be >= 1");
  if (cond_dim < 2 || cond_dim % 2 != 0)
    throw PreconditionError("cond_dim must be a positive even number");
  if (pose_keypoints < 1) throw PreconditionError("pose_keypoints must be >= 1");
  if (channel_mults.empty()) throw PreconditionError("channel_mults must be non-empty");
  for (int m : channel_mults)
    if (m < 1) throw PreconditionError("channel multipliers must be >= 1");
  const int down = 1 << (levels() - 1);
  if (height % down != 0 || width % down != 0)
    throw PreconditionError("height and width must be divisible by 2^(levels-1)");
  for (int i = 0; i < levels(); ++i)
    if (channels(i) % heads != 0)
      throw PreconditionError("base_channels*mult must be divisible by heads");
}

std::vector<double> sinusoidal_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw PreconditionError("embedding dim must be even");
  const int half = dim / 2;
  std::vector<double> e(dim);
  for (int i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    e[2 * i] = std::sin(t * w);
    e[2 * i + 1] = std::cos(t * w);
  }
  return e;
}

bool is_temporal_or_cross_modal(const std::string& name) {
  return name.find(".tconv.") != std::string::npos ||
         name.find(".tattn.") != std::string::npos ||
         name.find(".xmodal.") != std::string::npos;
}

template <typename T>
void define_parameters(const DenoiserConfig& cfg, ParameterStore<T>& store) {
  cfg.validate();
  const int E = cfg.cond_dim;
  const int L = cfg.levels();
  std::vector<std::string> prefixes;
  if (cfg.separate_unets) {
    prefixes = {"v.", "d."};
  } else {
    prefixes = {""};
  }

  for (const std::string& pre : prefixes) {
    // Timestep embedding MLP.
    store.define(pre + "temb.l1.w", {E, E}, Init::FanIn);
    store.define(pre + "temb.l1.b", {E}, Init::Zero);
    store.define(pre + "temb.l2.w", {E, E}, Init::FanIn);
    store.define(pre + "temb.l2.b", {E}, Init::Zero);

    // Foreground crop encoder (fixed 16x16 input -> 2x2 token grid).
    store.define(pre + "fgenc.c1.w", {E, 3, 3, 3}, Init::FanIn);
    store.define(pre + "fgenc.c1.b", {E}, Init::Zero);
    store.define(pre + "fgenc.c2.w", {E, E, 3, 3}, Init::FanIn);
    store.define(pre + "fgenc.c2.b", {E}, Init::Zero);
    store.define(pre + "fgenc.out.w", {E, E, 1, 1}, Init::FanIn);
    store.define(pre + "fgenc.out.b", {E}, Init::Zero);

    // Pose side branch: a downsampling pyramid whose zero-initialized output
    // projections feed residuals into the up blocks.
    store.define(pre + "adapter.stem.w", {cfg.channels(0), cfg.pose_keypoints, 3, 3},
                 Init::FanIn);
    store.define(pre + "adapter.stem.b", {cfg.channels(0)}, Init::Zero);
    for (int i = 0; i < L; ++i) {
      store.define(pre + "adapter.emb" + std::to_string(i) + ".w", {cfg.channels(i), E},
                   Init::FanIn);
      store.define(pre + "adapter.emb" + std::to_string(i) + ".b", {cfg.channels(i)},
                   Init::Zero);
      if (i > 0) {
        store.define(pre + "adapter.down" + std::to_string(i) + ".w",
                     {cfg.channels(i), cfg.channels(i - 1), 3, 3}, Init::FanIn);
        store.define(pre + "adapter.down" + std::to_string(i) + ".b", {cfg.channels(i)},
                     Init::Zero);
      }
      store.define(pre + "adapter.out" + std::to_string(i) + ".w",
                   {cfg.channels(i), cfg.channels(i), 1, 1}, Init::Zero);
      store.define(pre + "adapter.out" + std::to_string(i) + ".b", {cfg.channels(i)},
                   Init::Zero);
    }

    // U-Net trunk.
    store.define(pre + "unet.stem.w", {cfg.channels(0), cfg.latent_channels, 3, 3},
                 Init::FanIn);
    store.define(pre + "unet.stem.b", {cfg.channels(0)}, Init::Zero);

    for (int i = 0; i < L; ++i) {
      const std::string p = pre + "unet.down" + std::to_string(i);
      const int cin = cfg.channels(i == 0 ? 0 : i - 1);
      define_resblock(store, p + ".res", cin, cfg.channels(i), E, cfg.temporal);
      define_attn_stack(store, cfg, p, cfg.channels(i));
      if (i < L - 1) {
        store.define(p + ".ds.w", {cfg.channels(i), cfg.channels(i), 3, 3}, Init::FanIn);
        store.define(p + ".ds.b", {cfg.channels(i)}, Init::Zero);
      }
    }

    const int cl = cfg.channels(L - 1);
    define_resblock(store, pre + "unet.mid.res1", cl, cl, E, cfg.temporal);
    define_attn_stack(store, cfg, pre + "unet.mid", cl);
    define_resblock(store, pre + "unet.mid.res2", cl, cl, E, cfg.temporal);

    for (int i = L - 1; i >= 0; --i) {
      const std::string p = pre + "unet.up" + std::to_string(i);
      const int carry = (i == L - 1) ? cfg.channels(L - 1) : cfg.channels(i + 1);
      define_resblock(store, p + ".res", carry + cfg.channels(i), cfg.channels(i), E,
                      cfg.temporal);
      define_attn_stack(store, cfg, p, cfg.channels(i));
      if (i > 0) {
        store.define(p + ".ups.w", {cfg.channels(i), cfg.channels(i), 3, 3}, Init::FanIn);
        store.define(p + ".ups.b", {cfg.channels(i)}, Init::Zero);
      }
    }

    store.define(pre + "unet.out.gn.g", {cfg.channels(0)}, Init::One);
    store.define(pre + "unet.out.gn.b", {cfg.channels(0)}, Init::Zero);
    store.define(pre + "unet.out.w", {cfg.latent_channels, cfg.channels(0), 3, 3},
                 Init::FanIn);
    store.define(pre + "unet.out.b", {cfg.latent_channels}, Init::Zero);
  }

  if (!cfg.separate_unets && cfg.modality_table)
    store.define("modality.table", {2, E}, Init::FanIn);
}

ParameterStore<float> make_parameter_store(const DenoiserConfig& cfg, uint64_t seed) {
  ParameterStore<float> store;
  define_parameters(cfg, store);
  store.initialize(seed);
  return store;
}

// ---------------------------------------------------------------------------
// Graph builder
// ---------------------------------------------------------------------------

template <typename T>
struct DenoiserBuilder<T>::Ctx {
  struct S {
    int h = Tape<T>::kNone;
    std::string pre;
    int st = Tape<T>::kNone;  // silu(embedding), injected into res blocks
    std::vector<int> adapter;  // residual node per level, or empty
    Result res;
  };
  std::vector<S> s;
  int fg_tok = Tape<T>::kNone;
  bool capture = false;
  bool coupled = true;
  XattnShareMode share = XattnShareMode::Independent;
};

template <typename T>
DenoiserBuilder<T>::DenoiserBuilder(Tape<T>& tape, const DenoiserConfig& cfg,
                                    ParameterStore<T>& store, bool train)
    : tape_(tape), cfg_(cfg), store_(store), train_(train) {
  cfg_.validate();
}

template <typename T>
int DenoiserBuilder<T>::param_node(const std::string& name) {
  auto it = pnodes_.find(name);
  if (it != pnodes_.end()) return it->second;
  const Tensor<T>& v = store_.tensor(name);
  const int id = train_ ? tape_.param(v) : tape_.constant(v);
  pnodes_.emplace(name, id);
  return id;
}

template <typename T>
int DenoiserBuilder<T>::gn(int x, const std::string& p, int groups) {
  return tape_.group_norm(x, param_node(p + ".g"), param_node(p + ".b"), groups);
}

template <typename T>
int DenoiserBuilder<T>::linear(int x, const std::string& p) {
  return tape_.channel_linear(x, param_node(p + ".w"), param_node(p + ".b"));
}

template <typename T>
int DenoiserBuilder<T>::conv(int x, const std::string& p, int stride, int pad) {
  return tape_.conv2d(x, param_node(p + ".w"), param_node(p + ".b"), stride, pad);
}

template <typename T>
int DenoiserBuilder<T>::res_block(int x, int st, const std::string& p, int cin, int cout,
                                  const std::string& /*prefix*/) {
  int h = gn(x, p + ".gn1", norm_groups(cin));
  h = tape_.silu(h);
  h = conv(h, p + ".conv1", 1, 1);
  h = tape_.add_channel_vec(h, linear(st, p + ".emb"));
  h = gn(h, p + ".gn2", norm_groups(cout));
  h = tape_.silu(h);
  h = conv(h, p + ".conv2", 1, 1);
  if (cfg_.temporal) {
    const int tc =
        tape_.time_conv(h, param_node(p + ".tconv.w"), param_node(p + ".tconv.b"));
    h = tape_.add(h, tc);
  }
  int r = x;
  if (cin != cout) r = conv(x, p + ".skip", 1, 0);
  return tape_.add(h, r);
}

template <typename T>
int DenoiserBuilder<T>::spatial_attn(int x, const std::string& p) {
  const std::vector<int> sh = tape_.value(x).shape;
  const int f = sh[0], c = sh[1];
  const int s = static_cast<int>(tape_.value(x).numel() / (static_cast<int64_t>(f) * c));
  const int x3 = tape_.reshape(x, {f, c, s});
  const int n = gn(x3, p + ".gn", norm_groups(c));
  const int q = linear(n, p + ".q");
  const int k = linear(n, p + ".k");
  const int v = linear(n, p + ".v");
  const int a = tape_.sdp_attention(q, k, v, cfg_.heads);
  const int o = linear(a, p + ".o");
  return tape_.reshape(tape_.add(x3, o), sh);
}

template <typename T>
int DenoiserBuilder<T>::temporal_attn(int x, const std::string& p) {
  const std::vector<int> sh = tape_.value(x).shape;
  const int f = sh[0], c = sh[1];
  const int s = static_cast<int>(tape_.value(x).numel() / (static_cast<int64_t>(f) * c));
  const int x3 = tape_.reshape(x, {f, c, s});
  const int n = gn(x3, p + ".gn", norm_groups(c));
  const int q = linear(n, p + ".q");
  const int k = linear(n, p + ".k");
  const int v = linear(n, p + ".v");
  const int a = tape_.time_sdp_attention(q, k, v, cfg_.heads);
  const int o = linear(a, p + ".o");
  return tape_.reshape(tape_.add(x3, o), sh);
}

template <typename T>
void DenoiserBuilder<T>::fg_attn(Ctx& c, int /*level_or_mid*/, const std::string& stem,
                                 bool capture) {
  const int ns = static_cast<int>(c.s.size());
  std::vector<int> probs(ns), vf(ns), shapes3(ns);
  std::vector<std::vector<int>> sh4(ns);
  for (int i = 0; i < ns; ++i) {
    auto& s = c.s[i];
    const std::string p = s.pre + stem + ".fattn";
    const std::vector<int> sh = tape_.value(s.h).shape;
    const int f = sh[0], ch = sh[1];
    const int sp =
        static_cast<int>(tape_.value(s.h).numel() / (static_cast<int64_t>(f) * ch));
    sh4[i] = sh;
    const int x3 = tape_.reshape(s.h, {f, ch, sp});
    shapes3[i] = x3;
    const int n = gn(x3, p + ".gn", norm_groups(ch));
    const int q = linear(n, p + ".q");
    const int kf = linear(c.fg_tok, p + ".k");
    vf[i] = linear(c.fg_tok, p + ".v");
    probs[i] = tape_.xattn_probs(q, kf, cfg_.heads);
    if (capture) s.res.tap_xattn.push_back(probs[i]);
  }

  // Optional sharing of the attention maps between the two streams.
  std::vector<int> used = probs;
  if (ns == 2) {
    if (c.share == XattnShareMode::ShareAvg) {
      const int avg = tape_.add_scaled(tape_.scale(probs[0], T(0.5)), probs[1], T(0.5));
      used[0] = used[1] = avg;
    } else if (c.share == XattnShareMode::ShareVideo) {
      used[0] = used[1] = probs[0];
    }
  }

  for (int i = 0; i < ns; ++i) {
    auto& s = c.s[i];
    const std::string p = s.pre + stem + ".fattn";
    const std::vector<int> sh3 = tape_.value(shapes3[i]).shape;
    const int o = tape_.xattn_apply(used[i], vf[i], sh3);
    const int proj = linear(o, p + ".o");
    s.h = tape_.reshape(tape_.add(shapes3[i], proj), sh4[i]);
  }
}

template <typename T>
void DenoiserBuilder<T>::cross_modal_attn(Ctx& c, const std::string& stem) {
  const int ns = static_cast<int>(c.s.size());
  // Per-stream pre-normalization (each stream normalized by its own statistics).
  std::vector<int> x3(ns), n3(ns);
  std::vector<std::vector<int>> sh4(ns);
  int f = 0, ch = 0, sp = 0;
  for (int i = 0; i < ns; ++i) {
    auto& s = c.s[i];
    const std::vector<int> sh = tape_.value(s.h).shape;
    f = sh[0];
    ch = sh[1];
    sp = static_cast<int>(tape_.value(s.h).numel() / (static_cast<int64_t>(f) * ch));
    sh4[i] = sh;
    x3[i] = tape_.reshape(s.h, {f, ch, sp});
    n3[i] = gn(x3[i], c.s[i].pre + stem + ".xmodal.gn", norm_groups(ch));
  }

  if (ns == 2 && c.coupled) {
    const int cat = tape_.concat_spatial(n3[0], n3[1]);
    if (!cfg_.separate_unets) {
      const std::string p = stem + ".xmodal";
      const int q = linear(cat, p + ".q");
      const int k = linear(cat, p + ".k");
      const int v = linear(cat, p + ".v");
      const int a = tape_.sdp_attention(q, k, v, cfg_.heads);
      const int o = linear(a, p + ".o");
      for (int i = 0; i < ns; ++i) {
        const int part = tape_.slice_spatial(o, i * sp, (i + 1) * sp, {f, ch, sp});
        c.s[i].h = tape_.reshape(tape_.add(x3[i], part), sh4[i]);
      }
    } else {
      // Each stream projects the concatenated token set with its own weights
      // and keeps its own half of the attention output.
      for (int i = 0; i < ns; ++i) {
        const std::string p = c.s[i].pre + stem + ".xmodal";
        const int q = linear(cat, p + ".q");
        const int k = linear(cat, p + ".k");
        const int v = linear(cat, p + ".v");
        const int a = tape_.sdp_attention(q, k, v, cfg_.heads);
        const int o = linear(a, p + ".o");
        const int part = tape_.slice_spatial(o, i * sp, (i + 1) * sp, {f, ch, sp});
        c.s[i].h = tape_.reshape(tape_.add(x3[i], part), sh4[i]);
      }
    }
    return;
  }

  // Single stream or decoupled: the layer reduces to plain self-attention.
  for (int i = 0; i < ns; ++i) {
    const std::string p = c.s[i].pre + stem + ".xmodal";
    const int q = linear(n3[i], p + ".q");
    const int k = linear(n3[i], p + ".k");
    const int v = linear(n3[i], p + ".v");
    const int a = tape_.sdp_attention(q, k, v, cfg_.heads);
    const int o = linear(a, p + ".o");
    c.s[i].h = tape_.reshape(tape_.add(x3[i], o), sh4[i]);
  }
}

template <typename T>
int DenoiserBuilder<T>::encode_fg(int image_node, const std::string& prefix) {
  const std::vector<int> sh = tape_.value(image_node).shape;
  check_shape(sh, {1, 3, DenoiserConfig::kFgImageSize, DenoiserConfig::kFgImageSize},
              "foreground image");
  int h = tape_.silu(conv(image_node, prefix + "fgenc.c1", 2, 1));
  h = tape_.silu(conv(h, prefix + "fgenc.c2", 2, 1));
  h = conv(h, prefix + "fgenc.out", 1, 0);
  h = tape_.avgpool_to(h, 2, 2);
  return tape_.reshape(h, {1, cfg_.cond_dim, DenoiserConfig::kFgTokens});
}

template <typename T>
int DenoiserBuilder<T>::fg_token_node(const Tensor<T>& tokens) {
  check_shape(tokens.shape, {DenoiserConfig::kFgTokens, cfg_.cond_dim}, "fg_tokens");
  Tensor<T> t({1, cfg_.cond_dim, DenoiserConfig::kFgTokens});
  for (int k = 0; k < DenoiserConfig::kFgTokens; ++k)
    for (int e = 0; e < cfg_.cond_dim; ++e)
      t.data[static_cast<int64_t>(e) * DenoiserConfig::kFgTokens + k] =
          tokens.data[static_cast<int64_t>(k) * cfg_.cond_dim + e];
  return tape_.constant(std::move(t));
}

template <typename T>
int DenoiserBuilder<T>::adapter_residual(int pose, int st, int level,
                                         const std::string& prefix,
                                         std::vector<int>& cache) {
  if (cache.empty()) {
    cache.resize(cfg_.levels(), Tape<T>::kNone);
    int a = conv(pose, prefix + "adapter.stem", 1, 1);
    for (int i = 0; i < cfg_.levels(); ++i) {
      if (i > 0) a = conv(a, prefix + "adapter.down" + std::to_string(i), 2, 1);
      a = tape_.add_channel_vec(
          a, linear(st, prefix + "adapter.emb" + std::to_string(i)));
      a = tape_.silu(a);
      cache[i] = a;
    }
    for (int i = 0; i < cfg_.levels(); ++i)
      cache[i] = conv(cache[i], prefix + "adapter.out" + std::to_string(i), 1, 0);
  }
  return cache[level];
}

template <typename T>
std::vector<typename DenoiserBuilder<T>::Result> DenoiserBuilder<T>::run(
    const std::vector<Stream>& streams, int t, int fg_tok, int bg, int pose,
    bool capture_taps, XattnShareMode share, bool coupled) {
  if (streams.empty() || streams.size() > 2)
    throw PreconditionError("denoiser runs one or two streams");
  if (t < 0) throw PreconditionError("timestep must be non-negative");
  if (fg_tok == Tape<T>::kNone)
    throw PreconditionError("foreground tokens are required");

  const int L = cfg_.levels();
  Ctx c;
  c.fg_tok = fg_tok;
  c.capture = capture_taps;
  c.coupled = coupled;
  c.share = share;
  c.s.resize(streams.size());

  // Shared sinusoidal timestep code (identical for both streams).
  const std::vector<double> sincode = sinusoidal_embedding(t, cfg_.cond_dim);
  Tensor<T> sin_t({cfg_.cond_dim});
  for (int i = 0; i < cfg_.cond_dim; ++i) sin_t.data[i] = static_cast<T>(sincode[i]);
  const int sin_node = tape_.constant(std::move(sin_t));

  for (size_t i = 0; i < streams.size(); ++i) {
    auto& s = c.s[i];
    s.pre = cfg_.separate_unets
                ? (streams[i].y == Modality::Video ? std::string("v.") : std::string("d."))
                : std::string("");
    check_shape(tape_.value(streams[i].z).shape,
                {cfg_.frames, cfg_.latent_channels, cfg_.height, cfg_.width}, "z");

    int temb = linear(sin_node, s.pre + "temb.l1");
    temb = tape_.silu(temb);
    temb = linear(temb, s.pre + "temb.l2");
    if (!cfg_.separate_unets && cfg_.modality_table) {
      const int row = tape_.select_row(param_node("modality.table"),
                                       static_cast<int>(streams[i].y));
      temb = tape_.add(temb, row);
    }
    s.st = tape_.silu(temb);

    int z_in = streams[i].z;
    if (bg != Tape<T>::kNone) z_in = tape_.add_frame_bias(z_in, bg);
    s.h = conv(z_in, s.pre + "unet.stem", 1, 1);
  }

  // Down path.
  std::vector<std::vector<int>> skips(streams.size());
  for (int i = 0; i < L; ++i) {
    const std::string p = "unet.down" + std::to_string(i);
    const int cin = cfg_.channels(i == 0 ? 0 : i - 1);
    for (auto& s : c.s)
      s.h = res_block(s.h, s.st, s.pre + p + ".res", cin, cfg_.channels(i), s.pre);
    for (auto& s : c.s) s.h = spatial_attn(s.h, s.pre + p + ".sattn");
    fg_attn(c, i, p, /*capture=*/false);
    if (cfg_.temporal)
      for (auto& s : c.s) s.h = temporal_attn(s.h, s.pre + p + ".tattn");
    if (cfg_.cross_modal_layers) cross_modal_attn(c, p);
    for (size_t k = 0; k < c.s.size(); ++k) skips[k].push_back(c.s[k].h);
    if (i < L - 1)
      for (auto& s : c.s) s.h = conv(s.h, s.pre + p + ".ds", 2, 1);
  }

  // Middle.
  {
    const int cl = cfg_.channels(L - 1);
    for (auto& s : c.s)
      s.h = res_block(s.h, s.st, s.pre + "unet.mid.res1", cl, cl, s.pre);
    for (auto& s : c.s) s.h = spatial_attn(s.h, s.pre + "unet.mid.sattn");
    fg_attn(c, -1, "unet.mid", /*capture=*/false);
    if (cfg_.temporal)
      for (auto& s : c.s) s.h = temporal_attn(s.h, s.pre + "unet.mid.tattn");
    if (cfg_.cross_modal_layers) cross_modal_attn(c, "unet.mid");
    for (auto& s : c.s)
      s.h = res_block(s.h, s.st, s.pre + "unet.mid.res2", cl, cl, s.pre);
  }

  // Up path; taps are recorded here, deepest block first.
  for (int i = L - 1; i >= 0; --i) {
    const std::string p = "unet.up" + std::to_string(i);
    const int carry = (i == L - 1) ? cfg_.channels(L - 1) : cfg_.channels(i + 1);
    for (size_t k = 0; k < c.s.size(); ++k) {
      auto& s = c.s[k];
      s.h = tape_.concat_channels(s.h, skips[k][i]);
      s.h = res_block(s.h, s.st, s.pre + p + ".res", carry + cfg_.channels(i),
                      cfg_.channels(i), s.pre);
      if (pose != Tape<T>::kNone)
        s.h = tape_.add(s.h, adapter_residual(pose, s.st, i, s.pre, s.adapter));
    }
    for (auto& s : c.s) {
      s.h = spatial_attn(s.h, s.pre + p + ".sattn");
      if (capture_taps) s.res.tap_features.push_back(s.h);
    }
    fg_attn(c, i, p, capture_taps);
    if (cfg_.temporal)
      for (auto& s : c.s) s.h = temporal_attn(s.h, s.pre + p + ".tattn");
    if (cfg_.cross_modal_layers) cross_modal_attn(c, p);
    if (i > 0)
      for (auto& s : c.s) s.h = conv(tape_.upsample2x(s.h), s.pre + p + ".ups", 1, 1);
  }

  // Output head.
  std::vector<Result> out;
  for (auto& s : c.s) {
    int h = gn(s.h, s.pre + "unet.out.gn", norm_groups(cfg_.channels(0)));
    h = tape_.silu(h);
    s.res.eps = conv(h, s.pre + "unet.out", 1, 1);
    out.push_back(s.res);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plain-tensor wrappers
// ---------------------------------------------------------------------------

namespace {

template <typename T>
typename DenoiserBuilder<T>::Stream make_stream(Tape<T>& tape, const Tensor<T>& z,
                                                Modality y) {
  typename DenoiserBuilder<T>::Stream s;
  s.z = tape.constant(z);
  s.y = y;
  return s;
}

template <typename T>
StreamOutT<T> extract(Tape<T>& tape, const typename DenoiserBuilder<T>::Result& r) {
  StreamOutT<T> out;
  out.eps = tape.value(r.eps);
  for (int id : r.tap_features) out.tap_features.push_back(tape.value(id));
  for (int id : r.tap_xattn) out.tap_xattn.push_back(tape.value(id));
  return out;
}

template <typename T>
std::tuple<int, int, int> cond_nodes(Tape<T>& tape, DenoiserBuilder<T>& b,
                                     const ConditionBundleT<T>& cond) {
  const int fg = b.fg_token_node(cond.fg_tokens);
  int bg = Tape<T>::kNone;
  if (cond.bg_latent.numel() > 0) bg = tape.constant(cond.bg_latent);
  int pose = Tape<T>::kNone;
  if (cond.pose.numel() > 0) pose = tape.constant(cond.pose);
  return {fg, bg, pose};
}

}  // namespace

template <typename T>
StreamOutT<T> single_forward(const DenoiserConfig& cfg, ParameterStore<T>& store,
                             const Tensor<T>& z, int t, Modality y,
                             const ConditionBundleT<T>& cond, bool capture_taps) {
  Tape<T> tape;
  DenoiserBuilder<T> b(tape, cfg, store, /*train=*/false);
  auto [fg, bg, pose] = cond_nodes(tape, b, cond);
  auto res = b.run({make_stream(tape, z, y)}, t, fg, bg, pose, capture_taps,
                   XattnShareMode::Independent, /*coupled=*/true);
  return extract(tape, res[0]);
}

template <typename T>
std::pair<StreamOutT<T>, StreamOutT<T>> joint_forward(
    const DenoiserConfig& cfg, ParameterStore<T>& store, const Tensor<T>& z_v,
    const Tensor<T>& z_d, int t, const ConditionBundleT<T>& cond, bool capture_taps,
    XattnShareMode share, bool coupled) {
  Tape<T> tape;
  DenoiserBuilder<T> b(tape, cfg, store, /*train=*/false);
  auto [fg, bg, pose] = cond_nodes(tape, b, cond);
  auto res = b.run({make_stream(tape, z_v, Modality::Video),
                    make_stream(tape, z_d, Modality::Depth)},
                   t, fg, bg, pose, capture_taps, share, coupled);
  return {extract(tape, res[0]), extract(tape, res[1])};
}

template <typename T>
Tensor<T> encode_foreground(const DenoiserConfig& cfg, ParameterStore<T>& store,
                            const Tensor<T>& image) {
  check_shape(image.shape, {3, DenoiserConfig::kFgImageSize, DenoiserConfig::kFgImageSize},
              "foreground image");
  Tape<T> tape;
  DenoiserBuilder<T> b(tape, cfg, store, /*train=*/false);
  Tensor<T> img = image;
  img.shape = {1, 3, DenoiserConfig::kFgImageSize, DenoiserConfig::kFgImageSize};
  const std::string prefix = cfg.separate_unets ? "v." : "";
  const int tok = b.encode_fg(tape.constant(std::move(img)), prefix);
  const Tensor<T>& t3 = tape.value(tok);  // [1, E, K_f]
  Tensor<T> out({DenoiserConfig::kFgTokens, cfg.cond_dim});
  for (int k = 0; k < DenoiserConfig::kFgTokens; ++k)
    for (int e = 0; e < cfg.cond_dim; ++e)
      out.data[static_cast<int64_t>(k) * cfg.cond_dim + e] =
          t3.data[static_cast<int64_t>(e) * DenoiserConfig::kFgTokens + k];
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> cross_modal_attention(const Tensor<T>& tokens_v,
                                                      const Tensor<T>* tokens_d,
                                                      const JointAttnWeights<T>& w) {
  if (tokens_v.ndim() != 2) throw ShapeError("tokens must be [S, D]");
  const int sv = tokens_v.shape[0];
  const int d = tokens_v.shape[1];
  int sd = 0;
  if (tokens_d) {
    check_shape(tokens_d->shape, {tokens_d->shape[0], d}, "tokens_d");
    sd = tokens_d->shape[0];
  }
  check_shape(w.wq.shape, {d, d}, "wq");
  check_shape(w.wo.shape, {d, d}, "wo");
  if (w.heads < 1 || d % w.heads != 0)
    throw PreconditionError("heads must divide the token dimension");
  const int n = sv + sd;
  const int dh = d / w.heads;

  auto proj = [&](const Tensor<T>& wm, const Tensor<T>& bm, const T* x, T* y) {
    for (int c = 0; c < d; ++c) {
      double acc = bm.data[c];
      for (int e = 0; e < d; ++e) acc += double(wm.data[c * d + e]) * double(x[e]);
      y[c] = static_cast<T>(acc);
    }
  };

  std::vector<T> cat(static_cast<size_t>(n) * d);
  std::memcpy(cat.data(), tokens_v.data.data(), sizeof(T) * sv * d);
  if (tokens_d)
    std::memcpy(cat.data() + static_cast<size_t>(sv) * d, tokens_d->data.data(),
                sizeof(T) * sd * d);

  std::vector<T> q(cat.size()), k(cat.size()), v(cat.size()), attn(cat.size());
  for (int i = 0; i < n; ++i) {
    proj(w.wq, w.bq, &cat[static_cast<size_t>(i) * d], &q[static_cast<size_t>(i) * d]);
    proj(w.wk, w.bk, &cat[static_cast<size_t>(i) * d], &k[static_cast<size_t>(i) * d]);
    proj(w.wv, w.bv, &cat[static_cast<size_t>(i) * d], &v[static_cast<size_t>(i) * d]);
  }

  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(n), p(n);
  for (int h = 0; h < w.heads; ++h) {
    const int off = h * dh;
    for (int i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int j = 0; j < n; ++j) {
        double s = 0;
        for (int e = 0; e < dh; ++e)
          s += double(q[static_cast<size_t>(i) * d + off + e]) *
               double(k[static_cast<size_t>(j) * d + off + e]);
        scores[j] = s * scl;
        mx = std::max(mx, scores[j]);
      }
      double z = 0;
      for (int j = 0; j < n; ++j) {
        p[j] = std::exp(scores[j] - mx);
        z += p[j];
      }
      for (int e = 0; e < dh; ++e) {
        double acc = 0;
        for (int j = 0; j < n; ++j)
          acc += p[j] / z * double(v[static_cast<size_t>(j) * d + off + e]);
        attn[static_cast<size_t>(i) * d + off + e] = static_cast<T>(acc);
      }
    }
  }

  Tensor<T> out_v({sv, d});
  Tensor<T> out_d = tokens_d ? Tensor<T>({sd, d}) : Tensor<T>();
  std::vector<T> y(d);
  for (int i = 0; i < n; ++i) {
    proj(w.wo, w.bo, &attn[static_cast<size_t>(i) * d], y.data());
    T* dst = (i < sv) ? &out_v.data[static_cast<size_t>(i) * d]
                      : &out_d.data[static_cast<size_t>(i - sv) * d];
    const T* res = (i < sv) ? &tokens_v.data[static_cast<size_t>(i) * d]
                            : &tokens_d->data[static_cast<size_t>(i - sv) * d];
    for (int c = 0; c < d; ++c) dst[c] = res[c] + y[c];
  }
  return {std::move(out_v), std::move(out_d)};
}

template void define_parameters<float>(const DenoiserConfig&, ParameterStore<float>&);
template void define_parameters<double>(const DenoiserConfig&, ParameterStore<double>&);
template class DenoiserBuilder<float>;
template class DenoiserBuilder<double>;
template StreamOutT<float> single_forward<float>(const DenoiserConfig&,
                                                 ParameterStore<float>&,
                                                 const Tensor<float>&, int, Modality,
                                                 const ConditionBundleT<float>&, bool);
template StreamOutT<double> single_forward<double>(const DenoiserConfig&,
                                                   ParameterStore<double>&,
                                                   const Tensor<double>&, int, Modality,
                                                   const ConditionBundleT<double>&, bool);
template std::pair<StreamOutT<float>, StreamOutT<float>> joint_forward<float>(
    const DenoiserConfig&, ParameterStore<float>&, const Tensor<float>&,
    const Tensor<float>&, int, const ConditionBundleT<float>&, bool, XattnShareMode,
    bool);
template std::pair<StreamOutT<double>, StreamOutT<double>> joint_forward<double>(
    const DenoiserConfig&, ParameterStore<double>&, const Tensor<double>&,
    const Tensor<double>&, int, const ConditionBundleT<double>&, bool, XattnShareMode,
    bool);
template Tensor<float> encode_foreground<float>(const DenoiserConfig&,
                                                ParameterStore<float>&,
                                                const Tensor<float>&);
template Tensor<double> encode_foreground<double>(const DenoiserConfig&,
                                                  ParameterStore<double>&,
                                                  const Tensor<double>&);
template std::pair<Tensor<float>, Tensor<float>> cross_modal_attention<float>(
    const Tensor<float>&, const Tensor<float>*, const JointAttnWeights<float>&);
template std::pair<Tensor<double>, Tensor<double>> cross_modal_attention<double>(
    const Tensor<double>&, const Tensor<double>*, const JointAttnWeights<double>&);

}  // namespace idol
