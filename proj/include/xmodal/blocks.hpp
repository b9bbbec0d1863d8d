#pragma once

#include <array>
#include <optional>

#include "xmodal/nn.hpp"

namespace xmodal {

// U-shaped encoder/decoder pair with cross-modal attention, an edge
// extractor with fixed filters, and the patch discriminators. Channel widths
// come from ModelConfig so the same code runs the full-resolution layout and
// a halved desk-scale layout.

struct ModelConfig {
  int image_size = 160;
  int enc_width = 48;
  int dec_width = 96;
  int att_embed = 72;
  int dec6_c1 = 64, dec6_c2 = 32;
  std::array<int, 4> disc_widths = {64, 128, 256, 512};
  std::array<int, 4> idx_widths = {48, 32, 16, 4};
  int attention_depth = 2;  // decoder stages completed before fusion
  bool attention_softmax = false;

  static ModelConfig full() { return ModelConfig{}; }

  static ModelConfig desk() {
    ModelConfig c;
    c.image_size = 64;
    c.enc_width = 24;
    c.dec_width = 48;
    c.att_embed = 36;
    c.dec6_c1 = 32;
    c.dec6_c2 = 16;
    c.disc_widths = {32, 64, 128, 256};
    c.idx_widths = {24, 16, 8, 2};
    return c;
  }

  void validate() const {
    if (image_size < 32 || image_size % 32 != 0)
      throw ConfigError("image_size must be a positive multiple of 32");
    if (attention_depth < 1 || attention_depth > 5)
      throw ConfigError("attention_depth must be in [1,5]");
  }

  int latent_size() const { return image_size / 32; }
};

// ---- encoder ----

struct EncoderOut {
  Var latent;                // {N, W, s, s}, s = image_size/32
  std::array<Var, 5> skips;  // post-pool output of every stage; skips[4] == latent
};

struct Encoder {
  ConvLayer c1a, c1b, c2, c3, c4, c5;
  mutable long evals = 0;

  static Encoder make(Rng& rng, int in_channels, int width) {
    Encoder e;
    e.c1a = ConvLayer::make3(rng, in_channels, width);
    e.c1b = ConvLayer::make3(rng, width, width);
    e.c2 = ConvLayer::make3(rng, width, width);
    e.c3 = ConvLayer::make3(rng, width, width);
    e.c4 = ConvLayer::make3(rng, width, width);
    e.c5 = ConvLayer::make3(rng, width, width);
    return e;
  }

  EncoderOut forward(const Var& img) const {
    ++evals;
    EncoderOut o;
    Var h = maxpool2(leaky_relu(c1b(leaky_relu(c1a(img)))));
    o.skips[0] = h;
    h = maxpool2(leaky_relu(c2(h)));
    o.skips[1] = h;
    h = maxpool2(leaky_relu(c3(h)));
    o.skips[2] = h;
    h = maxpool2(leaky_relu(c4(h)));
    o.skips[3] = h;
    h = maxpool2(leaky_relu(c5(h)));
    o.skips[4] = h;
    o.latent = h;
    return o;
  }

  void collect(std::vector<Var>& out) const {
    for (const auto* l : {&c1a, &c1b, &c2, &c3, &c4, &c5}) l->collect(out);
  }
};

// ---- decoder ----

// Five upsampling stages with skip concatenation, then a head that folds in
// the source image. forward() is the exact composition of the two partial
// calls, so substituting externally produced features at the fusion depth is
// bit-for-bit equivalent when those features are the decoder's own.
struct Decoder {
  ConvLayer d1a;
  ConvTLayer d1u;
  struct Stage {
    ConvLayer a, b;
    ConvTLayer up;
  };
  std::array<Stage, 4> stages;  // stages[0] is the second decoder block
  ConvLayer h1, h2, out;
  mutable long evals = 0;

  static Decoder make(Rng& rng, const ModelConfig& cfg, int src_channels,
                      int out_channels) {
    Decoder d;
    const int ew = cfg.enc_width, dw = cfg.dec_width;
    d.d1a = ConvLayer::make3(rng, ew, ew);
    d.d1u = ConvTLayer::make(rng, ew, ew);
    for (int s = 0; s < 4; ++s) {
      const int cin = (s == 0 ? ew : dw) + ew;  // previous stage + skip
      d.stages[s].a = ConvLayer::make3(rng, cin, dw);
      d.stages[s].b = ConvLayer::make3(rng, dw, dw);
      d.stages[s].up = ConvTLayer::make(rng, dw, dw);
    }
    d.h1 = ConvLayer::make3(rng, dw + src_channels, cfg.dec6_c1);
    d.h2 = ConvLayer::make3(rng, cfg.dec6_c1, cfg.dec6_c2);
    d.out = ConvLayer::make3(rng, cfg.dec6_c2, out_channels);
    return d;
  }

  // channel width of the features at a given completed-stage depth
  int feature_channels(int depth) const {
    return depth <= 1 ? d1u.b.shape()[0] : stages[0].up.b.shape()[0];
  }

  Var run_stage(int stage_idx, const Var& h,
                const std::array<Var, 5>& skips) const {
    if (stage_idx == 1) return leaky_relu(d1u(leaky_relu(d1a(h))));
    const Stage& s = stages[stage_idx - 2];
    // stage i consumes the skip from encoder stage 6-i
    Var cat = concat_channels(h, skips[5 - stage_idx]);
    return leaky_relu(s.up(leaky_relu(s.b(leaky_relu(s.a(cat))))));
  }

  Var forward_to_depth(const Var& latent, const std::array<Var, 5>& skips,
                       int depth) const {
    ++evals;
    Var h = latent;
    for (int s = 1; s <= depth; ++s) h = run_stage(s, h, skips);
    return h;
  }

  Var forward_from_depth(const Var& feat, const std::array<Var, 5>& skips,
                         const Var& source, int depth) const {
    Var h = feat;
    for (int s = depth + 1; s <= 5; ++s) h = run_stage(s, h, skips);
    h = concat_channels(h, source);
    h = leaky_relu(h1(h));
    h = leaky_relu(h2(h));
    return sigmoid(out(h));
  }

  Var forward(const Var& latent, const std::array<Var, 5>& skips,
              const Var& source, int depth, Var* tap = nullptr) const {
    Var f = forward_to_depth(latent, skips, depth);
    if (tap) *tap = f;
    return forward_from_depth(f, skips, source, depth);
  }

  void collect(std::vector<Var>& out_params) const {
    d1a.collect(out_params);
    d1u.collect(out_params);
    for (const auto& s : stages) {
      s.a.collect(out_params);
      s.b.collect(out_params);
      s.up.collect(out_params);
    }
    h1.collect(out_params);
    h2.collect(out_params);
    out.collect(out_params);
  }
};

// ---- cross-modal attention ----

// Spatial affinity between two same-shaped feature maps. Keys and queries
// come from the guidance features f_src, values from the features being
// refined f_ctx; the projection back starts at zero so the block begins as
// an identity and learns how much context to mix in.
struct CrossModalAttention {
  ConvLayer key, query, value, proj;
  bool use_softmax = false;
  mutable long evals = 0;

  static CrossModalAttention make(Rng& rng, int channels, int embed,
                                  bool use_softmax) {
    CrossModalAttention a;
    a.key = ConvLayer::make(rng, channels, embed, 1, 1, 1, 0, 0);
    a.query = ConvLayer::make(rng, channels, embed, 1, 1, 1, 0, 0);
    a.value = ConvLayer::make(rng, channels, embed, 1, 1, 1, 0, 0);
    a.proj = ConvLayer::make(rng, embed, channels, 1, 1, 1, 0, 0,
                             PadMode::kZero, /*zero_init=*/true);
    a.use_softmax = use_softmax;
    return a;
  }

  struct Out {
    Var features;  // {N, C, h, w}
    Var affinity;  // {N, h*w, h*w}
  };

  Out forward(const Var& f_src, const Var& f_ctx) const {
    ++evals;
    require_same_shape(f_src.value(), f_ctx.value(), "attention");
    const auto& s = f_src.shape();
    const int N = s[0], h = s[2], w = s[3];
    const int hw = h * w;
    const int E = key.b.shape()[0];

    Var k = reshape(key(f_src), {N, E, hw});
    Var q = reshape(query(f_src), {N, E, hw});
    Var v = reshape(value(f_ctx), {N, E, hw});

    // affinity[i, j] = <key_i, query_j>
    Var aff = bmm(transpose12(k), q);
    aff = use_softmax ? softmax_dim1(aff)
                      : scale(aff, 1.0 / static_cast<real>(hw));
    // fused[:, j] = sum_i value_i * affinity[i, j]
    Var fused = reshape(bmm(v, aff), {N, E, h, w});
    Out o;
    o.affinity = aff;
    o.features = add(proj(fused), f_ctx);
    return o;
  }

  Var operator()(const Var& f_src, const Var& f_ctx) const {
    return forward(f_src, f_ctx).features;
  }

  void collect(std::vector<Var>& out) const {
    key.collect(out);
    query.collect(out);
    value.collect(out);
    proj.collect(out);
  }
};

// ---- edge extractor ----

// Smoothing, Sobel gradients, non-maximum suppression and a soft threshold,
// all with fixed weights. The suppression mask is computed outside the graph
// and applied as a constant, so gradients pass straight through the kept
// pixels; everything stays differentiable with respect to the input image.
struct EdgeNet {
  Var gh_w, gh_b, gv_w, gv_b;  // separable gaussian, sigma 1
  Var sx_w, sx_b, sy_w, sy_b;  // 3x3 sobel pair
  real thresh_lo = 0.1, thresh_hi = 0.3;
  mutable long evals = 0;

  static EdgeNet make() {
    EdgeNet e;
    real g[5], sum = 0;
    for (int i = -2; i <= 2; ++i) {
      g[i + 2] = std::exp(-0.5 * i * i);
      sum += g[i + 2];
    }
    Tensor gh({1, 1, 1, 5}), gv({1, 1, 5, 1});
    for (int i = 0; i < 5; ++i) gh[i] = gv[i] = g[i] / sum;
    e.gh_w = Var::leaf(std::move(gh));
    e.gv_w = Var::leaf(std::move(gv));
    const real sx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    const real sy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    Tensor tx({1, 1, 3, 3}), ty({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) {
      tx[i] = sx[i];
      ty[i] = sy[i];
    }
    e.sx_w = Var::leaf(std::move(tx));
    e.sy_w = Var::leaf(std::move(ty));
    e.gh_b = Var::leaf(Tensor::zeros({1}));
    e.gv_b = Var::leaf(Tensor::zeros({1}));
    e.sx_b = Var::leaf(Tensor::zeros({1}));
    e.sy_b = Var::leaf(Tensor::zeros({1}));
    return e;
  }

  // Suppression with a deterministic tie-break: a ridge that lands exactly
  // between two pixels keeps the one first along the gradient direction.
  static Tensor nms_mask(const Tensor& mag, const Tensor& gx,
                         const Tensor& gy) {
    const int N = mag.dim(0), H = mag.dim(2), W = mag.dim(3);
    constexpr real tie = 1e-12;
    Tensor mask(mag.shape());
    for (int n = 0; n < N; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t i = mag.idx4(n, 0, y, x);
          real ang = std::atan2(gy[i], gx[i]) * 180.0 / 3.14159265358979;
          if (ang < 0) ang += 180.0;
          int dy = 0, dx = 1;  // bin around 0 deg: horizontal gradient
          if (ang >= 22.5 && ang < 67.5) {
            dy = 1;
            dx = 1;
          } else if (ang >= 67.5 && ang < 112.5) {
            dy = 1;
            dx = 0;
          } else if (ang >= 112.5 && ang < 157.5) {
            dy = 1;
            dx = -1;
          }
          auto at = [&](int yy, int xx) -> real {
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0;
            return mag[mag.idx4(n, 0, yy, xx)];
          };
          const real m = mag[i];
          const real ahead = at(y + dy, x + dx);
          const real behind = at(y - dy, x - dx);
          mask[i] = (m >= ahead - tie && m > behind + tie) ? 1.0 : 0.0;
        }
    return mask;
  }

  Var operator()(const Var& img) const {
    ++evals;
    Var s = conv2d(img, gh_w, gh_b, 1, 0, 2, PadMode::kReplicate);
    s = conv2d(s, gv_w, gv_b, 1, 2, 0, PadMode::kReplicate);
    Var gx = conv2d(s, sx_w, sx_b, 1, 1, 1, PadMode::kReplicate);
    Var gy = conv2d(s, sy_w, sy_b, 1, 1, 1, PadMode::kReplicate);
    Var m = magnitude(gx, gy);
    Tensor mask = nms_mask(m.value(), gx.value(), gy.value());
    return ramp(mul_mask(m, std::move(mask)), thresh_lo, thresh_hi);
  }

  // Fixed filters: nothing to train, but the tensors are part of the saved
  // state so a checkpoint fully describes the network.
  void state(std::vector<Var>& out) const {
    for (const auto* v : {&gh_w, &gh_b, &gv_w, &gv_b, &sx_w, &sx_b, &sy_w,
                          &sy_b})
      out.push_back(*v);
  }
};

// ---- discriminators ----

struct Discriminator {
  std::array<ConvLayer, 5> convs;
  mutable long evals = 0;

  static Discriminator make(Rng& rng, int in_channels,
                            const std::array<int, 4>& widths) {
    Discriminator d;
    d.convs[0] = ConvLayer::make3(rng, in_channels, widths[0], 2);
    d.convs[1] = ConvLayer::make3(rng, widths[0], widths[1], 2);
    d.convs[2] = ConvLayer::make3(rng, widths[1], widths[2], 2);
    d.convs[3] = ConvLayer::make3(rng, widths[2], widths[3], 1);
    d.convs[4] = ConvLayer::make3(rng, widths[3], 1, 1);
    return d;
  }

  // pre-pool response map, {N, 1, h, w}
  Var response_map(const Var& x) const {
    ++evals;
    Var h = x;
    for (int i = 0; i < 4; ++i) h = leaky_relu(convs[i](h));
    return convs[4](h);
  }

  // per-sample realness score, {N} in (0, 1)
  Var scores(const Var& x) const {
    Var map = response_map(x);
    const int N = map.shape()[0];
    return sigmoid(reshape(global_avg_pool(map), {N}));
  }

  void collect(std::vector<Var>& out) const {
    for (const auto& c : convs) c.collect(out);
  }
};

// Predicts the normalized scan position of a slice from the latent code.
struct IndexPredictor {
  std::array<ConvLayer, 4> convs;
  FcLayer fc;
  mutable long evals = 0;

  static IndexPredictor make(Rng& rng, int latent_channels, int latent_size,
                             const std::array<int, 4>& widths) {
    IndexPredictor p;
    int cin = latent_channels;
    for (int i = 0; i < 4; ++i) {
      p.convs[i] = ConvLayer::make3(rng, cin, widths[i]);
      cin = widths[i];
    }
    p.fc = FcLayer::make(rng, cin * latent_size * latent_size, 1);
    return p;
  }

  // {N, C, s, s} -> {N}, each value in (0, 1)
  Var operator()(const Var& latent) const {
    ++evals;
    Var h = latent;
    for (const auto& c : convs) h = leaky_relu(c(h));
    const auto& s = h.shape();
    h = reshape(h, {s[0], s[1] * s[2] * s[3]});
    return sigmoid(reshape(fc(h), {s[0]}));
  }

  void collect(std::vector<Var>& out) const {
    for (const auto& c : convs) c.collect(out);
    fc.collect(out);
  }
};

}  // namespace xmodal
