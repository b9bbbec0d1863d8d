#include <gtest/gtest.h>

#include "testutil.hpp"
#include "xmodal/image.hpp"
#include "xmodal/model.hpp"

namespace xmodal {
namespace {

using testing::expect_gradients_match;
using testing::randn_t;

ModelConfig desk() { return ModelConfig::desk(); }

TEST(Encoder, ShapesAndSkips) {
  Rng rng(1);
  Encoder e = Encoder::make(rng, 1, 24);
  Var img = Var::leaf(randn_t(2, {2, 1, 64, 64}, 0.3));
  EncoderOut out = e.forward(img);
  const int sizes[5] = {32, 16, 8, 4, 2};
  for (int i = 0; i < 5; ++i)
    EXPECT_EQ(out.skips[i].shape(), (std::vector<int>{2, 24, sizes[i], sizes[i]}))
        << "skip " << i;
  EXPECT_EQ(out.latent.shape(), (std::vector<int>{2, 24, 2, 2}));
  // the deepest skip is the latent itself
  EXPECT_EQ(out.latent.node().get(), out.skips[4].node().get());
}

TEST(Decoder, OutputShapeAndRange) {
  Rng rng(3);
  const auto cfg = desk();
  Encoder e = Encoder::make(rng, 1, cfg.enc_width);
  Decoder d = Decoder::make(rng, cfg, 1, 1);
  Var img = Var::leaf(randn_t(4, {2, 1, 64, 64}, 0.3));
  EncoderOut eo = e.forward(img);
  Var y = d.forward(eo.latent, eo.skips, img, cfg.attention_depth);
  EXPECT_EQ(y.shape(), (std::vector<int>{2, 1, 64, 64}));
  EXPECT_GT(y.value().min(), 0.0);
  EXPECT_LT(y.value().max(), 1.0);
}

TEST(Decoder, SplitForwardMatchesFullForward) {
  // substituting the decoder's own features at the fusion depth must be a
  // no-op, for any depth
  Rng rng(5);
  const auto cfg = desk();
  Encoder e = Encoder::make(rng, 1, cfg.enc_width);
  Decoder d = Decoder::make(rng, cfg, 1, 1);
  Var img = Var::leaf(randn_t(6, {1, 1, 64, 64}, 0.3));
  EncoderOut eo = e.forward(img);
  for (int depth : {1, 2, 4}) {
    Var full = d.forward(eo.latent, eo.skips, img, depth);
    Var feat = d.forward_to_depth(eo.latent, eo.skips, depth);
    Var split = d.forward_from_depth(feat, eo.skips, img, depth);
    ASSERT_EQ(full.shape(), split.shape());
    for (std::size_t i = 0; i < full.numel(); ++i)
      ASSERT_EQ(full.value()[i], split.value()[i]) << "depth " << depth;
  }
}

TEST(Decoder, FeatureChannelsByDepth) {
  Rng rng(7);
  const auto cfg = desk();
  Decoder d = Decoder::make(rng, cfg, 1, 1);
  EXPECT_EQ(d.feature_channels(1), cfg.enc_width);
  EXPECT_EQ(d.feature_channels(2), cfg.dec_width);
  EXPECT_EQ(d.feature_channels(5), cfg.dec_width);
}

TEST(Attention, FreshBlockIsIdentity) {
  Rng rng(9);
  CrossModalAttention a = CrossModalAttention::make(rng, 8, 6, false);
  Var src = Var::leaf(randn_t(10, {2, 8, 4, 4}));
  Var ctx = Var::leaf(randn_t(11, {2, 8, 4, 4}));
  Var out = a(src, ctx);
  for (std::size_t i = 0; i < out.numel(); ++i)
    EXPECT_EQ(out.value()[i], ctx.value()[i]);
}

TEST(Attention, HandComputedSinglePixel) {
  Rng rng(13);
  CrossModalAttention a = CrossModalAttention::make(rng, 2, 2, false);
  // 1x1 convs on a single spatial position reduce to plain matrix products
  a.key.w.value() = Tensor({2, 2, 1, 1}, {1, 0, 0, 1});
  a.query.w.value() = Tensor({2, 2, 1, 1}, {0.5, 0.5, -1, 1});
  a.value.w.value() = Tensor({2, 2, 1, 1}, {1, 1, 2, 0});
  a.proj.w.value() = Tensor({2, 2, 1, 1}, {1, 0, 0, 1});
  Var src = Var::leaf(Tensor({1, 2, 1, 1}, {1.0, 2.0}));
  Var ctx = Var::leaf(Tensor({1, 2, 1, 1}, {0.5, -1.0}));
  // k=[1,2], q=[1.5,1], A=<k,q>=3.5, v=[-0.5,1], fused=A*v, out=fused+ctx
  auto o = a.forward(src, ctx);
  EXPECT_NEAR(o.affinity.value()[0], 3.5, 1e-6);
  EXPECT_NEAR(o.features.value()[0], -1.25, 1e-6);
  EXPECT_NEAR(o.features.value()[1], 2.5, 1e-6);
}

TEST(Attention, MatchesLoopOracle) {
  // independent plain-loop evaluation of the affinity fusion
  Rng rng(15);
  const int C = 5, E = 3, h = 2, w = 3, hw = h * w;
  CrossModalAttention a = CrossModalAttention::make(rng, C, E, false);
  a.proj.w.value() = randn_t(77, {C, E, 1, 1});  // zero-init would hide bugs
  Tensor fs = randn_t(16, {1, C, h, w});
  Tensor fc = randn_t(17, {1, C, h, w});

  auto embed = [&](const Tensor& wm, const Tensor& f, int e, int p) {
    real acc = 0;
    for (int c = 0; c < C; ++c) acc += wm.at4(e, c, 0, 0) * f[c * hw + p];
    return acc;
  };
  std::vector<real> want(C * hw);
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < hw; ++j) {
      real fused_e[8] = {0};
      for (int e = 0; e < E; ++e) {
        for (int i = 0; i < hw; ++i) {
          real aff = 0;
          for (int e2 = 0; e2 < E; ++e2)
            aff += embed(a.key.w.value(), fs, e2, i) *
                   embed(a.query.w.value(), fs, e2, j);
          fused_e[e] += embed(a.value.w.value(), fc, e, i) * aff / hw;
        }
      }
      real out = fc[c * hw + j];
      for (int e = 0; e < E; ++e)
        out += a.proj.w.value().at4(c, e, 0, 0) * fused_e[e];
      want[c * hw + j] = out;
    }

  Var got = a(Var::leaf(fs), Var::leaf(fc));
  for (int i = 0; i < C * hw; ++i) EXPECT_NEAR(got.value()[i], want[i], 1e-9);
}

TEST(Attention, PermutationEquivariant) {
  Rng rng(19);
  const int C = 4, h = 2, w = 3, hw = h * w;
  CrossModalAttention a = CrossModalAttention::make(rng, C, 3, false);
  a.proj.w.value() = randn_t(78, {C, 3, 1, 1});
  const int perm[6] = {3, 0, 5, 1, 4, 2};
  Tensor fs = randn_t(20, {1, C, h, w}), fc = randn_t(21, {1, C, h, w});
  Tensor fsp(fs.shape()), fcp(fc.shape());
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < hw; ++p) {
      fsp[c * hw + perm[p]] = fs[c * hw + p];
      fcp[c * hw + perm[p]] = fc[c * hw + p];
    }
  Var out = a(Var::leaf(fs), Var::leaf(fc));
  Var outp = a(Var::leaf(fsp), Var::leaf(fcp));
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < hw; ++p)
      EXPECT_NEAR(outp.value()[c * hw + perm[p]], out.value()[c * hw + p],
                  1e-9);
}

TEST(Attention, SoftmaxAffinityColumnsSumToOne) {
  Rng rng(23);
  CrossModalAttention a = CrossModalAttention::make(rng, 4, 3, true);
  Var src = Var::leaf(randn_t(24, {2, 4, 2, 2}));
  Var ctx = Var::leaf(randn_t(25, {2, 4, 2, 2}));
  auto o = a.forward(src, ctx);
  const auto& aff = o.affinity.value();
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 4; ++j) {
      real s = 0;
      for (int i = 0; i < 4; ++i) s += aff.at3(n, i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Attention, GradientCheck) {
  Rng rng(27);
  CrossModalAttention a = CrossModalAttention::make(rng, 3, 2, false);
  a.proj.w.value() = randn_t(79, {3, 2, 1, 1});
  expect_gradients_match(
      {randn_t(28, {1, 3, 2, 2}), randn_t(29, {1, 3, 2, 2})},
      [&](std::vector<Var>& v) {
        Var out = a(v[0], v[1]);
        return sum_all(mul(out, Var::constant(randn_t(80, out.shape()))));
      });
}

// plain-loop reimplementation of the edge extractor for oracle comparison
Tensor edge_oracle(const Tensor& img, real lo, real hi) {
  const int H = img.dim(2), W = img.dim(3);
  auto at = [&](const std::vector<real>& buf, int y, int x) {
    return buf[static_cast<std::size_t>(std::clamp(y, 0, H - 1)) * W +
               std::clamp(x, 0, W - 1)];
  };
  real g[5], sum = 0;
  for (int i = -2; i <= 2; ++i) {
    g[i + 2] = std::exp(-0.5 * i * i);
    sum += g[i + 2];
  }
  for (auto& v : g) v /= sum;
  std::vector<real> a(img.vec()), b(a.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real acc = 0;
      for (int i = -2; i <= 2; ++i) acc += g[i + 2] * at(a, y, x + i);
      b[y * W + x] = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real acc = 0;
      for (int i = -2; i <= 2; ++i) acc += g[i + 2] * at(b, y + i, x);
      a[y * W + x] = acc;
    }
  const real sxk[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const real syk[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  std::vector<real> gx(a.size()), gy(a.size()), m(a.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real ax = 0, ay = 0;
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j) {
          ax += sxk[(i + 1) * 3 + j + 1] * at(a, y + i, x + j);
          ay += syk[(i + 1) * 3 + j + 1] * at(a, y + i, x + j);
        }
      gx[y * W + x] = ax;
      gy[y * W + x] = ay;
      m[y * W + x] = std::sqrt(ax * ax + ay * ay + 1e-12);
    }
  Tensor out(img.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real ang = std::atan2(gy[y * W + x], gx[y * W + x]) * 180.0 / 3.14159265358979;
      if (ang < 0) ang += 180.0;
      int dy = 0, dx = 1;
      if (ang >= 22.5 && ang < 67.5) dy = 1, dx = 1;
      else if (ang >= 67.5 && ang < 112.5) dy = 1, dx = 0;
      else if (ang >= 112.5 && ang < 157.5) dy = 1, dx = -1;
      auto mat = [&](int yy, int xx) -> real {
        if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0;
        return m[yy * W + xx];
      };
      const real mv = m[y * W + x];
      const bool keep = mv >= mat(y + dy, x + dx) - 1e-12 &&
                        mv > mat(y - dy, x - dx) + 1e-12;
      const real masked = keep ? mv : 0.0;
      out[static_cast<std::size_t>(y) * W + x] =
          std::clamp((masked - lo) / (hi - lo), real(0), real(1));
    }
  return out;
}

TEST(EdgeNet, ConstantImageGivesNoEdges) {
  EdgeNet e = EdgeNet::make();
  Var img = Var::leaf(Tensor::full({1, 1, 12, 12}, 0.4));
  Var out = e(img);
  EXPECT_EQ(out.value().abs_max(), 0.0);
}

TEST(EdgeNet, VerticalStepGivesSingleLine) {
  EdgeNet e = EdgeNet::make();
  const int H = 16, W = 16;
  Tensor img({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img[static_cast<std::size_t>(y) * W + x] = x < 8 ? 0.2 : 0.8;
  Var out = e(Var::leaf(img));
  int cols_with_response = 0;
  int line_col = -1;
  for (int x = 0; x < W; ++x) {
    bool any = false;
    for (int y = 0; y < H; ++y) any = any || out.value().at4(0, 0, y, x) > 0.1;
    if (any) {
      ++cols_with_response;
      line_col = x;
    }
  }
  EXPECT_EQ(cols_with_response, 1);
  for (int y = 0; y < H; ++y)
    EXPECT_GT(out.value().at4(0, 0, y, line_col), 0.9) << "row " << y;
}

TEST(EdgeNet, HorizontalStepGivesSingleLine) {
  EdgeNet e = EdgeNet::make();
  const int H = 16, W = 16;
  Tensor img({1, 1, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img[static_cast<std::size_t>(y) * W + x] = y < 9 ? 0.7 : 0.1;
  Var out = e(Var::leaf(img));
  int rows_with_response = 0;
  for (int y = 0; y < H; ++y) {
    bool any = false;
    for (int x = 0; x < W; ++x) any = any || out.value().at4(0, 0, y, x) > 0.1;
    rows_with_response += any;
  }
  EXPECT_EQ(rows_with_response, 1);
}

TEST(EdgeNet, MatchesLoopOracle) {
  Rng rng(31);
  Tensor img = Tensor::uniform(rng, {1, 1, 20, 20}, 0, 1);
  img = gaussian_blur(img, 1.0);  // smooth content, generic gradients
  EdgeNet e = EdgeNet::make();
  Var out = e(Var::leaf(img));
  Tensor want = edge_oracle(img, e.thresh_lo, e.thresh_hi);
  for (std::size_t i = 0; i < want.numel(); ++i)
    ASSERT_NEAR(out.value()[i], want[i], 1e-9) << "pixel " << i;
}

TEST(EdgeNet, DifferentiableWithRespectToInput) {
  EdgeNet e = EdgeNet::make();
  Rng rng(33);
  Tensor img = gaussian_blur(Tensor::uniform(rng, {1, 1, 12, 12}, 0, 1), 1.0);
  Var in = Var::leaf(img, /*needs_grad=*/true);
  Var out = e(in);
  backward(mean_all(out));
  ASSERT_FALSE(in.grad().empty());
  EXPECT_GT(in.grad().abs_max(), 0.0);
  // the fixed filters never accumulate gradients
  EXPECT_FALSE(e.sx_w.needs_grad());
  EXPECT_TRUE(e.sx_w.grad().empty());
}

TEST(Discriminator, MapAndScoreShapes) {
  Rng rng(35);
  Discriminator d = Discriminator::make(rng, 1, desk().disc_widths);
  Var img = Var::leaf(randn_t(36, {3, 1, 64, 64}, 0.2));
  Var map = d.response_map(img);
  EXPECT_EQ(map.shape(), (std::vector<int>{3, 1, 8, 8}));
  Var s = d.scores(img);
  EXPECT_EQ(s.shape(), (std::vector<int>{3}));
  for (int i = 0; i < 3; ++i) {
    EXPECT_GT(s.value()[i], 0.0);
    EXPECT_LT(s.value()[i], 1.0);
  }
}

TEST(Discriminator, FullScaleMapIsTwenty) {
  Rng rng(37);
  Discriminator d = Discriminator::make(rng, 1, ModelConfig::full().disc_widths);
  Var img = Var::leaf(randn_t(38, {1, 1, 160, 160}, 0.2));
  EXPECT_EQ(d.response_map(img).shape(), (std::vector<int>{1, 1, 20, 20}));
}

TEST(Discriminator, AcceptsLatentInput) {
  Rng rng(39);
  const auto cfg = desk();
  Discriminator d = Discriminator::make(rng, cfg.enc_width, cfg.disc_widths);
  Var z = Var::leaf(randn_t(40, {2, cfg.enc_width, 2, 2}));
  Var s = d.scores(z);
  EXPECT_EQ(s.shape(), (std::vector<int>{2}));
}

TEST(IndexPredictor, OutputInUnitInterval) {
  Rng rng(41);
  const auto cfg = desk();
  IndexPredictor p =
      IndexPredictor::make(rng, cfg.enc_width, cfg.latent_size(), cfg.idx_widths);
  Var z = Var::leaf(randn_t(42, {5, cfg.enc_width, 2, 2}));
  Var out = p(z);
  EXPECT_EQ(out.shape(), (std::vector<int>{5}));
  for (int i = 0; i < 5; ++i) {
    EXPECT_GT(out.value()[i], 0.0);
    EXPECT_LT(out.value()[i], 1.0);
  }
}

TEST(Model, BuildIsDeterministic) {
  SynthesisModel a = SynthesisModel::build(desk(), Variant::kBase, 7);
  SynthesisModel b = SynthesisModel::build(desk(), Variant::kBase, 7);
  SynthesisModel c = SynthesisModel::build(desk(), Variant::kBase, 8);
  EXPECT_EQ(a.parameter_checksum(), b.parameter_checksum());
  EXPECT_NE(a.parameter_checksum(), c.parameter_checksum());
}

TEST(Model, IndexVariantAddsExactlyTheHead) {
  SynthesisModel base = SynthesisModel::build(desk(), Variant::kBase, 7);
  SynthesisModel idx = SynthesisModel::build(desk(), Variant::kIndex, 7);
  ASSERT_TRUE(idx.index_head.has_value());
  std::vector<Var> head;
  idx.index_head->collect(head);
  EXPECT_EQ(param_count(idx.generator_params()),
            param_count(base.generator_params()) + param_count(head));
  EXPECT_EQ(param_count(idx.discriminator_params()),
            param_count(base.discriminator_params()));
}

TEST(Model, NeighborVariantWidensFirstConvOnly) {
  SynthesisModel base = SynthesisModel::build(desk(), Variant::kBase, 7);
  SynthesisModel nb = SynthesisModel::build(desk(), Variant::kNeighbors, 7);
  EXPECT_EQ(nb.enc_us.c1a.w.shape()[1], 3);
  EXPECT_EQ(base.enc_us.c1a.w.shape()[1], 1);
  // the re-embedding encoder still sees single-channel images
  EXPECT_EQ(nb.enc_mr.c1a.w.shape()[1], 1);
  const std::size_t extra = 24 * 2 * 9;  // two extra input channels
  EXPECT_EQ(param_count(nb.generator_params()),
            param_count(base.generator_params()) + extra);
}

TEST(Model, EdgeFiltersAreNotTrainable) {
  SynthesisModel m = SynthesisModel::build(desk(), Variant::kBase, 7);
  for (const auto& p : m.generator_params()) EXPECT_TRUE(p.needs_grad());
  for (const auto& p : m.discriminator_params()) EXPECT_TRUE(p.needs_grad());
  std::vector<Var> edge_state;
  m.edge.state(edge_state);
  for (const auto& p : edge_state) EXPECT_FALSE(p.needs_grad());
}

TEST(Model, EvalCountsTrackForwards) {
  SynthesisModel m = SynthesisModel::build(desk(), Variant::kBase, 7);
  m.reset_eval_counts();
  Var img = Var::leaf(randn_t(50, {1, 1, 64, 64}, 0.2));
  auto eo = m.enc_us.forward(img);
  m.dec_us.forward(eo.latent, eo.skips, img, m.cfg.attention_depth);
  auto counts = m.eval_counts();
  EXPECT_EQ(counts["enc_us"], 1);
  EXPECT_EQ(counts["dec_us"], 1);
  EXPECT_EQ(counts["enc_mr"], 0);
  EXPECT_EQ(counts["d_mr"], 0);
}

}  // namespace
}  // namespace xmodal
