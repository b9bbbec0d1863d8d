#pragma once

#include "xmodal/image.hpp"

namespace xmodal {

// Image-quality metrics over [0,1] grayscale tensors {1,1,H,W} (any equal
// shape is accepted; statistics run over all elements).

inline real mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  real acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const real d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<real>(a.numel());
}

// 10 log10(1 / MSE) against peak 1.0, capped at 100 dB so identical inputs
// report a finite sentinel.
constexpr real kPsnrCap = 100.0;

inline real psnr(const Tensor& a, const Tensor& b) {
  const real m = mse(a, b);
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

// Standard structural similarity: 11x11 Gaussian window (sigma 1.5),
// k1=0.01, k2=0.03, dynamic range 1. Windows are valid-only (no padding)
// and the map mean is returned.
inline real ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  if (a.shape().size() != 4 || a.dim(0) != 1 || a.dim(1) != 1)
    throw ShapeError("ssim: expects a {1,1,H,W} image");
  const int H = a.dim(2), W = a.dim(3);
  const int win = 11, rad = 5;
  if (H < win || W < win) throw ShapeError("ssim: image smaller than window");

  static const std::vector<real> g = [] {
    std::vector<real> k(11);
    real sum = 0;
    for (int i = 0; i < 11; ++i) {
      const real x = i - 5;
      k[i] = std::exp(-x * x / (2 * 1.5 * 1.5));
      sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
  }();

  const real c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto px = [&](const Tensor& t, int y, int x) { return t.at4(0, 0, y, x); };

  // separable window statistics: horizontal pass into row buffers
  const int Wo = W - win + 1, Ho = H - win + 1;
  std::vector<real> ma(H * Wo), mb(H * Wo), maa(H * Wo), mbb(H * Wo),
      mab(H * Wo);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < Wo; ++x) {
      real sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < win; ++i) {
        const real va = px(a, y, x + i), vb = px(b, y, x + i);
        sa += g[i] * va;
        sb += g[i] * vb;
        saa += g[i] * va * va;
        sbb += g[i] * vb * vb;
        sab += g[i] * va * vb;
      }
      const int o = y * Wo + x;
      ma[o] = sa;
      mb[o] = sb;
      maa[o] = saa;
      mbb[o] = sbb;
      mab[o] = sab;
    }

  real acc = 0;
  for (int y = 0; y < Ho; ++y)
    for (int x = 0; x < Wo; ++x) {
      real mu_a = 0, mu_b = 0, raw_aa = 0, raw_bb = 0, raw_ab = 0;
      for (int i = 0; i < win; ++i) {
        const int o = (y + i) * Wo + x;
        mu_a += g[i] * ma[o];
        mu_b += g[i] * mb[o];
        raw_aa += g[i] * maa[o];
        raw_bb += g[i] * mbb[o];
        raw_ab += g[i] * mab[o];
      }
      const real va = raw_aa - mu_a * mu_a;
      const real vb = raw_bb - mu_b * mu_b;
      const real cov = raw_ab - mu_a * mu_b;
      acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
  return acc / static_cast<real>(Ho * Wo);
}

}  // namespace xmodal
