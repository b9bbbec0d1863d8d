#pragma once

#include "xmodal/tensor.hpp"

namespace xmodal {

// Plain (non-differentiable) raster helpers shared by the data generator,
// the resizers and the registration code. Single-channel {1,1,H,W} layout.

inline real bilinear_at(const Tensor& img, real y, real x) {
  const int H = img.dim(2), W = img.dim(3);
  const real yc = std::clamp(y, real(0), real(H - 1));
  const real xc = std::clamp(x, real(0), real(W - 1));
  const int y0 = std::min(static_cast<int>(yc), H - 2 >= 0 ? H - 2 : 0);
  const int x0 = std::min(static_cast<int>(xc), W - 2 >= 0 ? W - 2 : 0);
  const real fy = yc - y0, fx = xc - x0;
  const real* p = img.data();
  const real v00 = p[y0 * W + x0];
  const real v01 = p[y0 * W + std::min(x0 + 1, W - 1)];
  const real v10 = p[std::min(y0 + 1, H - 1) * W + x0];
  const real v11 = p[std::min(y0 + 1, H - 1) * W + std::min(x0 + 1, W - 1)];
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) +
         fy * ((1 - fx) * v10 + fx * v11);
}

// Area-weighted (box overlap) resampling; exact average under downscale,
// separable in the two axes.
inline Tensor resize_area(const Tensor& img, int out_h, int out_w) {
  const int H = img.dim(2), W = img.dim(3);
  if (out_h == H && out_w == W) return img;
  auto resample_axis = [](const std::vector<real>& src, int n_src, int n_dst,
                          std::vector<real>& dst) {
    // dst cell j covers [j*r, (j+1)*r) in source coordinates, r = n_src/n_dst
    const real r = static_cast<real>(n_src) / n_dst;
    for (int j = 0; j < n_dst; ++j) {
      const real lo = j * r, hi = (j + 1) * r;
      real acc = 0;
      int i0 = static_cast<int>(lo);
      int i1 = std::min(static_cast<int>(std::ceil(hi)), n_src);
      for (int i = i0; i < i1; ++i) {
        const real cover = std::min(hi, real(i + 1)) - std::max(lo, real(i));
        if (cover > 0) acc += cover * src[i];
      }
      dst[j] = acc / r;
    }
  };
  // horizontal pass
  Tensor mid({1, 1, H, out_w});
  std::vector<real> row(W), orow(out_w);
  for (int y = 0; y < H; ++y) {
    std::copy_n(img.data() + static_cast<std::size_t>(y) * W, W, row.begin());
    resample_axis(row, W, out_w, orow);
    std::copy_n(orow.begin(), out_w, mid.data() + static_cast<std::size_t>(y) * out_w);
  }
  // vertical pass
  Tensor out({1, 1, out_h, out_w});
  std::vector<real> col(H), ocol(out_h);
  for (int x = 0; x < out_w; ++x) {
    for (int y = 0; y < H; ++y) col[y] = mid[static_cast<std::size_t>(y) * out_w + x];
    resample_axis(col, H, out_h, ocol);
    for (int y = 0; y < out_h; ++y)
      out[static_cast<std::size_t>(y) * out_w + x] = ocol[y];
  }
  return out;
}

// Separable Gaussian with replicate borders.
inline Tensor gaussian_blur(const Tensor& img, real sigma) {
  if (sigma <= 0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<real> k(2 * radius + 1);
  real sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;

  const int H = img.dim(2), W = img.dim(3);
  Tensor mid(img.shape()), out(img.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[i + radius] *
               img[static_cast<std::size_t>(y) * W + std::clamp(x + i, 0, W - 1)];
      mid[static_cast<std::size_t>(y) * W + x] = acc;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      real acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[i + radius] *
               mid[static_cast<std::size_t>(std::clamp(y + i, 0, H - 1)) * W + x];
      out[static_cast<std::size_t>(y) * W + x] = acc;
    }
  return out;
}

inline Tensor clamp01(Tensor img) {
  for (auto& v : img.vec()) v = std::clamp(v, real(0), real(1));
  return img;
}

}  // namespace xmodal
