#pragma once

#include "xmodal/autograd.hpp"

namespace xmodal {

enum class PadMode { kZero, kReplicate };

namespace detail {

// Lowered convolution: columns matrix is (Cin*kh*kw) x (Ho*Wo) per sample.
struct ConvGeom {
  int cin, kh, kw, stride, ph, pw;
  int h, w, ho, wo;
  PadMode pad_mode;

  static ConvGeom make(const std::vector<int>& xs, int cout_unused, int cin,
                       int kh, int kw, int stride, int ph, int pw,
                       PadMode mode) {
    (void)cout_unused;
    ConvGeom g{cin, kh, kw, stride, ph, pw, xs[2], xs[3], 0, 0, mode};
    if (g.h + 2 * ph < kh || g.w + 2 * pw < kw)
      throw ShapeError("conv2d: kernel exceeds padded input");
    g.ho = (g.h + 2 * ph - kh) / stride + 1;  // floor semantics
    g.wo = (g.w + 2 * pw - kw) / stride + 1;
    return g;
  }
};

inline void im2col(const real* x, const ConvGeom& g, real* cols) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t ocols = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    const real* xc = x + c * plane;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        real* row =
            cols + (static_cast<std::size_t>(c) * g.kh * g.kw + ki * g.kw + kj) *
                       ocols;
        for (int ho = 0; ho < g.ho; ++ho) {
          int hi = ho * g.stride - g.ph + ki;
          bool h_in = hi >= 0 && hi < g.h;
          if (!h_in && g.pad_mode == PadMode::kReplicate) {
            hi = std::clamp(hi, 0, g.h - 1);
            h_in = true;
          }
          real* dst = row + static_cast<std::size_t>(ho) * g.wo;
          if (!h_in) {
            std::fill(dst, dst + g.wo, real(0));
            continue;
          }
          const real* src = xc + static_cast<std::size_t>(hi) * g.w;
          for (int wo = 0; wo < g.wo; ++wo) {
            int wi = wo * g.stride - g.pw + kj;
            if (wi < 0 || wi >= g.w) {
              if (g.pad_mode == PadMode::kReplicate)
                dst[wo] = src[std::clamp(wi, 0, g.w - 1)];
              else
                dst[wo] = 0;
            } else {
              dst[wo] = src[wi];
            }
          }
        }
      }
    }
  }
}

// Scatter-adds a columns matrix back onto the input grid; adjoint of im2col.
inline void col2im_accum(const real* cols, const ConvGeom& g, real* dx) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t ocols = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    real* xc = dx + c * plane;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const real* row =
            cols + (static_cast<std::size_t>(c) * g.kh * g.kw + ki * g.kw + kj) *
                       ocols;
        for (int ho = 0; ho < g.ho; ++ho) {
          int hi = ho * g.stride - g.ph + ki;
          if (hi < 0 || hi >= g.h) {
            if (g.pad_mode != PadMode::kReplicate) continue;
            hi = std::clamp(hi, 0, g.h - 1);
          }
          const real* src = row + static_cast<std::size_t>(ho) * g.wo;
          real* dstrow = xc + static_cast<std::size_t>(hi) * g.w;
          for (int wo = 0; wo < g.wo; ++wo) {
            int wi = wo * g.stride - g.pw + kj;
            if (wi < 0 || wi >= g.w) {
              if (g.pad_mode != PadMode::kReplicate) continue;
              wi = std::clamp(wi, 0, g.w - 1);
            }
            dstrow[wi] += src[wo];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: {N, Cin, H, W}, w: {Cout, Cin, kh, kw}, b: {Cout}.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1,
                  int pad_h = 0, int pad_w = -1,
                  PadMode pad_mode = PadMode::kZero) {
  if (pad_w < 0) pad_w = pad_h;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] ||
      b.shape() != std::vector<int>{ws[0]})
    throw ShapeError("conv2d: incompatible shapes " + x.value().shape_str() +
                     " / " + w.value().shape_str());
  const int N = xs[0], cout = ws[0], cin = ws[1], kh = ws[2], kw = ws[3];
  const auto g = detail::ConvGeom::make(xs, cout, cin, kh, kw, stride, pad_h,
                                        pad_w, pad_mode);
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t ocols = static_cast<std::size_t>(g.ho) * g.wo;
  const int krows = cin * kh * kw;

  Tensor out({N, cout, g.ho, g.wo});
  std::vector<real> cols(static_cast<std::size_t>(krows) * ocols);
  for (int n0 = 0; n0 < N; ++n0) {
    detail::im2col(x.value().data() + n0 * cin * in_plane, g, cols.data());
    real* on = out.data() + static_cast<std::size_t>(n0) * cout * ocols;
    detail::gemm(w.value().data(), cols.data(), on, cout, krows,
                 static_cast<int>(ocols), false);
    for (int c = 0; c < cout; ++c) {
      const real bias = b.value()[c];
      real* oc = on + static_cast<std::size_t>(c) * ocols;
      for (std::size_t i = 0; i < ocols; ++i) oc[i] += bias;
    }
  }

  auto n = make_node(std::move(out),
                     x.needs_grad() || w.needs_grad() || b.needs_grad(),
                     {x.node(), w.node(), b.node()});
  if (n->needs_grad) {
    NodeRef px = x.node(), pw = w.node(), pb = b.node();
    n->backprop = [px, pw, pb, g, N, cout, cin, krows, ocols,
                   in_plane](Node& self) {
      std::vector<real> cols(static_cast<std::size_t>(krows) * ocols);
      std::vector<real> dcols;
      for (int n0 = 0; n0 < N; ++n0) {
        const real* gn =
            self.grad.data() + static_cast<std::size_t>(n0) * cout * ocols;
        if (pw->needs_grad || px->needs_grad)
          detail::im2col(px->value.data() + n0 * cin * in_plane, g,
                         cols.data());
        if (pw->needs_grad)  // dW += dY * K^T
          detail::gemm_bt(gn, cols.data(), pw->grad_buf().data(), cout,
                          static_cast<int>(ocols), krows, true);
        if (pb->needs_grad) {
          auto& gb = pb->grad_buf();
          for (int c = 0; c < cout; ++c) {
            const real* gc = gn + static_cast<std::size_t>(c) * ocols;
            real s = 0;
            for (std::size_t i = 0; i < ocols; ++i) s += gc[i];
            gb[c] += s;
          }
        }
        if (px->needs_grad) {  // dK = W^T * dY, then scatter
          dcols.assign(static_cast<std::size_t>(krows) * ocols, real(0));
          detail::gemm_at(pw->value.data(), gn, dcols.data(), krows, cout,
                          static_cast<int>(ocols), false);
          detail::col2im_accum(dcols.data(), g,
                               px->grad_buf().data() + n0 * cin * in_plane);
        }
      }
    };
  }
  return Var(n);
}

// x: {N, Cin, H, W}, w: {Cin, Cout, kh, kw}, b: {Cout}. Output spatial size is
// (H-1)*stride - 2*pad + kh + out_pad.
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b,
                            int stride, int pad, int out_pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0] ||
      b.shape() != std::vector<int>{ws[1]})
    throw ShapeError("conv_transpose2d: incompatible shapes");
  const int N = xs[0], cin = ws[0], cout = ws[1], kh = ws[2], kw = ws[3];
  const int H = xs[2], W = xs[3];
  const int Ho = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int Wo = (W - 1) * stride - 2 * pad + kw + out_pad;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: empty output");
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
  const int ckk = cout * kh * kw;

  // cols[(co*kh+ki)*kw+kj, i*W+j] scatters to out[co, i*s-p+ki, j*s-p+kj].
  auto scatter = [=](const real* cols, real* on) {
    for (int co = 0; co < cout; ++co)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const real* row =
              cols + (static_cast<std::size_t>(co) * kh * kw + ki * kw + kj) *
                         in_plane;
          for (int i = 0; i < H; ++i) {
            const int ho = i * stride - pad + ki;
            if (ho < 0 || ho >= Ho) continue;
            real* orow = on + (static_cast<std::size_t>(co) * Ho + ho) * Wo;
            const real* rrow = row + static_cast<std::size_t>(i) * W;
            for (int j = 0; j < W; ++j) {
              const int wo = j * stride - pad + kj;
              if (wo >= 0 && wo < Wo) orow[wo] += rrow[j];
            }
          }
        }
  };
  auto gather = [=](const real* gon, real* cols) {
    for (int co = 0; co < cout; ++co)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          real* row =
              cols + (static_cast<std::size_t>(co) * kh * kw + ki * kw + kj) *
                         in_plane;
          for (int i = 0; i < H; ++i) {
            const int ho = i * stride - pad + ki;
            real* rrow = row + static_cast<std::size_t>(i) * W;
            if (ho < 0 || ho >= Ho) {
              std::fill(rrow, rrow + W, real(0));
              continue;
            }
            const real* orow = gon + (static_cast<std::size_t>(co) * Ho + ho) * Wo;
            for (int j = 0; j < W; ++j) {
              const int wo = j * stride - pad + kj;
              rrow[j] = (wo >= 0 && wo < Wo) ? orow[wo] : real(0);
            }
          }
        }
  };

  Tensor out({N, cout, Ho, Wo});
  std::vector<real> cols(static_cast<std::size_t>(ckk) * in_plane);
  for (int n0 = 0; n0 < N; ++n0) {
    // cols = W_r^T (ckk x cin) * x_n (cin x HW)
    detail::gemm_at(w.value().data(),
                    x.value().data() + n0 * cin * in_plane, cols.data(), ckk,
                    cin, static_cast<int>(in_plane), false);
    real* on = out.data() + static_cast<std::size_t>(n0) * cout * out_plane;
    scatter(cols.data(), on);
    for (int co = 0; co < cout; ++co) {
      const real bias = b.value()[co];
      real* oc = on + static_cast<std::size_t>(co) * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) oc[i] += bias;
    }
  }

  auto n = make_node(std::move(out),
                     x.needs_grad() || w.needs_grad() || b.needs_grad(),
                     {x.node(), w.node(), b.node()});
  if (n->needs_grad) {
    NodeRef px = x.node(), pw = w.node(), pb = b.node();
    n->backprop = [px, pw, pb, gather, N, cin, cout, ckk, in_plane,
                   out_plane](Node& self) {
      std::vector<real> dcols(static_cast<std::size_t>(ckk) * in_plane);
      for (int n0 = 0; n0 < N; ++n0) {
        const real* gn =
            self.grad.data() + static_cast<std::size_t>(n0) * cout * out_plane;
        gather(gn, dcols.data());
        if (px->needs_grad)  // dX = W_r * D
          detail::gemm(pw->value.data(), dcols.data(),
                       px->grad_buf().data() + n0 * cin * in_plane, cin, ckk,
                       static_cast<int>(in_plane), true);
        if (pw->needs_grad)  // dW_r = X * D^T
          detail::gemm_bt(px->value.data() + n0 * cin * in_plane, dcols.data(),
                          pw->grad_buf().data(), cin,
                          static_cast<int>(in_plane), ckk, true);
        if (pb->needs_grad) {
          auto& gb = pb->grad_buf();
          for (int co = 0; co < cout; ++co) {
            const real* gc = gn + static_cast<std::size_t>(co) * out_plane;
            real s = 0;
            for (std::size_t i = 0; i < out_plane; ++i) s += gc[i];
            gb[co] += s;
          }
        }
      }
    };
  }
  return Var(n);
}

// 2x2 max pooling with stride 2; input extents must be even.
inline Var maxpool2(const Var& x) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2)
    throw ShapeError("maxpool2: expects rank-4 with even spatial extents");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const auto& xv = x.value();
  std::size_t oi = 0;
  for (int n0 = 0; n0 < N; ++n0)
    for (int c = 0; c < C; ++c)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo, ++oi) {
          const std::size_t base = xv.idx4(n0, c, 2 * ho, 2 * wo);
          std::size_t best = base;
          real bv = xv[base];
          const std::size_t cands[3] = {base + 1, base + W, base + W + 1};
          for (std::size_t k : cands)
            if (xv[k] > bv) {
              bv = xv[k];
              best = k;
            }
          out[oi] = bv;
          (*argmax)[oi] = static_cast<std::uint32_t>(
              best - xv.idx4(n0, c, 0, 0));
        }
  auto n = make_node(std::move(out), x.needs_grad(), {x.node()});
  if (n->needs_grad) {
    NodeRef px = x.node();
    const std::size_t in_plane = static_cast<std::size_t>(H) * W;
    const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
    n->backprop = [px, argmax, N, C, in_plane, out_plane](Node& self) {
      auto& gb = px->grad_buf();
      std::size_t oi = 0;
      for (int nc = 0; nc < N * C; ++nc) {
        real* gchan = gb.data() + static_cast<std::size_t>(nc) * in_plane;
        for (std::size_t i = 0; i < out_plane; ++i, ++oi)
          gchan[(*argmax)[oi]] += self.grad[oi];
      }
    };
  }
  return Var(n);
}

}  // namespace xmodal
