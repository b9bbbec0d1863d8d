#pragma once

#include "xmodal/image.hpp"
#include "xmodal/metrics.hpp"

namespace xmodal {

// Free-form deformation on a uniform cubic B-spline control lattice. The
// lattice carries a one-point margin ring beyond the image on every side so
// boundary pixels get full 4x4 support.

struct DeformationField {
  int h = 0, w = 0;   // image extent the field is defined over
  real spacing = 8;   // control spacing in pixels
  Tensor d;           // {2, gh, gw} control displacements: dy then dx

  static int grid_extent(int pixels, real spacing) {
    return static_cast<int>(std::floor((pixels - 1) / spacing)) + 4;
  }

  static DeformationField zero(int h, int w, real spacing) {
    DeformationField f;
    f.h = h;
    f.w = w;
    f.spacing = spacing;
    f.d = Tensor({2, grid_extent(h, spacing), grid_extent(w, spacing)});
    return f;
  }

  // lattice site index c maps to pixel position (c - 1) * spacing
  real site_pos(int c) const { return (c - 1) * spacing; }
};

namespace bspline {

inline void weights(real u, real* b) {
  const real v = 1 - u;
  b[0] = v * v * v / 6;
  b[1] = (3 * u * u * u - 6 * u * u + 4) / 6;
  b[2] = (-3 * u * u * u + 3 * u * u + 3 * u + 1) / 6;
  b[3] = u * u * u / 6;
}

inline void dweights(real u, real* b) {
  const real v = 1 - u;
  b[0] = -v * v / 2;
  b[1] = (3 * u * u - 4 * u) / 2;
  b[2] = (-3 * u * u + 2 * u + 1) / 2;
  b[3] = u * u / 2;
}

}  // namespace bspline

// Displacement at a continuous image position (supports any point inside the
// image; callers clamp beforehand if needed).
inline void displacement_at(const DeformationField& f, real y, real x,
                            real* dy, real* dx) {
  const real ty = y / f.spacing, tx = x / f.spacing;
  const int iy = static_cast<int>(std::floor(ty));
  const int ix = static_cast<int>(std::floor(tx));
  real by[4], bx[4];
  bspline::weights(ty - iy, by);
  bspline::weights(tx - ix, bx);
  const int gh = f.d.dim(1), gw = f.d.dim(2);
  real ay = 0, ax = 0;
  for (int l = 0; l < 4; ++l) {
    const int cy = std::clamp(iy + l, 0, gh - 1);
    for (int m = 0; m < 4; ++m) {
      const int cx = std::clamp(ix + m, 0, gw - 1);
      const real wlm = by[l] * bx[m];
      ay += wlm * f.d.at3(0, cy, cx);
      ax += wlm * f.d.at3(1, cy, cx);
    }
  }
  *dy = ay;
  *dx = ax;
}

inline Tensor dense_displacement(const DeformationField& f) {
  Tensor out({2, f.h, f.w});
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      real dy, dx;
      displacement_at(f, y, x, &dy, &dx);
      out.at3(0, y, x) = dy;
      out.at3(1, y, x) = dx;
    }
  return out;
}

// Analytic spatial Jacobian of the displacement at a pixel.
inline void displacement_jacobian(const DeformationField& f, int y, int x,
                                  real* dyy, real* dyx, real* dxy, real* dxx) {
  const real ty = y / f.spacing, tx = x / f.spacing;
  const int iy = static_cast<int>(std::floor(ty));
  const int ix = static_cast<int>(std::floor(tx));
  real by[4], bx[4], dby[4], dbx[4];
  bspline::weights(ty - iy, by);
  bspline::weights(tx - ix, bx);
  bspline::dweights(ty - iy, dby);
  bspline::dweights(tx - ix, dbx);
  const int gh = f.d.dim(1), gw = f.d.dim(2);
  real ryy = 0, ryx = 0, rxy = 0, rxx = 0;
  for (int l = 0; l < 4; ++l) {
    const int cy = std::clamp(iy + l, 0, gh - 1);
    for (int m = 0; m < 4; ++m) {
      const int cx = std::clamp(ix + m, 0, gw - 1);
      const real vy = f.d.at3(0, cy, cx), vx = f.d.at3(1, cy, cx);
      const real wy = dby[l] * bx[m] / f.spacing;  // d/dy
      const real wx = by[l] * dbx[m] / f.spacing;  // d/dx
      ryy += wy * vy;
      ryx += wx * vy;
      rxy += wy * vx;
      rxx += wx * vx;
    }
  }
  *dyy = ryy;
  *dyx = ryx;
  *dxy = rxy;
  *dxx = rxx;
}

// mean |det J - 1| of the dense transform, clipped to [0,1]. Identity gives
// exactly zero; larger means the registration needed more deformation.
inline real deformation_score(const DeformationField& f) {
  real acc = 0;
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      real dyy, dyx, dxy, dxx;
      displacement_jacobian(f, y, x, &dyy, &dyx, &dxy, &dxx);
      const real det = (1 + dyy) * (1 + dxx) - dyx * dxy;
      if (!std::isfinite(det))
        throw std::invalid_argument("deformation_score: degenerate field");
      acc += std::abs(det - 1);
    }
  return std::clamp(acc / static_cast<real>(f.h * f.w), real(0), real(1));
}

inline Tensor warp(const Tensor& moving, const DeformationField& f) {
  require_shape(moving, {1, 1, f.h, f.w}, "warp");
  Tensor out({1, 1, f.h, f.w});
  for (int y = 0; y < f.h; ++y)
    for (int x = 0; x < f.w; ++x) {
      real dy, dx;
      displacement_at(f, y, x, &dy, &dx);
      out.at4(0, 0, y, x) = bilinear_at(moving, y + dy, x + dx);
    }
  return out;
}

struct FfdOptions {
  real spacing = 8;   // finest-level control spacing, px
  int iters = 50;     // gradient steps per level
  int levels = 2;     // coarse-to-fine, halving spacing upward
  real tol = 1e-9;    // stop when an accepted step improves less than this
};

struct FfdResult {
  DeformationField field;
  real initial_mse = 0, final_mse = 0;
  int iters_used = 0;
  bool converged = false;  // false reports non-convergence, with residual
};

namespace detail {

// bilinear sample plus its derivative wrt the sample coordinates; clamped
// coordinates have zero outward derivative
inline void sample_grad(const Tensor& img, real y, real x, real* val,
                        real* gy, real* gx) {
  const int H = img.dim(2), W = img.dim(3);
  const bool in_y = y > 0 && y < H - 1, in_x = x > 0 && x < W - 1;
  const real cy = std::clamp(y, real(0), real(H - 1));
  const real cx = std::clamp(x, real(0), real(W - 1));
  const int y0 = std::min(static_cast<int>(cy), H - 2);
  const int x0 = std::min(static_cast<int>(cx), W - 2);
  const real fy = cy - y0, fx = cx - x0;
  const real v00 = img.at4(0, 0, y0, x0), v01 = img.at4(0, 0, y0, x0 + 1);
  const real v10 = img.at4(0, 0, y0 + 1, x0),
             v11 = img.at4(0, 0, y0 + 1, x0 + 1);
  *val = v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx +
         v10 * fy * (1 - fx) + v11 * fy * fx;
  *gy = in_y ? (v10 - v00) * (1 - fx) + (v11 - v01) * fx : real(0);
  *gx = in_x ? (v01 - v00) * (1 - fy) + (v11 - v10) * fy : real(0);
}

inline real objective_and_gradient(const Tensor& moving, const Tensor& fixed,
                                   const DeformationField& f, Tensor* grad) {
  const int H = f.h, W = f.w;
  const real inv = 1.0 / static_cast<real>(H * W);
  if (grad) *grad = Tensor(f.d.shape());
  const int gh = f.d.dim(1), gw = f.d.dim(2);
  real acc = 0;
  for (int y = 0; y < H; ++y) {
    const real ty = y / f.spacing;
    const int iy = static_cast<int>(std::floor(ty));
    real by[4];
    bspline::weights(ty - iy, by);
    for (int x = 0; x < W; ++x) {
      const real tx = x / f.spacing;
      const int ix = static_cast<int>(std::floor(tx));
      real bx[4];
      bspline::weights(tx - ix, bx);
      real dy = 0, dx = 0;
      for (int l = 0; l < 4; ++l) {
        const int cy = std::clamp(iy + l, 0, gh - 1);
        for (int m = 0; m < 4; ++m) {
          const int cx = std::clamp(ix + m, 0, gw - 1);
          dy += by[l] * bx[m] * f.d.at3(0, cy, cx);
          dx += by[l] * bx[m] * f.d.at3(1, cy, cx);
        }
      }
      real v, gy, gx;
      sample_grad(moving, y + dy, x + dx, &v, &gy, &gx);
      const real r = v - fixed.at4(0, 0, y, x);
      acc += r * r;
      if (grad) {
        const real cy_coef = 2 * inv * r * gy, cx_coef = 2 * inv * r * gx;
        for (int l = 0; l < 4; ++l) {
          const int cy = std::clamp(iy + l, 0, gh - 1);
          for (int m = 0; m < 4; ++m) {
            const int cx = std::clamp(ix + m, 0, gw - 1);
            const real wlm = by[l] * bx[m];
            grad->at3(0, cy, cx) += wlm * cy_coef;
            grad->at3(1, cy, cx) += wlm * cx_coef;
          }
        }
      }
    }
  }
  return acc * inv;
}

}  // namespace detail

// Gradient descent with a backtracking line search on the mean-squared
// intensity difference, run coarse to fine over a halving control spacing.
inline FfdResult ffd_register(const Tensor& moving, const Tensor& fixed,
                              const FfdOptions& opt = {}) {
  require_same_shape(moving, fixed, "ffd_register");
  if (moving.shape().size() != 4 || moving.dim(0) != 1 || moving.dim(1) != 1)
    throw ShapeError("ffd_register: expects {1,1,H,W} images");
  const int H = moving.dim(2), W = moving.dim(3);

  FfdResult res;
  res.initial_mse = mse(moving, fixed);

  DeformationField field;
  for (int level = opt.levels - 1; level >= 0; --level) {
    const real spacing = opt.spacing * std::pow(2.0, level);
    DeformationField next = DeformationField::zero(H, W, spacing);
    if (field.d.numel() > 0) {
      // seed the refined lattice from the coarse solution at its sites
      const int gh = next.d.dim(1), gw = next.d.dim(2);
      for (int cy = 0; cy < gh; ++cy)
        for (int cx = 0; cx < gw; ++cx) {
          const real py = std::clamp(next.site_pos(cy), real(0), real(H - 1));
          const real px = std::clamp(next.site_pos(cx), real(0), real(W - 1));
          real dy, dx;
          displacement_at(field, py, px, &dy, &dx);
          next.d.at3(0, cy, cx) = dy;
          next.d.at3(1, cy, cx) = dx;
        }
    }
    field = std::move(next);

    real alpha = 1.0;
    real e = detail::objective_and_gradient(moving, fixed, field, nullptr);
    for (int it = 0; it < opt.iters; ++it) {
      Tensor grad;
      e = detail::objective_and_gradient(moving, fixed, field, &grad);
      real gnorm2 = 0;
      for (std::size_t i = 0; i < grad.numel(); ++i)
        gnorm2 += grad[i] * grad[i];
      if (gnorm2 == 0) {
        res.converged = true;
        break;
      }
      // backtracking with a sufficient-decrease condition
      alpha = std::min(alpha * 2, 1e4);
      bool accepted = false;
      for (int bt = 0; bt < 30; ++bt) {
        Tensor trial = field.d;
        for (std::size_t i = 0; i < trial.numel(); ++i)
          trial[i] -= alpha * grad[i];
        DeformationField probe = field;
        probe.d = std::move(trial);
        const real et =
            detail::objective_and_gradient(moving, fixed, probe, nullptr);
        if (et <= e - 1e-4 * alpha * gnorm2) {
          field = std::move(probe);
          accepted = true;
          res.converged = (e - et) < opt.tol;
          e = et;
          break;
        }
        alpha *= 0.5;
      }
      ++res.iters_used;
      if (!accepted || res.converged) {
        res.converged = true;
        break;
      }
    }
  }
  res.field = std::move(field);
  res.final_mse = detail::objective_and_gradient(moving, fixed, res.field,
                                                 nullptr);
  return res;
}

}  // namespace xmodal
