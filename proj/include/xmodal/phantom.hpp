#pragma once

#include "xmodal/image.hpp"

namespace xmodal {

// Parametric cranial phantom. One Anatomy drives a whole volume: every slice
// k applies a monotone scale factor to the same structures, so cross-section
// size encodes the slice position along the scan axis. The same geometry is
// rendered under two very different appearance models (speckled fan-beam
// "ultrasound" and bias-field "MR"), which is what makes unpaired synthesis
// between the two modalities a meaningful exercise.

enum class TissueLabel : int {
  kBackground = 0,
  kSkull = 1,
  kTissue = 2,
  kVentricle = 3,
  kMidline = 4,
};

struct EllipsePart {
  real cy = 0, cx = 0;  // offset from skull centre, unscaled pixels
  real a = 0, b = 0;    // semi-axes, unscaled pixels
  real theta = 0;
};

struct Anatomy {
  std::uint64_t seed = 0;
  real cy = 80, cx = 80;
  real a = 57, b = 47;       // outer skull semi-axes at scale 1
  real theta = 0;
  real tissue_intensity = 0.5;  // MR tissue level
  std::vector<EllipsePart> ventricles;
};

inline real slice_scale(int k, int n_slices) {
  if (n_slices <= 1) return 1.0;
  return 0.5 + 0.5 * static_cast<real>(k) / static_cast<real>(n_slices - 1);
}

inline Anatomy sample_anatomy(std::uint64_t seed, int image_size = 160) {
  Rng rng = make_rng(seed, "anatomy");
  std::uniform_real_distribution<real> u01(0, 1);
  const real s = image_size / 160.0;

  Anatomy an;
  an.seed = seed;
  an.cy = (80 + 12 * (u01(rng) - 0.5)) * s;
  an.cx = (80 + 12 * (u01(rng) - 0.5)) * s;
  an.a = (52 + 10 * u01(rng)) * s;
  an.b = (42 + 10 * u01(rng)) * s;
  an.theta = 0.5 * (u01(rng) - 0.5);
  an.tissue_intensity = 0.35 + 0.3 * u01(rng);

  const int n_vent = 2 + static_cast<int>(u01(rng) * 3);  // 2..4
  for (int v = 0; v < n_vent; ++v) {
    // resample until the part sits well inside the skull interior
    for (int attempt = 0;; ++attempt) {
      EllipsePart p;
      p.cy = an.b * 0.55 * (u01(rng) * 2 - 1);
      p.cx = an.a * 0.55 * (u01(rng) * 2 - 1);
      p.a = (5 + 5 * u01(rng)) * s;
      p.b = (3 + 4 * u01(rng)) * s;
      p.theta = 3.14159 * (u01(rng) - 0.5);
      const real reach = std::max(p.a, p.b);
      const real rho = std::sqrt((p.cx * p.cx) / (an.a * an.a) +
                                 (p.cy * p.cy) / (an.b * an.b));
      const real margin = reach / std::min(an.a, an.b);
      if (rho + margin < 0.78) {
        an.ventricles.push_back(p);
        break;
      }
      if (attempt >= 100) {  // deterministic fallback: centre it
        p.cy = p.cx = 0;
        an.ventricles.push_back(p);
        break;
      }
    }
  }
  return an;
}

// Label of one point for slice k. Pure geometry; both renderers and the
// evaluation masks go through here, so the two modalities can never disagree
// about where a structure is.
inline TissueLabel label_at(const Anatomy& an, int k, int n_slices, real y,
                            real x) {
  const real s = slice_scale(k, n_slices);
  const real ct = std::cos(an.theta), st = std::sin(an.theta);
  const real dy = y - an.cy, dx = x - an.cx;
  // rotate into the skull frame, undo the slice scale
  const real rx = (ct * dx + st * dy) / s;
  const real ry = (-st * dx + ct * dy) / s;
  const real rho =
      std::sqrt((rx * rx) / (an.a * an.a) + (ry * ry) / (an.b * an.b));
  if (rho > 1.0) return TissueLabel::kBackground;
  if (rho > 0.88) return TissueLabel::kSkull;

  for (const auto& p : an.ventricles) {
    const real py = ry - p.cy, px = rx - p.cx;
    const real cp = std::cos(p.theta), sp = std::sin(p.theta);
    const real qx = cp * px + sp * py, qy = -sp * px + cp * py;
    if ((qx * qx) / (p.a * p.a) + (qy * qy) / (p.b * p.b) <= 1.0)
      return TissueLabel::kVentricle;
  }
  // midline: thin segment along the major axis through the centre
  if (std::abs(ry) < 1.2 / s && std::abs(rx) < 0.6 * an.a) {
    return TissueLabel::kMidline;
  }
  return TissueLabel::kTissue;
}

inline Tensor label_mask(const Anatomy& an, int k, int n_slices,
                         int image_size) {
  Tensor m({1, 1, image_size, image_size});
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x)
      m[static_cast<std::size_t>(y) * image_size + x] = static_cast<real>(
          static_cast<int>(label_at(an, k, n_slices, y, x)));
  return m;
}

struct RenderOpts {
  bool speckle = true;
  bool shadow = true;
  bool fan = true;
  bool noise = true;
  bool bias = true;
  bool blur = true;
};

namespace detail {

inline real us_base_level(TissueLabel l) {
  switch (l) {
    case TissueLabel::kBackground: return 0.06;
    case TissueLabel::kSkull: return 0.95;
    case TissueLabel::kTissue: return 0.32;
    case TissueLabel::kVentricle: return 0.08;
    case TissueLabel::kMidline: return 0.85;
  }
  return 0;
}

inline real mr_base_level(TissueLabel l, real tissue_intensity) {
  switch (l) {
    case TissueLabel::kBackground: return 0.05;
    case TissueLabel::kSkull: return 0.85;
    case TissueLabel::kTissue: return tissue_intensity;
    case TissueLabel::kVentricle: return 0.12;
    case TissueLabel::kMidline: return std::min(0.88, tissue_intensity + 0.25);
  }
  return 0;
}

}  // namespace detail

// Fan-beam speckled rendering. The transducer apex sits above the image; a
// bony (skull) path between apex and pixel attenuates everything behind it.
inline Tensor render_us(const Anatomy& an, int k, int n_slices, int image_size,
                        std::uint64_t noise_seed, const RenderOpts& opts = {}) {
  const int H = image_size, W = image_size;
  Tensor labels = label_mask(an, k, n_slices, image_size);
  Tensor img({1, 1, H, W});
  for (std::size_t i = 0; i < img.numel(); ++i)
    img[i] = detail::us_base_level(static_cast<TissueLabel>(
        static_cast<int>(labels[i])));

  if (opts.shadow) {
    const real apex_y = -0.35 * H, apex_x = 0.5 * W;
    const int steps = 96;
    Tensor shadowed(img.shape());
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const real len = std::hypot(y - apex_y, x - apex_x);
        const real step_len = len / steps;
        real bone_path = 0;
        for (int t = 1; t < steps; ++t) {
          const real sy = apex_y + (y - apex_y) * t / steps;
          const real sx = apex_x + (x - apex_x) * t / steps;
          if (sy < 0 || sy > H - 1 || sx < 0 || sx > W - 1) continue;
          const int ly = static_cast<int>(sy + 0.5);
          const int lx = static_cast<int>(sx + 0.5);
          if (static_cast<int>(labels[static_cast<std::size_t>(ly) * W + lx]) ==
              static_cast<int>(TissueLabel::kSkull))
            bone_path += step_len;
        }
        // do not let the skull shadow itself at its entry surface
        const real own = static_cast<int>(labels[static_cast<std::size_t>(y) * W + x]) ==
                                 static_cast<int>(TissueLabel::kSkull)
                             ? std::min(bone_path, real(4))
                             : real(0);
        const real atten = std::exp(-0.20 * std::max(real(0), bone_path - own));
        shadowed[static_cast<std::size_t>(y) * W + x] =
            img[static_cast<std::size_t>(y) * W + x] * atten;
      }
    img = std::move(shadowed);
  }

  if (opts.blur) img = gaussian_blur(img, 0.6);

  if (opts.speckle) {
    Rng rng(noise_seed);
    Tensor field = Tensor::randn(rng, {1, 1, H, W});
    field = gaussian_blur(field, 1.2);
    // blur shrinks the variance; restore unit scale before modulating
    real var = 0;
    for (std::size_t i = 0; i < field.numel(); ++i) var += field[i] * field[i];
    const real inv_std = 1.0 / std::sqrt(var / field.numel() + 1e-12);
    for (std::size_t i = 0; i < img.numel(); ++i)
      img[i] *= std::max(real(0), 1.0 + 0.35 * field[i] * inv_std);
  }

  if (opts.fan) {
    const real apex_y = -0.35 * H, apex_x = 0.5 * W;
    const real half_angle = 0.62;  // radians
    const real r_max = 1.35 * H;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const real ang = std::atan2(x - apex_x, y - apex_y);
        const real r = std::hypot(y - apex_y, x - apex_x);
        if (std::abs(ang) > half_angle || r > r_max)
          img[static_cast<std::size_t>(y) * W + x] = 0.02;
      }
  }

  return clamp01(std::move(img));
}

// Bias-field MR rendering. The quadratic bias is a per-volume property, so it
// is derived from the anatomy seed rather than the slice noise seed.
inline Tensor render_mr(const Anatomy& an, int k, int n_slices, int image_size,
                        std::uint64_t noise_seed, const RenderOpts& opts = {}) {
  const int H = image_size, W = image_size;
  Tensor labels = label_mask(an, k, n_slices, image_size);
  Tensor img({1, 1, H, W});
  for (std::size_t i = 0; i < img.numel(); ++i)
    img[i] = detail::mr_base_level(
        static_cast<TissueLabel>(static_cast<int>(labels[i])),
        an.tissue_intensity);

  if (opts.blur) img = gaussian_blur(img, 0.8);

  if (opts.bias) {
    Rng brng = make_rng(an.seed, "mr-bias");
    std::uniform_real_distribution<real> u(-0.08, 0.08);
    const real c0 = u(brng), c1 = u(brng), c2 = u(brng), c3 = u(brng),
               c4 = u(brng), c5 = u(brng);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const real v = 2.0 * y / (H - 1) - 1.0, u2 = 2.0 * x / (W - 1) - 1.0;
        const real beta =
            c0 + c1 * u2 + c2 * v + c3 * u2 * v + c4 * u2 * u2 + c5 * v * v;
        img[static_cast<std::size_t>(y) * W + x] *= (1.0 + beta);
      }
  }

  if (opts.noise) {
    Rng rng(noise_seed);
    std::normal_distribution<real> g(0.0, 0.01);
    for (auto& v : img.vec()) v += g(rng);
  }

  return clamp01(std::move(img));
}

inline std::uint64_t slice_noise_seed(std::uint64_t anatomy_seed,
                                      std::string_view modality, int k) {
  return derive_seed(anatomy_seed, modality, static_cast<std::uint64_t>(k));
}

}  // namespace xmodal
