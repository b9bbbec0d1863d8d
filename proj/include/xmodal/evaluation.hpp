#pragma once

#include <functional>

#include "xmodal/ffd.hpp"
#include "xmodal/inference.hpp"
#include "xmodal/metrics.hpp"

namespace xmodal {

// ---- aggregate statistics ----

struct MetricStats {
  real mean = 0, stddev = 0;  // sample standard deviation (n-1)
  int n = 0;
};

inline MetricStats summarize(const std::vector<real>& xs) {
  MetricStats s;
  s.n = static_cast<int>(xs.size());
  if (s.n == 0) return s;
  for (const real v : xs) s.mean += v;
  s.mean /= s.n;
  if (s.n > 1) {
    real acc = 0;
    for (const real v : xs) acc += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(acc / (s.n - 1));
  }
  return s;
}

// One-sided paired sign test: p-value for "a is systematically below b",
// ties dropped, exact binomial tail at n up to a few hundred.
inline real sign_test_p(const std::vector<real>& a, const std::vector<real>& b) {
  if (a.size() != b.size())
    throw ShapeError("sign_test_p: length mismatch");
  int n = 0, wins = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    ++n;
    if (a[i] < b[i]) ++wins;
  }
  if (n == 0) return 1.0;
  real p = 0;
  for (int k = wins; k <= n; ++k) {
    const real logc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                      std::lgamma(n - k + 1.0);
    p += std::exp(logc - n * std::log(2.0));
  }
  return std::min(p, real(1));
}

// ---- pattern preservation ----

struct PatternConfig {
  int count = 3;      // squares per slice
  int size = 8;       // square side, px
  int cell = 2;       // checkerboard cell inside the square, px
  real lo = 0.1, hi = 0.9;
  std::uint64_t seed = 20;
};

// Stamps checkerboard squares into a copy of a single-channel slice at
// positions derived from (seed, ordinal); the central half of the image is
// used so the squares land on fan content. `mask` marks stamped pixels.
inline Tensor insert_patterns(const Tensor& slice, const PatternConfig& cfg,
                              int ordinal, Tensor* mask = nullptr) {
  if (slice.shape().size() != 4 || slice.dim(0) != 1 || slice.dim(1) != 1)
    throw ShapeError("insert_patterns: expects {1,1,H,W}");
  const int H = slice.dim(2), W = slice.dim(3);
  if (cfg.size > H / 2 || cfg.size > W / 2 || cfg.size < cfg.cell)
    throw ConfigError("insert_patterns: square does not fit the image");
  Tensor out = slice;
  if (mask) *mask = Tensor({1, 1, H, W});
  auto rng = make_rng(cfg.seed, "pattern", static_cast<std::uint64_t>(ordinal));
  std::uniform_int_distribution<int> ry(H / 4, 3 * H / 4 - cfg.size);
  std::uniform_int_distribution<int> rx(W / 4, 3 * W / 4 - cfg.size);
  for (int s = 0; s < cfg.count; ++s) {
    const int y0 = ry(rng), x0 = rx(rng);
    for (int y = 0; y < cfg.size; ++y)
      for (int x = 0; x < cfg.size; ++x) {
        const bool odd = ((y / cfg.cell) + (x / cfg.cell)) % 2 != 0;
        out.at4(0, 0, y0 + y, x0 + x) = odd ? cfg.hi : cfg.lo;
        if (mask) mask->at4(0, 0, y0 + y, x0 + x) = 1;
      }
  }
  return out;
}

// PSNR over the masked region after a least-squares affine intensity map of
// the output onto the reference, so a modality-appropriate contrast change
// does not count against pattern survival. A flat output still scores low:
// the fit collapses to the region mean and the checkerboard variance remains.
inline real masked_affine_psnr(const Tensor& reference, const Tensor& output,
                               const Tensor& mask) {
  require_same_shape(reference, output, "masked_affine_psnr");
  require_same_shape(reference, mask, "masked_affine_psnr mask");
  std::vector<real> u, v;
  for (std::size_t i = 0; i < mask.numel(); ++i)
    if (mask[i] > 0.5) {
      u.push_back(reference[i]);
      v.push_back(output[i]);
    }
  if (u.empty()) throw ConfigError("masked_affine_psnr: empty mask");
  const auto n = static_cast<real>(u.size());
  real mu = 0, mv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= n;
  mv /= n;
  real cov = 0, var_v = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cov += (v[i] - mv) * (u[i] - mu);
    var_v += (v[i] - mv) * (v[i] - mv);
  }
  const real a = var_v > 1e-12 ? cov / var_v : real(0);
  const real b = mu - a * mv;
  real m = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const real r = a * v[i] + b - u[i];
    m += r * r;
  }
  m /= n;
  if (m <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10 * std::log10(1.0 / m));
}

// Region PSNR per slice for an arbitrary single-slice synthesis function
// (used by the oracle fixtures: a copy model must score the cap, a constant
// model must score low).
inline std::vector<real> pattern_preservation(
    const std::function<Tensor(const Tensor&)>& synth,
    const std::vector<Tensor>& slices, const PatternConfig& cfg) {
  std::vector<real> scores;
  scores.reserve(slices.size());
  for (std::size_t k = 0; k < slices.size(); ++k) {
    Tensor mask;
    const Tensor patterned =
        insert_patterns(slices[k], cfg, static_cast<int>(k), &mask);
    scores.push_back(masked_affine_psnr(patterned, synth(patterned), mask));
  }
  return scores;
}

// Same protocol through a checkpointed model, with neighbour triplets
// assembled from the patterned volume so the stamped squares are what the
// network actually sees.
inline std::vector<real> pattern_preservation_volume(
    const InferenceModel& m, const std::vector<Tensor>& slices,
    const PatternConfig& cfg) {
  std::vector<Tensor> patterned, masks;
  patterned.reserve(slices.size());
  masks.reserve(slices.size());
  for (std::size_t k = 0; k < slices.size(); ++k) {
    Tensor mask;
    patterned.push_back(
        insert_patterns(slices[k], cfg, static_cast<int>(k), &mask));
    masks.push_back(std::move(mask));
  }
  const auto synth = m.synthesize_volume(patterned);
  std::vector<real> scores;
  scores.reserve(slices.size());
  for (std::size_t k = 0; k < slices.size(); ++k)
    scores.push_back(masked_affine_psnr(patterned[k], synth[k], masks[k]));
  return scores;
}

// ---- paired evaluation report ----

inline constexpr const char* kDeformationNote =
    "deformation_score = mean |det J - 1|, clipped to [0,1]";

struct EvalRow {
  std::string volume;
  int slice = 0;
  real psnr_db = 0, ssim_val = 0, deformation = 0, pattern_psnr_db = 0;
};

struct EvalReport {
  std::string config_json;  // training config echo from the checkpoint
  std::vector<EvalRow> rows;

  std::vector<real> column(real EvalRow::* field) const {
    std::vector<real> xs;
    xs.reserve(rows.size());
    for (const auto& r : rows) xs.push_back(r.*field);
    return xs;
  }
  MetricStats psnr_stats() const { return summarize(column(&EvalRow::psnr_db)); }
  MetricStats ssim_stats() const {
    return summarize(column(&EvalRow::ssim_val));
  }
  MetricStats deformation_stats() const {
    return summarize(column(&EvalRow::deformation));
  }
  MetricStats pattern_stats() const {
    return summarize(column(&EvalRow::pattern_psnr_db));
  }

  std::string csv() const {
    std::string out = std::string("# ") + kDeformationNote + "\n";
    out += "volume,slice,psnr,ssim,deformation,pattern_psnr\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%.10g,%.10g\n",
                    r.volume.c_str(), r.slice, r.psnr_db, r.ssim_val,
                    r.deformation, r.pattern_psnr_db);
      out += buf;
    }
    return out;
  }

  Json summary() const {
    auto stat = [](const MetricStats& s) {
      Json j;
      j["mean"] = s.mean;
      j["n"] = s.n;
      j["std"] = s.stddev;
      return j;
    };
    Json j;
    j["config"] =
        config_json.empty() ? Json() : Json::parse(config_json);
    j["deformation_note"] = kDeformationNote;
    Json m;
    m["deformation"] = stat(deformation_stats());
    m["pattern_psnr"] = stat(pattern_stats());
    m["psnr"] = stat(psnr_stats());
    m["ssim"] = stat(ssim_stats());
    j["metrics"] = std::move(m);
    j["slices"] = static_cast<int>(rows.size());
    return j;
  }
};

struct PairedEvalOptions {
  int max_slices = 0;              // per volume; 0 keeps every slice
  bool with_pattern = true;
  bool register_before_ssim = false;  // phantom pairs are already aligned
  FfdOptions ffd;
  PatternConfig pattern;
};

// Runs the held-out paired volumes through the model: synthesis quality
// (PSNR/SSIM vs the true counterpart), registration effort (deformation
// score of the field aligning the synthesis to the truth) and pattern
// survival, one row per evaluated slice.
inline EvalReport paired_eval(const InferenceModel& m, const Dataset& ds,
                              const PairedEvalOptions& opt = {}) {
  EvalReport rep;
  rep.config_json = m.config().to_json().dump();
  const int size = m.image_size();

  for (const auto& v : ds.volumes()) {
    if (v.role != Role::kPairedEval || v.modality != Modality::kUs) continue;
    const VolumeInfo* mr = ds.find(v.counterpart);
    if (!mr || mr->modality != Modality::kMr)
      throw ConfigError("paired_eval: missing MR counterpart for " + v.id);

    std::vector<Tensor> us(v.slices), truth(v.slices);
    for (int k = 0; k < v.slices; ++k) {
      us[k] = resize_area(ds.load_slice(v, k), size, size);
      truth[k] = resize_area(ds.load_slice(*mr, k), size, size);
    }
    const auto synth = m.synthesize_volume(us);
    std::vector<real> pattern_scores;
    if (opt.with_pattern)
      pattern_scores = pattern_preservation_volume(m, us, opt.pattern);

    std::vector<int> keep;
    if (opt.max_slices <= 0 || opt.max_slices >= v.slices) {
      for (int k = 0; k < v.slices; ++k) keep.push_back(k);
    } else {
      // evenly spaced, deterministic subsample
      for (int i = 0; i < opt.max_slices; ++i)
        keep.push_back(i * v.slices / opt.max_slices);
    }

    for (const int k : keep) {
      EvalRow row;
      row.volume = v.id;
      row.slice = k;
      const FfdResult reg = ffd_register(synth[k], truth[k], opt.ffd);
      row.deformation = deformation_score(reg.field);
      const Tensor& compared =
          opt.register_before_ssim ? warp(synth[k], reg.field) : synth[k];
      row.psnr_db = psnr(compared, truth[k]);
      row.ssim_val = ssim(compared, truth[k]);
      if (opt.with_pattern) row.pattern_psnr_db = pattern_scores[k];
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

// ---- feature and attention exports ----

inline int grid_cols(int channels) {
  const int want =
      static_cast<int>(std::ceil(std::sqrt(static_cast<double>(channels))));
  for (int d = want; d <= channels; ++d)
    if (channels % d == 0) return d;
  return channels;
}

namespace detail {

inline void normalize_map(Tensor& m) {
  real lo = m[0], hi = m[0];
  for (std::size_t i = 0; i < m.numel(); ++i) {
    lo = std::min(lo, m[i]);
    hi = std::max(hi, m[i]);
  }
  if (hi - lo < 1e-12) {
    for (auto& v : m.vec()) v = 0;  // flat map stays uniform
    return;
  }
  for (auto& v : m.vec()) v = (v - lo) / (hi - lo);
}

}  // namespace detail

// Tiles per-channel maps into one image, each map normalised to [0,1] on its
// own, separated by one-pixel white rules. Rows x cols follows the smallest
// column count at least ceil(sqrt C) that divides C (48 -> 6x8, 24 -> 4x6).
inline Tensor feature_grid(const Tensor& maps) {
  if (maps.shape().size() != 4 || maps.dim(0) != 1)
    throw ShapeError("feature_grid: expects {1,C,h,w}");
  const int C = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  const int cols = grid_cols(C), grid_rows = C / cols;
  Tensor out({1, 1, grid_rows * h + grid_rows - 1, cols * w + cols - 1});
  for (auto& v : out.vec()) v = 1;
  for (int c = 0; c < C; ++c) {
    Tensor m({1, 1, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) m.at4(0, 0, y, x) = maps.at4(0, c, y, x);
    detail::normalize_map(m);
    const int oy = (c / cols) * (h + 1), ox = (c % cols) * (w + 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at4(0, 0, oy + y, ox + x) = m.at4(0, 0, y, x);
  }
  return out;
}

struct FeatureExport {
  fs::path latent_us;        // source-encoder bottleneck grid
  fs::path latent_mr;        // target-encoder bottleneck grid on the synthesis
  fs::path attention_source; // how much each location is consulted
  fs::path attention_peak;   // attention concentration per output location
};

inline void write_gray_png(const fs::path& path, const Tensor& img) {
  png::write_file(
      path, png::encode_gray8(png::quantize(img), img.dim(3), img.dim(2)));
}

// The affinity matrix has no channel axis; the two heat maps aggregate it
// over each spatial axis instead (consulted-source mass and per-output peak
// weight), both reshaped back to the feature plane and normalised.
inline FeatureExport export_feature_maps(const InferenceModel& m,
                                         const Tensor& us_slice,
                                         const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const SynthesisResult r = m.synthesize(us_slice);

  FeatureExport paths;
  paths.latent_us = out_dir / "latent_us.png";
  write_gray_png(paths.latent_us, feature_grid(r.latent));

  const EncoderOut back = m.model().enc_mr.forward(Var::constant(r.mr_image));
  paths.latent_mr = out_dir / "latent_mr.png";
  write_gray_png(paths.latent_mr, feature_grid(back.latent.value()));

  if (r.affinity.numel() > 0) {
    const int n = r.affinity.dim(1);
    const int side = static_cast<int>(std::lround(std::sqrt(n)));
    Tensor source({1, 1, side, side}), peak({1, 1, side, side});
    for (int j = 0; j < n; ++j) {
      real col = 0;
      for (int i = 0; i < n; ++i) col += r.affinity.at3(0, i, j);
      source[j] = col;
    }
    for (int i = 0; i < n; ++i) {
      real mx = 0;
      for (int j = 0; j < n; ++j) mx = std::max(mx, r.affinity.at3(0, i, j));
      peak[i] = mx;
    }
    detail::normalize_map(source);
    detail::normalize_map(peak);
    paths.attention_source = out_dir / "attention_source.png";
    paths.attention_peak = out_dir / "attention_peak.png";
    write_gray_png(paths.attention_source, source);
    write_gray_png(paths.attention_peak, peak);
  }
  return paths;
}

}  // namespace xmodal
