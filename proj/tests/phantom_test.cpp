#include <gtest/gtest.h>

#include <filesystem>

#include "xmodal/dataset.hpp"

namespace xmodal {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const char* tag) {
  const auto p = fs::temp_directory_path() /
                 (std::string("xmodal_") + tag + "_" +
                  std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Png, RoundTripIsExact) {
  Rng rng(1);
  std::vector<std::uint8_t> px(37 * 23);
  for (auto& v : px) v = static_cast<std::uint8_t>(rng() & 0xff);
  const auto bytes = png::encode_gray8(px, 37, 23);
  const auto img = png::decode_gray8(bytes);
  EXPECT_EQ(img.width, 37);
  EXPECT_EQ(img.height, 23);
  EXPECT_EQ(img.pixels, px);
}

TEST(Png, DecodesAllFilterTypes) {
  // Hand-build a 4x5 image whose five scanlines use filters 0..4 and check
  // the decoder reconstructs the intended pixels.
  const int W = 4, H = 5;
  std::vector<std::uint8_t> want(W * H);
  for (int i = 0; i < W * H; ++i) want[i] = static_cast<std::uint8_t>(7 * i + 3);

  std::string raw;
  auto px = [&](int y, int x) -> int {
    return (x < 0 || y < 0) ? 0 : want[y * W + x];
  };
  for (int y = 0; y < H; ++y) {
    const int filter = y % 5;
    raw.push_back(static_cast<char>(filter));
    for (int x = 0; x < W; ++x) {
      const int a = px(y, x - 1), b = px(y - 1, x), c = px(y - 1, x - 1);
      int v = px(y, x);
      switch (filter) {
        case 0: break;
        case 1: v -= a; break;
        case 2: v -= b; break;
        case 3: v -= (a + b) / 2; break;
        case 4: v -= png::detail::paeth(a, b, c); break;
      }
      raw.push_back(static_cast<char>(v & 0xff));
    }
  }
  uLongf bound = compressBound(raw.size());
  std::string comp(bound, '\0');
  ASSERT_EQ(compress2(reinterpret_cast<Bytef*>(comp.data()), &bound,
                      reinterpret_cast<const Bytef*>(raw.data()), raw.size(),
                      6),
            Z_OK);
  comp.resize(bound);
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  png::detail::put_be32(ihdr, W);
  png::detail::put_be32(ihdr, H);
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);
  png::detail::append_chunk(out, "IHDR", ihdr);
  png::detail::append_chunk(out, "IDAT", comp);
  png::detail::append_chunk(out, "IEND", "");

  const auto img = png::decode_gray8(out);
  EXPECT_EQ(img.pixels, want);
}

TEST(Png, RejectsNonGray) {
  auto bytes = png::encode_gray8(std::vector<std::uint8_t>(16, 0), 4, 4);
  bytes[25] = 2;  // color type byte inside IHDR
  EXPECT_THROW(png::decode_gray8(bytes), IoError);
}

TEST(ImageOps, ResizeAreaExactCases) {
  Tensor checker({1, 1, 2, 2}, {1, 0, 0, 1});
  Tensor down = resize_area(checker, 1, 1);
  EXPECT_NEAR(down[0], 0.5, 1e-12);

  Tensor row({1, 1, 1, 2}, {0, 1});
  Tensor up = resize_area(row, 1, 4);
  const real want[4] = {0, 0, 1, 1};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(up[i], want[i], 1e-12);

  Tensor c = Tensor::full({1, 1, 7, 5}, 0.37);
  Tensor r = resize_area(c, 3, 4);
  for (std::size_t i = 0; i < r.numel(); ++i) EXPECT_NEAR(r[i], 0.37, 1e-12);
}

TEST(ImageOps, GaussianBlurPreservesConstants) {
  Tensor c = Tensor::full({1, 1, 9, 9}, 0.7);
  Tensor b = gaussian_blur(c, 1.5);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_NEAR(b[i], 0.7, 1e-12);
}

TEST(Phantom, SliceScaleEndpoints) {
  EXPECT_NEAR(slice_scale(0, 160), 0.5, 1e-12);
  EXPECT_NEAR(slice_scale(159, 160), 1.0, 1e-12);
  EXPECT_LT(slice_scale(10, 160), slice_scale(11, 160));
}

TEST(Phantom, StructureGrowsMonotonically) {
  const Anatomy an = sample_anatomy(42);
  auto area = [&](int k) {
    int n = 0;
    for (int y = 0; y < 160; ++y)
      for (int x = 0; x < 160; ++x)
        if (label_at(an, k, 160, y, x) != TissueLabel::kBackground) ++n;
    return n;
  };
  int prev = area(0);
  EXPECT_GT(prev, 0);
  for (int k : {40, 80, 120, 159}) {
    const int a = area(k);
    EXPECT_GT(a, prev) << "k=" << k;
    prev = a;
  }
}

TEST(Phantom, AnatomyIsDeterministicAndValid) {
  const Anatomy a1 = sample_anatomy(7);
  const Anatomy a2 = sample_anatomy(7);
  EXPECT_EQ(a1.ventricles.size(), a2.ventricles.size());
  EXPECT_EQ(a1.cy, a2.cy);
  EXPECT_EQ(a1.theta, a2.theta);
  EXPECT_GE(a1.ventricles.size(), 2u);
  EXPECT_LE(a1.ventricles.size(), 4u);
  // every ventricle stays inside the skull interior at every slice: geometry
  // scales uniformly, so checking the unscaled frame suffices
  for (const auto& p : a1.ventricles) {
    const real rho = std::sqrt(p.cx * p.cx / (a1.a * a1.a) +
                               p.cy * p.cy / (a1.b * a1.b));
    EXPECT_LT(rho + std::max(p.a, p.b) / std::min(a1.a, a1.b), 0.88);
  }
}

TEST(Phantom, RegionMasksAgreeAcrossModalities) {
  // With appearance effects disabled, thresholding either rendering at a
  // level between background and tissue recovers exactly the same footprint.
  const Anatomy an = sample_anatomy(11);
  RenderOpts plain;
  plain.speckle = plain.shadow = plain.fan = plain.noise = plain.bias =
      plain.blur = false;
  const Tensor us = render_us(an, 80, 160, 160, 1, plain);
  const Tensor mr = render_mr(an, 80, 160, 160, 2, plain);
  // 0.07 sits between both background levels (0.06, 0.05) and the darkest
  // structure level (ventricle: 0.08 us, 0.12 mr)
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < us.numel(); ++i) {
    const bool a = us[i] > 0.07, b = mr[i] > 0.07;
    inter += (a && b);
    uni += (a || b);
  }
  ASSERT_GT(uni, 0);
  EXPECT_EQ(inter, uni);  // IoU exactly 1
}

TEST(Phantom, MrNoiseLevelInFlatTissue) {
  const Anatomy an = sample_anatomy(13);
  RenderOpts no_noise;
  no_noise.noise = false;
  no_noise.bias = false;
  RenderOpts with_noise = no_noise;
  with_noise.noise = true;
  const Tensor a = render_mr(an, 100, 160, 160, 5, no_noise);
  const Tensor b = render_mr(an, 100, 160, 160, 5, with_noise);
  // interior tissue only; keep clear of boundaries so the blur tails match
  std::vector<real> diff;
  for (int y = 0; y < 160; ++y)
    for (int x = 0; x < 160; ++x) {
      bool interior = true;
      for (int dy = -4; dy <= 4 && interior; ++dy)
        for (int dx = -4; dx <= 4 && interior; ++dx)
          interior = label_at(an, 100, 160, y + dy, x + dx) ==
                     TissueLabel::kTissue;
      if (interior)
        diff.push_back(b[static_cast<std::size_t>(y) * 160 + x] -
                       a[static_cast<std::size_t>(y) * 160 + x]);
    }
  ASSERT_GT(diff.size(), 500u);
  real mean = 0;
  for (real d : diff) mean += d;
  mean /= diff.size();
  real var = 0;
  for (real d : diff) var += (d - mean) * (d - mean);
  const real sd = std::sqrt(var / diff.size());
  EXPECT_NEAR(sd, 0.01, 0.002);
}

TEST(Phantom, AcousticShadowAttenuates) {
  const Anatomy an = sample_anatomy(17);
  RenderOpts off;
  off.speckle = off.noise = off.fan = false;
  off.shadow = false;
  RenderOpts on = off;
  on.shadow = true;
  const Tensor a = render_us(an, 120, 160, 160, 3, off);
  const Tensor b = render_us(an, 120, 160, 160, 3, on);
  real sum_ratio = 0;
  int n = 0;
  for (int y = 0; y < 160; ++y)
    for (int x = 0; x < 160; ++x)
      if (label_at(an, 120, 160, y, x) == TissueLabel::kTissue) {
        sum_ratio += b[static_cast<std::size_t>(y) * 160 + x] /
                     std::max(a[static_cast<std::size_t>(y) * 160 + x],
                              real(1e-9));
        ++n;
      }
  ASSERT_GT(n, 0);
  const real mean_ratio = sum_ratio / n;
  EXPECT_LT(mean_ratio, 0.95);  // interior tissue lies behind the skull cap
  EXPECT_GT(mean_ratio, 0.15);
}

TEST(Phantom, FanMasksCorners) {
  const Anatomy an = sample_anatomy(19);
  const Tensor us = render_us(an, 80, 160, 160, 4);
  EXPECT_NEAR(us.at4(0, 0, 159, 0), 0.02, 1e-9);
  EXPECT_NEAR(us.at4(0, 0, 159, 159), 0.02, 1e-9);
}

TEST(Phantom, SpeckleIsMultiplicative) {
  const Anatomy an = sample_anatomy(23);
  RenderOpts off;
  off.speckle = false;
  off.fan = off.shadow = false;
  RenderOpts on = off;
  on.speckle = true;
  const Tensor a = render_us(an, 80, 160, 160, 9, off);
  const Tensor b = render_us(an, 80, 160, 160, 9, on);
  std::vector<real> ratio;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] > 0.25 && b[i] < 1.0) ratio.push_back(b[i] / a[i]);
  ASSERT_GT(ratio.size(), 200u);
  real mean = 0;
  for (real r : ratio) mean += r;
  mean /= ratio.size();
  real var = 0;
  for (real r : ratio) var += (r - mean) * (r - mean);
  const real sd = std::sqrt(var / ratio.size());
  EXPECT_GT(sd, 0.1);
  EXPECT_LT(sd, 0.6);
  EXPECT_NEAR(mean, 1.0, 0.15);
}

TEST(Phantom, RenderingIsDeterministic) {
  const Anatomy an = sample_anatomy(29);
  const Tensor a = render_us(an, 33, 160, 96, 1234);
  const Tensor b = render_us(an, 33, 160, 96, 1234);
  EXPECT_EQ(a.checksum(), b.checksum());
  const Tensor c = render_us(an, 33, 160, 96, 1235);
  EXPECT_NE(a.checksum(), c.checksum());
}

class DatasetRoundTrip : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(temp_dir("dataset"));
    GenConfig cfg;
    cfg.us_volumes = 2;
    cfg.mr_volumes = 1;
    cfg.paired_volumes = 1;
    cfg.n_slices = 6;
    cfg.image_size = 48;
    cfg.seed = 7;
    cfg.out_dir = *dir_;
    report_ = new GenReport(generate_dataset(cfg));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
    delete report_;
  }
  static fs::path* dir_;
  static GenReport* report_;
};
fs::path* DatasetRoundTrip::dir_ = nullptr;
GenReport* DatasetRoundTrip::report_ = nullptr;

TEST_F(DatasetRoundTrip, WritesExpectedLayout) {
  EXPECT_EQ(report_->volumes_written, 5);  // 2 us + 1 mr + paired us/mr
  EXPECT_EQ(report_->slices_written, 5 * 6);
  EXPECT_TRUE(fs::exists(*dir_ / "us_000" / "000.png"));
  EXPECT_TRUE(fs::exists(*dir_ / "us_001" / "005.png"));
  EXPECT_TRUE(fs::exists(*dir_ / "mr_000" / "003.png"));
  EXPECT_TRUE(fs::exists(*dir_ / "pair_000_us" / "000.png"));
  EXPECT_TRUE(fs::exists(*dir_ / "pair_000_mr" / "000.png"));
}

TEST_F(DatasetRoundTrip, ManifestLoadsAndVerifies) {
  const Dataset ds = Dataset::open(*dir_);
  EXPECT_EQ(ds.image_size(), 48);
  EXPECT_EQ(ds.n_slices(), 6);
  EXPECT_EQ(ds.seed(), 7u);
  ASSERT_EQ(ds.volumes().size(), 5u);
  const auto* pu = ds.find("pair_000_us");
  ASSERT_NE(pu, nullptr);
  EXPECT_EQ(pu->role, Role::kPairedEval);
  EXPECT_EQ(pu->counterpart, "pair_000_mr");
  const auto* pm = ds.find("pair_000_mr");
  ASSERT_NE(pm, nullptr);
  EXPECT_EQ(pm->anatomy_seed, pu->anatomy_seed);
  EXPECT_NO_THROW(ds.verify_checksums());
  const Tensor img = ds.load_slice(*ds.find("us_000"), 0);
  EXPECT_EQ(img.shape(), (std::vector<int>{1, 1, 48, 48}));
  EXPECT_GE(img.min(), 0.0);
  EXPECT_LE(img.max(), 1.0);
}

TEST_F(DatasetRoundTrip, ChecksumCatchesCorruption) {
  const auto victim = *dir_ / "mr_000" / "002.png";
  auto bytes = png::read_file(victim);
  const auto orig = bytes;
  bytes[bytes.size() / 2] ^= 0x40;
  png::write_file(victim, bytes);
  const Dataset ds = Dataset::open(*dir_);
  EXPECT_THROW(ds.verify_checksums(), IoError);
  png::write_file(victim, orig);
}

TEST_F(DatasetRoundTrip, RegenerationIsByteIdentical) {
  const auto other = temp_dir("dataset_again");
  GenConfig cfg;
  cfg.us_volumes = 2;
  cfg.mr_volumes = 1;
  cfg.paired_volumes = 1;
  cfg.n_slices = 6;
  cfg.image_size = 48;
  cfg.seed = 7;
  cfg.out_dir = other;
  generate_dataset(cfg);
  EXPECT_EQ(png::read_file(*dir_ / "manifest.json"),
            png::read_file(other / "manifest.json"));
  EXPECT_EQ(png::read_file(*dir_ / "us_001" / "004.png"),
            png::read_file(other / "us_001" / "004.png"));
  fs::remove_all(other);
}

TEST_F(DatasetRoundTrip, UnknownManifestKeyRejected) {
  const auto other = temp_dir("dataset_badkey");
  fs::create_directories(other);
  auto m = Json::parse(png::read_file(*dir_ / "manifest.json"));
  m["surprise"] = 1;
  png::write_file(other / "manifest.json", m.dump(2));
  EXPECT_THROW(Dataset::open(other), ConfigError);
  fs::remove_all(other);
}

TEST_F(DatasetRoundTrip, TrainingSetPreloadsAndStacksNeighbors) {
  const Dataset ds = Dataset::open(*dir_);
  const TrainingSet us(ds, Modality::kUs, 16, /*with_neighbors=*/true);
  EXPECT_EQ(us.size(), 12u);  // 2 train volumes x 6 slices
  const Tensor b = us.batch({0, 5});
  EXPECT_EQ(b.shape(), (std::vector<int>{2, 3, 16, 16}));
  // k=0: previous neighbour clamps to the slice itself
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      EXPECT_EQ(b.at4(0, 0, y, x), b.at4(0, 1, y, x));
  // k=5 is a volume end: next neighbour clamps
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      EXPECT_EQ(b.at4(1, 2, y, x), b.at4(1, 1, y, x));
  const Tensor t = us.index_targets({0, 3});
  EXPECT_NEAR(t[0], 0.0, 1e-12);
  EXPECT_NEAR(t[1], 3.0 / 5.0, 1e-12);

  const TrainingSet mr(ds, Modality::kMr, 16, false);
  EXPECT_EQ(mr.size(), 6u);  // paired volumes are excluded from training
}

TEST(DatasetGuards, LeakageGuardAborts) {
  GenConfig cfg;
  cfg.us_volumes = 1;
  cfg.mr_volumes = 1;
  cfg.paired_volumes = 1;
  cfg.n_slices = 2;
  cfg.image_size = 32;
  cfg.seed = 3;
  cfg.out_dir = temp_dir("leak");
  cfg.us_seeds = {111};
  cfg.mr_seeds = {222};
  cfg.paired_seeds = {111};  // collides with a training anatomy
  EXPECT_THROW(generate_dataset(cfg), ConfigError);
  fs::remove_all(cfg.out_dir);
}

}  // namespace
}  // namespace xmodal
