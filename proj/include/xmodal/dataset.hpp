#pragma once

#include <zlib.h>

#include <filesystem>
#include <map>
#include <optional>

#include <json.hpp>

#include "xmodal/phantom.hpp"
#include "xmodal/png.hpp"

namespace xmodal {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr int kManifestSchema = 1;

enum class Modality { kUs, kMr };
enum class Role { kTrain, kPairedEval };

inline std::string to_string(Modality m) {
  return m == Modality::kUs ? "us" : "mr";
}
inline std::string to_string(Role r) {
  return r == Role::kTrain ? "train" : "paired_eval";
}

inline Modality modality_from(const std::string& s) {
  if (s == "us") return Modality::kUs;
  if (s == "mr") return Modality::kMr;
  throw ConfigError("unknown modality: " + s);
}
inline Role role_from(const std::string& s) {
  if (s == "train") return Role::kTrain;
  if (s == "paired_eval") return Role::kPairedEval;
  throw ConfigError("unknown volume role: " + s);
}

inline std::string crc32_hex(const std::string& bytes) {
  const auto c = ::crc32(0, reinterpret_cast<const Bytef*>(bytes.data()),
                         static_cast<uInt>(bytes.size()));
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08lx", static_cast<unsigned long>(c));
  return buf;
}

inline std::string slice_filename(int k) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d.png", k);
  return buf;
}

// ---- generation ----

struct GenConfig {
  int us_volumes = 2;
  int mr_volumes = 2;
  int paired_volumes = 1;
  int n_slices = 160;
  int image_size = 160;
  std::uint64_t seed = 0;
  fs::path out_dir;
  // Normally anatomy seeds are derived from `seed`; tests may pin them
  // explicitly to exercise the leakage guard.
  std::vector<std::uint64_t> us_seeds, mr_seeds, paired_seeds;
};

struct GenReport {
  fs::path manifest_path;
  int volumes_written = 0;
  int slices_written = 0;
};

namespace detail {

inline std::vector<std::uint64_t> anatomy_seeds(
    const std::vector<std::uint64_t>& pinned, std::uint64_t master,
    std::string_view tag, int count) {
  if (!pinned.empty()) {
    if (static_cast<int>(pinned.size()) != count)
      throw ConfigError("pinned anatomy seed list length mismatch");
    return pinned;
  }
  std::vector<std::uint64_t> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i)
    out.push_back(derive_seed(master, tag, static_cast<std::uint64_t>(i)));
  return out;
}

}  // namespace detail

// Writes one volume directory and returns its manifest entry.
inline Json write_volume(const fs::path& root, const std::string& id,
                         Modality mod, Role role, std::uint64_t anatomy_seed,
                         int n_slices, int image_size,
                         const std::string& counterpart = "") {
  const Anatomy an = sample_anatomy(anatomy_seed, image_size);
  fs::create_directories(root / id);
  Json checksums = Json::array();
  for (int k = 0; k < n_slices; ++k) {
    const auto noise = slice_noise_seed(anatomy_seed, to_string(mod), k);
    const Tensor img = mod == Modality::kUs
                           ? render_us(an, k, n_slices, image_size, noise)
                           : render_mr(an, k, n_slices, image_size, noise);
    const std::string bytes =
        png::encode_gray8(png::quantize(img), image_size, image_size);
    png::write_file(root / id / slice_filename(k), bytes);
    checksums.push_back(crc32_hex(bytes));
  }
  Json v;
  v["anatomy_seed"] = to_hex(anatomy_seed);
  if (!counterpart.empty()) v["counterpart"] = counterpart;
  v["id"] = id;
  v["modality"] = to_string(mod);
  v["role"] = to_string(role);
  v["slice_checksums"] = std::move(checksums);
  v["slices"] = n_slices;
  return v;
}

inline GenReport generate_dataset(const GenConfig& cfg) {
  if (cfg.us_volumes < 0 || cfg.mr_volumes < 0 || cfg.paired_volumes < 0 ||
      cfg.n_slices < 1 || cfg.image_size < 16)
    throw ConfigError("gen-data: invalid volume counts or sizes");

  const auto us_seeds = detail::anatomy_seeds(cfg.us_seeds, cfg.seed,
                                              "us-anatomy", cfg.us_volumes);
  const auto mr_seeds = detail::anatomy_seeds(cfg.mr_seeds, cfg.seed,
                                              "mr-anatomy", cfg.mr_volumes);
  const auto pair_seeds = detail::anatomy_seeds(
      cfg.paired_seeds, cfg.seed, "paired-anatomy", cfg.paired_volumes);

  // Held-out pairs must never share an anatomy with the training volumes;
  // a shared seed would leak evaluation geometry into training.
  for (const auto ps : pair_seeds)
    for (const auto ts : us_seeds)
      if (ps == ts)
        throw ConfigError(
            "leakage guard: paired evaluation anatomy seed " + to_hex(ps) +
            " also appears in the training set");
  for (const auto ps : pair_seeds)
    for (const auto ts : mr_seeds)
      if (ps == ts)
        throw ConfigError(
            "leakage guard: paired evaluation anatomy seed " + to_hex(ps) +
            " also appears in the training set");

  fs::create_directories(cfg.out_dir);
  Json volumes = Json::array();
  int slices = 0;
  char idbuf[32];
  for (int i = 0; i < cfg.us_volumes; ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "us_%03d", i);
    volumes.push_back(write_volume(cfg.out_dir, idbuf, Modality::kUs,
                                   Role::kTrain, us_seeds[i], cfg.n_slices,
                                   cfg.image_size));
    slices += cfg.n_slices;
  }
  for (int i = 0; i < cfg.mr_volumes; ++i) {
    std::snprintf(idbuf, sizeof(idbuf), "mr_%03d", i);
    volumes.push_back(write_volume(cfg.out_dir, idbuf, Modality::kMr,
                                   Role::kTrain, mr_seeds[i], cfg.n_slices,
                                   cfg.image_size));
    slices += cfg.n_slices;
  }
  for (int i = 0; i < cfg.paired_volumes; ++i) {
    char us_id[32], mr_id[32];
    std::snprintf(us_id, sizeof(us_id), "pair_%03d_us", i);
    std::snprintf(mr_id, sizeof(mr_id), "pair_%03d_mr", i);
    volumes.push_back(write_volume(cfg.out_dir, us_id, Modality::kUs,
                                   Role::kPairedEval, pair_seeds[i],
                                   cfg.n_slices, cfg.image_size, mr_id));
    volumes.push_back(write_volume(cfg.out_dir, mr_id, Modality::kMr,
                                   Role::kPairedEval, pair_seeds[i],
                                   cfg.n_slices, cfg.image_size, us_id));
    slices += 2 * cfg.n_slices;
  }

  Json manifest;
  manifest["image_size"] = cfg.image_size;
  manifest["n_slices"] = cfg.n_slices;
  manifest["schema"] = kManifestSchema;
  manifest["seed"] = std::to_string(cfg.seed);
  manifest["volumes"] = std::move(volumes);

  GenReport rep;
  rep.manifest_path = cfg.out_dir / "manifest.json";
  png::write_file(rep.manifest_path, manifest.dump(2) + "\n");
  rep.volumes_written = static_cast<int>(manifest["volumes"].size());
  rep.slices_written = slices;
  return rep;
}

// ---- loading ----

struct VolumeInfo {
  std::string id;
  Modality modality = Modality::kUs;
  Role role = Role::kTrain;
  std::uint64_t anatomy_seed = 0;
  int slices = 0;
  std::vector<std::string> slice_checksums;
  std::string counterpart;  // empty unless paired
};

class Dataset {
 public:
  static Dataset open(const fs::path& root) {
    Dataset ds;
    ds.root_ = root;
    const auto mpath = root / "manifest.json";
    Json m;
    try {
      m = Json::parse(png::read_file(mpath));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest parse error in " + mpath.string() + ": " +
                    e.what());
    }
    static const std::vector<std::string> top_keys = {
        "image_size", "n_slices", "schema", "seed", "volumes"};
    for (auto it = m.begin(); it != m.end(); ++it)
      if (std::find(top_keys.begin(), top_keys.end(), it.key()) ==
          top_keys.end())
        throw ConfigError("manifest: unknown key '" + it.key() + "'");
    for (const auto& k : top_keys)
      if (!m.contains(k)) throw ConfigError("manifest: missing key '" + k + "'");
    if (m["schema"].get<int>() != kManifestSchema)
      throw ConfigError("manifest: unsupported schema " +
                        m["schema"].dump());
    ds.image_size_ = m["image_size"].get<int>();
    ds.n_slices_ = m["n_slices"].get<int>();
    ds.seed_ = std::stoull(m["seed"].get<std::string>());
    for (const auto& jv : m["volumes"]) {
      VolumeInfo v;
      v.id = jv.at("id").get<std::string>();
      v.modality = modality_from(jv.at("modality").get<std::string>());
      v.role = role_from(jv.at("role").get<std::string>());
      v.anatomy_seed = std::stoull(jv.at("anatomy_seed").get<std::string>(),
                                   nullptr, 16);
      v.slices = jv.at("slices").get<int>();
      for (const auto& c : jv.at("slice_checksums"))
        v.slice_checksums.push_back(c.get<std::string>());
      if (jv.contains("counterpart"))
        v.counterpart = jv["counterpart"].get<std::string>();
      if (static_cast<int>(v.slice_checksums.size()) != v.slices)
        throw ConfigError("manifest: checksum count mismatch for " + v.id);
      ds.volumes_.push_back(std::move(v));
    }
    return ds;
  }

  const fs::path& root() const { return root_; }
  int image_size() const { return image_size_; }
  int n_slices() const { return n_slices_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<VolumeInfo>& volumes() const { return volumes_; }

  const VolumeInfo* find(const std::string& id) const {
    for (const auto& v : volumes_)
      if (v.id == id) return &v;
    return nullptr;
  }

  fs::path slice_path(const VolumeInfo& v, int k) const {
    return root_ / v.id / slice_filename(k);
  }

  Tensor load_slice(const VolumeInfo& v, int k) const {
    if (k < 0 || k >= v.slices)
      throw ShapeError("slice index out of range for volume " + v.id);
    Tensor img = png::load_gray(slice_path(v, k));
    if (img.dim(2) != image_size_ || img.dim(3) != image_size_)
      throw IoError("slice size mismatch in " + v.id);
    return img;
  }

  // Full pass over every referenced file; throws on the first mismatch.
  void verify_checksums() const {
    for (const auto& v : volumes_)
      for (int k = 0; k < v.slices; ++k) {
        const auto bytes = png::read_file(slice_path(v, k));
        if (crc32_hex(bytes) != v.slice_checksums[k])
          throw IoError("checksum mismatch: " + v.id + "/" +
                        slice_filename(k));
      }
  }

 private:
  fs::path root_;
  int image_size_ = 0, n_slices_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<VolumeInfo> volumes_;
};

// In-memory training view of one modality: every train-role slice of the
// dataset, resized to the working resolution. Small by construction (a desk
// dataset is a few hundred 64x64 doubles), so eager preload is the simple
// and fast option.
class TrainingSet {
 public:
  TrainingSet() = default;

  TrainingSet(const Dataset& ds, Modality mod, int target_size,
              bool with_neighbors) {
    target_size_ = target_size;
    with_neighbors_ = with_neighbors;
    for (const auto& v : ds.volumes()) {
      if (v.role != Role::kTrain || v.modality != mod) continue;
      const int vol = static_cast<int>(volume_sizes_.size());
      volume_sizes_.push_back(v.slices);
      for (int k = 0; k < v.slices; ++k) {
        Tensor img = ds.load_slice(v, k);
        if (target_size != ds.image_size())
          img = resize_area(img, target_size, target_size);
        slices_.push_back(std::move(img));
        owner_.push_back(vol);
        index_.push_back(k);
        index_norm_.push_back(v.slices > 1
                                  ? static_cast<real>(k) / (v.slices - 1)
                                  : real(0));
      }
    }
  }

  std::size_t size() const { return slices_.size(); }
  bool with_neighbors() const { return with_neighbors_; }
  int target_size() const { return target_size_; }
  int slice_index(std::size_t i) const { return index_[i]; }
  real index_target(std::size_t i) const { return index_norm_[i]; }

  // {B, C, h, w}; C = 3 when neighbour slices ride along as extra channels
  // (clamped at volume ends), otherwise 1.
  Tensor batch(const std::vector<std::size_t>& ids) const {
    const int C = with_neighbors_ ? 3 : 1;
    const int h = target_size_, w = target_size_;
    Tensor out({static_cast<int>(ids.size()), C, h, w});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      const std::size_t i = ids[b];
      if (C == 1) {
        std::memcpy(out.data() + out.idx4(static_cast<int>(b), 0, 0, 0),
                    slices_[i].data(), sizeof(real) * h * w);
      } else {
        const std::size_t prev = neighbor(i, -1), next = neighbor(i, +1);
        const Tensor* chans[3] = {&slices_[prev], &slices_[i], &slices_[next]};
        for (int c = 0; c < 3; ++c)
          std::memcpy(out.data() + out.idx4(static_cast<int>(b), c, 0, 0),
                      chans[c]->data(), sizeof(real) * h * w);
      }
    }
    return out;
  }

  Tensor index_targets(const std::vector<std::size_t>& ids) const {
    Tensor t({static_cast<int>(ids.size())});
    for (std::size_t b = 0; b < ids.size(); ++b) t[b] = index_norm_[ids[b]];
    return t;
  }

 private:
  std::size_t neighbor(std::size_t i, int delta) const {
    const int vol = owner_[i];
    const int k = index_[i] + delta;
    if (k < 0 || k >= volume_sizes_[vol]) return i;  // clamp at volume ends
    return i + delta;
  }

  int target_size_ = 0;
  bool with_neighbors_ = false;
  std::vector<Tensor> slices_;
  std::vector<int> owner_, index_, volume_sizes_;
  std::vector<real> index_norm_;
};

}  // namespace xmodal
