#include <ctime>

#include <CLI11.hpp>

#include "xmodal/dataset.hpp"
#include "xmodal/evaluation.hpp"
#include "xmodal/plot.hpp"
#include "xmodal/train.hpp"

using namespace xmodal;

namespace {

constexpr const char* kArtifactVersion = "1.0.0";

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// One manifest per run under the output root: what ran, with which config,
// and which artifacts it produced.
fs::path write_run_manifest(const fs::path& out_root,
                            const std::string& command,
                            const std::string& config_dump,
                            const std::vector<fs::path>& outputs) {
  Json j;
  j["artifact_version"] = kArtifactVersion;
  j["command"] = command;
  j["config_hash"] = to_hex(fnv1a64(config_dump));
  Json outs = Json::array();
  for (const auto& p : outputs) outs.push_back(p.string());
  j["outputs"] = std::move(outs);
  j["timestamp"] = iso_timestamp();
  const fs::path path = out_root / "run_manifest.json";
  fs::create_directories(out_root);
  png::write_file(path, j.dump(2) + "\n");
  return path;
}

struct GenArgs {
  int us_volumes = 10, mr_volumes = 1, paired = 1;
  int slices = 160, image_size = 160;
  std::uint64_t seed = 0;
  std::string out;
};

int run_gen_data(const GenArgs& a) {
  GenConfig g;
  g.us_volumes = a.us_volumes;
  g.mr_volumes = a.mr_volumes;
  g.paired_volumes = a.paired;
  g.n_slices = a.slices;
  g.image_size = a.image_size;
  g.seed = a.seed;
  g.out_dir = a.out;
  const GenReport rep = generate_dataset(g);
  Json echo;
  echo["image_size"] = a.image_size;
  echo["mr_volumes"] = a.mr_volumes;
  echo["paired"] = a.paired;
  echo["seed"] = std::to_string(a.seed);
  echo["slices"] = a.slices;
  echo["us_volumes"] = a.us_volumes;
  const fs::path manifest = write_run_manifest(a.out, "gen-data", echo.dump(),
                                               {rep.manifest_path});
  std::printf("dataset manifest: %s\n", rep.manifest_path.string().c_str());
  std::printf("volumes: %d  slices: %d\n", rep.volumes_written,
              rep.slices_written);
  std::printf("run manifest: %s\n", manifest.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string data, out, config, resume;
  std::string variant = "base", profile = "desk";
  int epochs = -1, batch = -1;
  double lr = -1;
  std::uint64_t seed = 0;
  bool variant_set = false, profile_set = false, epochs_set = false;
  bool batch_set = false, lr_set = false, seed_set = false;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    Json j;
    try {
      j = Json::parse(png::read_file(a.config));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    cfg = TrainConfig::from_json(j);
    if (a.profile_set) cfg.profile = a.profile;
  } else {
    cfg = TrainConfig::defaults(a.profile);
  }
  if (a.variant_set || a.config.empty()) cfg.variant = variant_from(a.variant);
  if (a.epochs_set) cfg.epochs = a.epochs;
  if (a.batch_set) cfg.batch_size = a.batch;
  if (a.lr_set) cfg.lr0 = a.lr;
  if (a.seed_set) cfg.seed = a.seed;
  cfg.validate();

  const Dataset ds = Dataset::open(a.data);
  const TrainResult res = train(ds, cfg, a.out, a.resume);
  const fs::path manifest =
      write_run_manifest(a.out, "train", cfg.to_json().dump(),
                         {res.final_checkpoint, res.csv_path});
  std::printf("checkpoint: %s\n", res.final_checkpoint.string().c_str());
  std::printf("losses: %s\n", res.csv_path.string().c_str());
  std::printf("run manifest: %s\n", manifest.string().c_str());
  return 0;
}

struct SynthArgs {
  std::string checkpoint, input, out;
  bool export_attention = false, export_features = false;
};

std::vector<fs::path> collect_inputs(const fs::path& input) {
  if (fs::is_directory(input)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw IoError("synth: no .png files in " + input.string());
    return files;
  }
  return {input};
}

int run_synth(const SynthArgs& a) {
  const InferenceModel m = InferenceModel::from_checkpoint(a.checkpoint);
  const int size = m.image_size();
  const auto files = collect_inputs(a.input);
  std::vector<Tensor> slices;
  slices.reserve(files.size());
  for (const auto& f : files)
    slices.push_back(resize_area(png::load_gray(f), size, size));

  fs::create_directories(a.out);
  std::vector<fs::path> outputs;
  char name[48];
  for (std::size_t k = 0; k < slices.size(); ++k) {
    const SynthesisResult r =
        m.synthesize(m.assemble_input(slices, static_cast<int>(k)));
    std::snprintf(name, sizeof(name), "synth_%03zu.png", k);
    const fs::path mr_path = fs::path(a.out) / name;
    write_gray_png(mr_path, r.mr_image);
    outputs.push_back(mr_path);
    if (a.export_attention) {
      if (r.affinity.numel() == 0) {
        std::fprintf(stderr,
                     "warning: checkpoint was trained without fusion; no "
                     "affinity to export\n");
      } else {
        Tensor aff({1, 1, r.affinity.dim(1), r.affinity.dim(2)});
        std::copy(r.affinity.data(), r.affinity.data() + r.affinity.numel(),
                  aff.data());
        detail::normalize_map(aff);
        std::snprintf(name, sizeof(name), "attention_%03zu.png", k);
        const fs::path at_path = fs::path(a.out) / name;
        write_gray_png(at_path, aff);
        outputs.push_back(at_path);
      }
    }
  }
  if (a.export_features) {
    const FeatureExport fx =
        export_feature_maps(m, m.assemble_input(slices, 0),
                            fs::path(a.out) / "features");
    outputs.push_back(fx.latent_us);
    outputs.push_back(fx.latent_mr);
    if (!fx.attention_source.empty()) {
      outputs.push_back(fx.attention_source);
      outputs.push_back(fx.attention_peak);
    }
  }
  const fs::path manifest = write_run_manifest(
      a.out, "synth", m.config().to_json().dump(), outputs);
  std::printf("synthesised %zu slice(s) into %s\n", slices.size(),
              a.out.c_str());
  std::printf("run manifest: %s\n", manifest.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out;
  int max_slices = 0;
  bool skip_pattern = false, register_ssim = false;
};

int run_eval(const EvalArgs& a) {
  const InferenceModel m = InferenceModel::from_checkpoint(a.checkpoint);
  const Dataset ds = Dataset::open(a.data);
  PairedEvalOptions opt;
  opt.max_slices = a.max_slices;
  opt.with_pattern = !a.skip_pattern;
  opt.register_before_ssim = a.register_ssim;
  const EvalReport rep = paired_eval(m, ds, opt);
  if (rep.rows.empty())
    throw ConfigError("eval: dataset has no paired evaluation volumes");

  fs::create_directories(a.out);
  const fs::path csv_path = fs::path(a.out) / "report.csv";
  const fs::path sum_path = fs::path(a.out) / "summary.json";
  png::write_file(csv_path, rep.csv());
  png::write_file(sum_path, rep.summary().dump(2) + "\n");
  const fs::path manifest = write_run_manifest(
      a.out, "eval", rep.config_json, {csv_path, sum_path});

  auto line = [](const char* name, const MetricStats& s) {
    std::printf("%-14s %.4f +/- %.4f  (n=%d)\n", name, s.mean, s.stddev, s.n);
  };
  line("psnr", rep.psnr_stats());
  line("ssim", rep.ssim_stats());
  line("deformation", rep.deformation_stats());
  if (!a.skip_pattern) line("pattern_psnr", rep.pattern_stats());
  std::printf("report: %s\n", csv_path.string().c_str());
  std::printf("run manifest: %s\n", manifest.string().c_str());
  return 0;
}

struct PlotArgs {
  std::string losses, report, out;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<real>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }
};

CsvTable read_csv(const fs::path& path) {
  const std::string text = png::read_file(path);
  CsvTable t;
  std::size_t pos = 0;
  bool header_done = false;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::size_t c = 0;
    while (true) {
      const std::size_t comma = line.find(',', c);
      cells.push_back(line.substr(c, comma - c));
      if (comma == std::string::npos) break;
      c = comma + 1;
    }
    if (!header_done) {
      t.header = cells;
      header_done = true;
      continue;
    }
    std::vector<real> row;
    row.reserve(cells.size());
    for (const auto& cell : cells) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        row.push_back(std::numeric_limits<real>::quiet_NaN());
      }
    }
    t.rows.push_back(std::move(row));
  }
  if (!header_done) throw IoError("plot: empty CSV " + path.string());
  return t;
}

int run_plot(const PlotArgs& a) {
  const CsvTable t = read_csv(a.losses);
  fs::create_directories(a.out);
  std::vector<fs::path> outputs;

  auto chart = [&](const std::vector<std::string>& cols,
                   const std::string& title, const std::string& file) {
    std::vector<plot::Series> series;
    for (const auto& name : cols) {
      const int idx = t.column(name);
      if (idx < 0) continue;
      plot::Series s;
      s.name = name;
      for (const auto& row : t.rows)
        if (idx < static_cast<int>(row.size()) && std::isfinite(row[idx]))
          s.ys.push_back(row[idx]);
      if (!s.ys.empty()) series.push_back(std::move(s));
    }
    if (series.empty()) return;
    const fs::path p = fs::path(a.out) / file;
    plot::line_chart(series, title, p);
    outputs.push_back(p);
  };
  chart({"total_g", "total_d"}, "total losses", "losses_total.png");
  chart({"l_lat", "l_proj"}, "reconstruction losses", "losses_recon.png");
  chart({"l_app_g", "l_stru_g", "l_app_back_g", "l_bi_g", "l_index"},
        "generator adversarial losses", "losses_adversarial.png");
  if (outputs.empty())
    throw ConfigError("plot: no plottable columns in " + a.losses);

  if (!a.report.empty()) {
    Json j;
    try {
      j = Json::parse(png::read_file(a.report));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("report parse error: ") + e.what());
    }
    const Json& m = j.at("metrics");
    auto stat = [&](const char* k, int field) -> real {
      const Json& s = m.at(k);
      return field == 0 ? s.at("mean").get<real>() : s.at("std").get<real>();
    };
    const fs::path db_path = fs::path(a.out) / "metrics_db.png";
    plot::bar_chart({"psnr", "pattern"},
                    {stat("psnr", 0), stat("pattern_psnr", 0)},
                    {stat("psnr", 1), stat("pattern_psnr", 1)},
                    "db metrics", db_path);
    outputs.push_back(db_path);
    const fs::path unit_path = fs::path(a.out) / "metrics_unit.png";
    plot::bar_chart({"ssim", "deform"},
                    {stat("ssim", 0), stat("deformation", 0)},
                    {stat("ssim", 1), stat("deformation", 1)},
                    "unit metrics", unit_path);
    outputs.push_back(unit_path);
  }

  Json echo;
  echo["losses"] = a.losses;
  echo["report"] = a.report;
  const fs::path manifest =
      write_run_manifest(a.out, "plot", echo.dump(), outputs);
  for (const auto& p : outputs)
    std::printf("wrote %s\n", p.string().c_str());
  std::printf("run manifest: %s\n", manifest.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modality ultrasound-to-MR synthesis pipeline"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a phantom dataset");
  g->add_option("--us-volumes", gen.us_volumes, "training US volumes");
  g->add_option("--mr-volumes", gen.mr_volumes, "training MR volumes");
  g->add_option("--paired", gen.paired, "held-out paired volumes");
  g->add_option("--slices", gen.slices, "slices per volume");
  g->add_option("--image-size", gen.image_size, "slice resolution");
  g->add_option("--seed", gen.seed, "master seed");
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a synthesis model");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--out", tr.out, "output directory")->required();
  auto* o_variant =
      t->add_option("--variant", tr.variant, "base | 3d_i | 3d_ii | 3d_iii");
  auto* o_profile = t->add_option("--profile", tr.profile, "desk | full");
  auto* o_epochs = t->add_option("--epochs", tr.epochs, "epochs to train");
  auto* o_batch = t->add_option("--batch", tr.batch, "batch size");
  auto* o_lr = t->add_option("--lr", tr.lr, "initial learning rate");
  auto* o_seed = t->add_option("--seed", tr.seed, "training seed");
  t->add_option("--config", tr.config, "JSON config file")
      ->envname("XMODAL_CONFIG");
  t->add_option("--resume", tr.resume, "checkpoint to resume from");

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "synthesise MR from US slices");
  s->add_option("--checkpoint", sy.checkpoint, "trained checkpoint")
      ->required();
  s->add_option("--input", sy.input, "US slice PNG or directory of slices")
      ->required();
  s->add_option("--out", sy.out, "output directory")->required();
  s->add_flag("--export-attention", sy.export_attention,
              "write per-slice affinity images");
  s->add_flag("--export-features", sy.export_features,
              "write bottleneck feature grids and attention heat maps");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate against paired volumes");
  e->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")
      ->required();
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--out", ev.out, "output directory")->required();
  e->add_option("--max-slices", ev.max_slices,
                "evaluate at most this many slices per volume (0 = all)");
  e->add_flag("--skip-pattern", ev.skip_pattern,
              "skip the pattern-preservation pass");
  e->add_flag("--register-ssim", ev.register_ssim,
              "register the synthesis to the truth before PSNR/SSIM");

  PlotArgs pl;
  auto* p = app.add_subcommand("plot", "render loss curves and metric bars");
  p->add_option("--losses", pl.losses, "training losses CSV")->required();
  p->add_option("--report", pl.report, "evaluation summary JSON");
  p->add_option("--out", pl.out, "output directory")->required();

  try {
    app.parse(argc, argv);
    tr.variant_set = o_variant->count() > 0;
    tr.profile_set = o_profile->count() > 0;
    tr.epochs_set = o_epochs->count() > 0;
    tr.batch_set = o_batch->count() > 0;
    tr.lr_set = o_lr->count() > 0;
    tr.seed_set = o_seed->count() > 0;
    if (g->parsed()) return run_gen_data(gen);
    if (t->parsed()) return run_train(tr);
    if (s->parsed()) return run_synth(sy);
    if (e->parsed()) return run_eval(ev);
    if (p->parsed()) return run_plot(pl);
    return 2;
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
}
