#pragma once

#include <filesystem>
#include <fstream>

#include "xmodal/checkpoint.hpp"
#include "xmodal/dataset.hpp"
#include "xmodal/model.hpp"
#include "xmodal/objectives.hpp"

namespace xmodal {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- configuration ----

struct TrainConfig {
  Variant variant = Variant::kBase;
  int epochs = 100;
  real lr0 = 1e-4;
  int lr_half_every = 20;
  int batch_size = 64;
  LossWeights weights;
  std::uint64_t seed = 1;
  int attention_depth = 2;
  GanLoss gan_loss = GanLoss::kBce;
  bool label_smoothing = true;  // one-sided 0.9 target for real labels
  bool use_attention = true;    // off: target decoder runs without fusion
  bool use_bilateral = true;    // off: latent codes face no adversary
  std::string profile = "desk";

  // The profile picks the architecture scale; training hyperparameters stay
  // independent of it.
  static TrainConfig defaults(const std::string& profile) {
    TrainConfig c;
    c.profile = profile;
    if (profile == "desk") {
      c.batch_size = 64;
    } else if (profile == "full") {
      c.batch_size = 16;
    } else {
      throw ConfigError("unknown profile: " + profile);
    }
    return c;
  }

  ModelConfig model() const {
    ModelConfig m = profile == "desk" ? ModelConfig::desk() : ModelConfig{};
    m.attention_depth = attention_depth;
    return m;
  }

  real real_target() const { return label_smoothing ? 0.9 : 1.0; }

  void validate() const {
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (lr0 <= 0) throw ConfigError("lr0 must be positive");
    if (lr_half_every <= 0) throw ConfigError("lr_half_every must be positive");
    if (attention_depth < 1 || attention_depth > 4)
      throw ConfigError("attention_depth must be in [1, 4]");
    if (profile != "desk" && profile != "full")
      throw ConfigError("unknown profile: " + profile);
    weights.validate();
    model().validate();
  }

  Json to_json() const {
    Json j;
    j["attention_depth"] = attention_depth;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["gan_loss"] = to_string(gan_loss);
    j["label_smoothing"] = label_smoothing;
    j["lr0"] = lr0;
    j["lr_half_every"] = lr_half_every;
    j["profile"] = profile;
    j["seed"] = std::to_string(seed);
    j["use_attention"] = use_attention;
    j["use_bilateral"] = use_bilateral;
    j["variant"] = to_string(variant);
    Json w;
    w["gamma"] = weights.gamma;
    w["index_weight"] = weights.index_weight;
    w["lambda"] = weights.lambda;
    j["weights"] = w;
    return j;
  }

  static TrainConfig from_json(const Json& j) {
    static const std::vector<std::string> keys = {
        "attention_depth", "batch_size",    "epochs",
        "gan_loss",        "label_smoothing", "lr0",
        "lr_half_every",   "profile",       "seed",
        "use_attention",   "use_bilateral", "variant",
        "weights"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
        throw ConfigError("config: unknown key '" + it.key() + "'");

    TrainConfig c =
        defaults(j.value("profile", std::string("desk")));
    if (j.contains("variant")) c.variant = variant_from(j["variant"]);
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("lr0")) c.lr0 = j["lr0"].get<real>();
    if (j.contains("lr_half_every"))
      c.lr_half_every = j["lr_half_every"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("seed")) c.seed = std::stoull(j["seed"].get<std::string>());
    if (j.contains("attention_depth"))
      c.attention_depth = j["attention_depth"].get<int>();
    if (j.contains("gan_loss")) c.gan_loss = gan_loss_from(j["gan_loss"]);
    if (j.contains("label_smoothing"))
      c.label_smoothing = j["label_smoothing"].get<bool>();
    if (j.contains("use_attention"))
      c.use_attention = j["use_attention"].get<bool>();
    if (j.contains("use_bilateral"))
      c.use_bilateral = j["use_bilateral"].get<bool>();
    if (j.contains("weights")) {
      static const std::vector<std::string> wkeys = {"gamma", "index_weight",
                                                     "lambda"};
      const Json& w = j["weights"];
      for (auto it = w.begin(); it != w.end(); ++it)
        if (std::find(wkeys.begin(), wkeys.end(), it.key()) == wkeys.end())
          throw ConfigError("config: unknown key 'weights." + it.key() + "'");
      if (w.contains("lambda")) c.weights.lambda = w["lambda"].get<real>();
      if (w.contains("gamma")) c.weights.gamma = w["gamma"].get<real>();
      if (w.contains("index_weight"))
        c.weights.index_weight = w["index_weight"].get<real>();
    }
    c.validate();
    return c;
  }
};

inline real lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
  return cfg.lr0 * std::pow(0.5, epoch / cfg.lr_half_every);
}

// ---- optimizer ----

// Adaptive moment estimation with bias correction. Parameters whose grad
// buffer is untouched this step are skipped entirely (their moments do not
// decay), matching the usual sparse-update convention.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Var> params, real beta1 = 0.9, real beta2 = 0.999,
                real eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  std::size_t size() const { return params_.size(); }
  long steps_taken() const { return t_; }

  void step(real lr) {
    ++t_;
    const real bc1 = 1.0 - std::pow(beta1_, t_);
    const real bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Node& n = *params_[i].node();
      if (n.grad.empty()) continue;
      auto& val = n.value;
      const auto& g = n.grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t e = 0; e < val.numel(); ++e) {
        m[e] = beta1_ * m[e] + (1 - beta1_) * g[e];
        v[e] = beta2_ * v[e] + (1 - beta2_) * g[e] * g[e];
        val[e] -= lr * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + eps_);
      }
    }
  }

  void save_state(const std::string& prefix,
                  std::map<std::string, Tensor>& tensors,
                  std::map<std::string, long>& scalars) const {
    char name[64];
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::snprintf(name, sizeof(name), "%s/%05zu/m", prefix.c_str(), i);
      tensors[name] = m_[i];
      std::snprintf(name, sizeof(name), "%s/%05zu/v", prefix.c_str(), i);
      tensors[name] = v_[i];
    }
    scalars[prefix + "/t"] = t_;
  }

  void load_state(const std::string& prefix,
                  const std::map<std::string, Tensor>& tensors,
                  const std::map<std::string, long>& scalars) {
    char name[64];
    for (std::size_t i = 0; i < params_.size(); ++i) {
      std::snprintf(name, sizeof(name), "%s/%05zu/m", prefix.c_str(), i);
      auto im = tensors.find(name);
      std::snprintf(name, sizeof(name), "%s/%05zu/v", prefix.c_str(), i);
      auto iv = tensors.find(name);
      if (im == tensors.end() || iv == tensors.end())
        throw IoError("checkpoint: missing optimizer moment for " + prefix);
      if (im->second.shape() != m_[i].shape() ||
          iv->second.shape() != v_[i].shape())
        throw IoError("checkpoint: optimizer moment shape mismatch");
      m_[i] = im->second;
      v_[i] = iv->second;
    }
    auto it = scalars.find(prefix + "/t");
    if (it == scalars.end())
      throw IoError("checkpoint: missing optimizer step counter");
    t_ = it->second;
  }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  real beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

// ---- the training cycle ----

// One evaluation of the synthesis cycle: source -> latent -> {reconstruction,
// target image} -> re-embedded latent -> back-projection. Built entirely from
// the source batch; real target images never enter this graph.
struct CycleGraph {
  Var x_u;        // source batch, 1 or 3 channels
  Var x_mid;      // centre channel of the source
  Var y;          // forward latent code
  Var x_hat_u;    // same-modality reconstruction
  Var affinity;   // attention map, empty when fusion is off
  Var x_hat_m;    // synthesized target-modality image
  Var y_back;     // latent of the synthesized image
  Var x_tilde_u;  // back-projection to the source modality
  Var e_fake;     // edge map of the synthesized image
  Var idx_pred;   // slice-position estimate, index variants only
};

inline CycleGraph run_cycle(const SynthesisModel& m, const Tensor& us_batch,
                            bool use_attention) {
  CycleGraph g;
  g.x_u = Var::constant(us_batch);
  g.x_mid = us_batch.dim(1) == 1 ? g.x_u : slice_channels(g.x_u, 1, 2);

  EncoderOut enc = m.enc_us.forward(g.x_u);
  g.y = enc.latent;
  const int depth = m.cfg.attention_depth;

  Var f_u;
  g.x_hat_u = m.dec_us.forward(g.y, enc.skips, g.x_mid, depth, &f_u);

  Var f_m = m.dec_mr.forward_to_depth(g.y, enc.skips, depth);
  Var fused = f_m;
  if (use_attention) {
    auto att = m.attention.forward(f_u, f_m);
    fused = att.features;
    g.affinity = att.affinity;
  }
  g.x_hat_m = m.dec_mr.forward_from_depth(fused, enc.skips, g.x_mid, depth);

  EncoderOut back = m.enc_mr.forward(g.x_hat_m);
  g.y_back = back.latent;
  g.x_tilde_u =
      m.dec_us_back.forward(g.y_back, back.skips, g.x_hat_m, depth);

  g.e_fake = m.edge(g.x_hat_m);
  if (m.index_head) g.idx_pred = (*m.index_head)(g.y);
  return g;
}

struct StepBatch {
  Tensor us;              // {B, 1|3, h, w}
  Tensor mr;              // {B, 1, h, w}, sampled with replacement
  std::vector<int> ks;    // source slice indices, index variants only
  int n_slices = 0;
};

// One alternating optimization step: the discriminators first, on detached
// fakes, then the generator side against the freshly updated discriminators.
// The hook fires between the two updates.
inline LossReport training_step(
    const SynthesisModel& m, Adam& opt_g, Adam& opt_d, const StepBatch& batch,
    const TrainConfig& cfg, real lr,
    const std::function<void()>& after_discriminator_update = {}) {
  const real rt = cfg.real_target();
  const GanLoss gl = cfg.gan_loss;
  LossReport r;

  CycleGraph g = run_cycle(m, batch.us, cfg.use_attention);
  for (const auto& [v, what] :
       {std::pair<const Var&, const char*>{g.x_hat_u, "reconstruction"},
        {g.x_hat_m, "synthesis"},
        {g.x_tilde_u, "back-projection"},
        {g.y, "latent"},
        {g.y_back, "re-embedded latent"}})
    if (!v.value().all_finite())
      throw TrainingError(std::string("non-finite ") + what +
                          " activations; model state has diverged");
  Var x_m = Var::constant(batch.mr);
  Var e_real = m.edge(x_m);

  // discriminator update, generators frozen behind detach
  Var l_app_d = adversarial_d_loss(m.d_mr.scores(x_m),
                                   m.d_mr.scores(detach(g.x_hat_m)), gl, rt);
  Var l_stru_d = adversarial_d_loss(m.d_edge.scores(e_real),
                                    m.d_edge.scores(detach(g.e_fake)), gl, rt);
  Var l_app_back_d =
      adversarial_d_loss(m.d_us_back.scores(g.x_mid),
                         m.d_us_back.scores(detach(g.x_tilde_u)), gl, rt);
  std::vector<Var> d_terms = {l_app_d, l_stru_d, l_app_back_d};
  if (cfg.use_bilateral) {
    Var l_bi_d = adversarial_d_loss(m.d_latent.scores(detach(g.y)),
                                    m.d_latent.scores(detach(g.y_back)), gl,
                                    rt);
    d_terms.push_back(l_bi_d);
    r.l_bi_d = l_bi_d.value()[0];
  }
  Var total_d = weighted_sum(
      d_terms, std::vector<real>(d_terms.size(), cfg.weights.gamma));
  backward(total_d);
  opt_d.step(lr);
  if (after_discriminator_update) after_discriminator_update();

  // generator update against the updated discriminators
  Var l_lat = l1_reconstruction(g.x_hat_u, g.x_mid);
  Var l_proj = l1_reconstruction(g.x_tilde_u, g.x_mid);
  Var l_app_g = adversarial_g_loss(m.d_mr.scores(g.x_hat_m), gl);
  Var l_stru_g = adversarial_g_loss(m.d_edge.scores(g.e_fake), gl);
  Var l_app_back_g = adversarial_g_loss(m.d_us_back.scores(g.x_tilde_u), gl);

  std::vector<Var> g_terms = {l_lat, l_proj, l_app_g, l_stru_g, l_app_back_g};
  std::vector<real> g_w = {cfg.weights.lambda, cfg.weights.lambda,
                           cfg.weights.gamma, cfg.weights.gamma,
                           cfg.weights.gamma};
  if (cfg.use_bilateral) {
    Var l_bi_g = adversarial_g_loss(m.d_latent.scores(g.y_back), gl);
    g_terms.push_back(l_bi_g);
    g_w.push_back(cfg.weights.gamma);
    r.l_bi_g = l_bi_g.value()[0];
  }
  if (m.index_head) {
    if (static_cast<int>(batch.ks.size()) != batch.us.dim(0))
      throw ConfigError("training_step: index variant needs slice indices");
    Var l_idx = index_loss(g.idx_pred, batch.ks, batch.n_slices);
    g_terms.push_back(l_idx);
    g_w.push_back(cfg.weights.index_weight);
    r.l_index = l_idx.value()[0];
  }
  Var total_g = weighted_sum(g_terms, g_w);
  backward(total_g);
  opt_g.step(lr);

  r.l_lat = l_lat.value()[0];
  r.l_proj = l_proj.value()[0];
  r.l_app_g = l_app_g.value()[0];
  r.l_stru_g = l_stru_g.value()[0];
  r.l_app_back_g = l_app_back_g.value()[0];
  r.l_app_d = l_app_d.value()[0];
  r.l_stru_d = l_stru_d.value()[0];
  r.l_app_back_d = l_app_back_d.value()[0];
  r = finalize_report(r, cfg.weights);
  if (!r.all_finite())
    throw TrainingError("non-finite loss; last report: " +
                        r.csv_row(-1, -1, lr));
  return r;
}

// ---- checkpoint plumbing ----

inline void store_model(const SynthesisModel& m, Checkpoint& c) {
  char name[96];
  for (const auto& [block, vars] : m.named_blocks())
    for (std::size_t i = 0; i < vars.size(); ++i) {
      std::snprintf(name, sizeof(name), "%s/%03zu", block.c_str(), i);
      c.tensors[name] = vars[i].value();
    }
}

inline void restore_model(const SynthesisModel& m, const Checkpoint& c) {
  char name[96];
  for (const auto& [block, vars] : m.named_blocks())
    for (std::size_t i = 0; i < vars.size(); ++i) {
      std::snprintf(name, sizeof(name), "%s/%03zu", block.c_str(), i);
      auto it = c.tensors.find(name);
      if (it == c.tensors.end())
        throw IoError(std::string("checkpoint: missing tensor ") + name);
      if (it->second.shape() != vars[i].shape())
        throw IoError(std::string("checkpoint: shape mismatch for ") + name);
      vars[i].node()->value = it->second;
    }
}

// ---- the training loop ----

struct TrainResult {
  fs::path final_checkpoint;
  fs::path csv_path;
  LossReport last;
  long steps = 0;
};

inline fs::path checkpoint_name(const fs::path& dir, int completed_epochs) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%03d.ckpt",
                completed_epochs);
  return dir / buf;
}

// Runs cfg.epochs over the train split, one checkpoint per epoch plus a CSV
// row per step. Every random stream is derived from (seed, epoch), so a run
// resumed from the epoch-k checkpoint continues the uninterrupted sequence
// exactly. Only the source-to-target cycle is ever constructed; real target
// images reach the discriminators and nothing else.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                         const fs::path& out_dir,
                         const fs::path& resume_from = {}) {
  cfg.validate();
  const ModelConfig mc = cfg.model();
  SynthesisModel model = SynthesisModel::build(mc, cfg.variant, cfg.seed);
  const bool neighbors = variant_uses_neighbors(cfg.variant);

  TrainingSet us(ds, Modality::kUs, mc.image_size, neighbors);
  TrainingSet mr(ds, Modality::kMr, mc.image_size, false);
  if (us.size() == 0 || mr.size() == 0)
    throw ConfigError("train: dataset has no training slices for a modality");

  Adam opt_g(model.generator_params(cfg.use_attention));
  Adam opt_d(model.discriminator_params(cfg.use_bilateral));
  const std::string config_echo = cfg.to_json().dump();

  int start_epoch = 0;
  long step = 0;
  if (!resume_from.empty()) {
    Checkpoint c = Checkpoint::load(resume_from.string());
    // raising the epoch budget is the one legitimate config change on resume
    Json then = Json::parse(c.config_json);
    Json now = Json::parse(config_echo);
    then.erase("epochs");
    now.erase("epochs");
    if (then != now)
      throw ConfigError("resume: checkpoint was written under a different "
                        "configuration");
    restore_model(model, c);
    opt_g.load_state("g", c.opt_tensors, c.opt_scalars);
    opt_d.load_state("d", c.opt_tensors, c.opt_scalars);
    start_epoch = c.epoch;
    step = c.step;
  }
  if (start_epoch >= cfg.epochs)
    throw ConfigError("resume: checkpoint already covers all epochs");

  fs::create_directories(out_dir);
  const fs::path csv_path = out_dir / "losses.csv";
  std::ofstream csv;
  if (start_epoch == 0) {
    csv.open(csv_path, std::ios::trunc);
    csv << LossReport::csv_header(variant_uses_index(cfg.variant)) << "\n";
  } else {
    csv.open(csv_path, std::ios::app);
  }
  if (!csv) throw IoError("train: cannot open " + csv_path.string());

  TrainResult result;
  result.csv_path = csv_path;
  const int B = cfg.batch_size;

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const real lr = lr_schedule(epoch, cfg);
    Rng shuffle_rng = make_rng(cfg.seed, "shuffle", epoch);
    Rng mr_rng = make_rng(cfg.seed, "mr-sample", epoch);

    std::vector<std::size_t> order(us.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const long steps_per_epoch =
        std::max<long>(1, static_cast<long>(us.size()) / B);
    std::uniform_int_distribution<std::size_t> mr_pick(0, mr.size() - 1);

    for (long s = 0; s < steps_per_epoch; ++s) {
      StepBatch batch;
      std::vector<std::size_t> us_ids(B), mr_ids(B);
      for (int b = 0; b < B; ++b) {
        us_ids[b] = order[(s * B + b) % order.size()];
        mr_ids[b] = mr_pick(mr_rng);
      }
      batch.us = us.batch(us_ids);
      batch.mr = mr.batch(mr_ids);
      if (variant_uses_index(cfg.variant)) {
        batch.n_slices = ds.n_slices();
        for (auto i : us_ids) batch.ks.push_back(us.slice_index(i));
      }
      result.last = training_step(model, opt_g, opt_d, batch, cfg, lr);
      csv << result.last.csv_row(step, epoch, lr) << "\n";
      ++step;
      ++result.steps;
    }
    csv.flush();

    Checkpoint c;
    c.config_json = config_echo;
    c.epoch = epoch + 1;
    c.step = step;
    // streams are replayed from (seed, epoch), so the seed echo is the
    // whole of the resumable random state
    c.rng_state = std::to_string(cfg.seed);
    store_model(model, c);
    opt_g.save_state("g", c.opt_tensors, c.opt_scalars);
    opt_d.save_state("d", c.opt_tensors, c.opt_scalars);
    result.final_checkpoint = checkpoint_name(out_dir, epoch + 1);
    c.save(result.final_checkpoint.string());
  }
  return result;
}

}  // namespace xmodal
