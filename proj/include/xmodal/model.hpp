#pragma once

#include <map>

#include "xmodal/blocks.hpp"

namespace xmodal {

// Variants of the synthesis network:
//   base           single-slice input
//   neighbors      adjacent slices ride along as input channels
//   index          an auxiliary head regresses the slice position
//   neighbors+index  both
enum class Variant { kBase, kNeighbors, kIndex, kNeighborsIndex };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBase: return "base";
    case Variant::kNeighbors: return "3d_i";
    case Variant::kIndex: return "3d_ii";
    case Variant::kNeighborsIndex: return "3d_iii";
  }
  return "base";
}

inline Variant variant_from(const std::string& s) {
  if (s == "base") return Variant::kBase;
  if (s == "3d_i") return Variant::kNeighbors;
  if (s == "3d_ii") return Variant::kIndex;
  if (s == "3d_iii") return Variant::kNeighborsIndex;
  throw ConfigError("unknown variant: " + s);
}

inline bool variant_uses_neighbors(Variant v) {
  return v == Variant::kNeighbors || v == Variant::kNeighborsIndex;
}
inline bool variant_uses_index(Variant v) {
  return v == Variant::kIndex || v == Variant::kNeighborsIndex;
}

// The full model: the forward path us -> latent -> {us reconstruction,
// mr synthesis} and the backward path mr synthesis -> latent -> us again,
// plus the four discriminators that supervise it.
struct SynthesisModel {
  ModelConfig cfg;
  Variant variant = Variant::kBase;

  Encoder enc_us;       // shared-latent encoder over ultrasound input
  Decoder dec_us;       // reconstructs the input modality
  Decoder dec_mr;       // synthesizes the target modality (attention-guided)
  CrossModalAttention attention;
  Encoder enc_mr;       // re-embeds the synthesized image
  Decoder dec_us_back;  // projects the re-embedded code back to ultrasound

  EdgeNet edge;
  Discriminator d_mr;        // synthesized vs real target images
  Discriminator d_edge;      // edge maps of the above
  Discriminator d_us_back;   // back-projected vs real source images
  Discriminator d_latent;    // forward vs re-embedded latent codes

  std::optional<IndexPredictor> index_head;

  static SynthesisModel build(const ModelConfig& cfg, Variant variant,
                              std::uint64_t seed) {
    cfg.validate();
    SynthesisModel m;
    m.cfg = cfg;
    m.variant = variant;
    const int in_ch = variant_uses_neighbors(variant) ? 3 : 1;

    Rng rng = make_rng(seed, "model-init");
    m.enc_us = Encoder::make(rng, in_ch, cfg.enc_width);
    m.dec_us = Decoder::make(rng, cfg, /*src_channels=*/1, 1);
    m.dec_mr = Decoder::make(rng, cfg, 1, 1);
    m.attention = CrossModalAttention::make(
        rng, m.dec_mr.feature_channels(cfg.attention_depth), cfg.att_embed,
        cfg.attention_softmax);
    m.enc_mr = Encoder::make(rng, 1, cfg.enc_width);
    m.dec_us_back = Decoder::make(rng, cfg, 1, 1);
    m.edge = EdgeNet::make();
    m.d_mr = Discriminator::make(rng, 1, cfg.disc_widths);
    m.d_edge = Discriminator::make(rng, 1, cfg.disc_widths);
    m.d_us_back = Discriminator::make(rng, 1, cfg.disc_widths);
    m.d_latent = Discriminator::make(rng, cfg.enc_width, cfg.disc_widths);
    if (variant_uses_index(variant))
      index_head_init(m, rng);
    return m;
  }

  static void index_head_init(SynthesisModel& m, Rng& rng) {
    m.index_head = IndexPredictor::make(rng, m.cfg.enc_width,
                                        m.cfg.latent_size(), m.cfg.idx_widths);
  }

  // Parameter groups drive the two optimizers; a block left out of its group
  // is frozen by construction.
  std::vector<Var> generator_params(bool with_attention = true) const {
    std::vector<Var> p;
    enc_us.collect(p);
    dec_us.collect(p);
    dec_mr.collect(p);
    if (with_attention) attention.collect(p);
    enc_mr.collect(p);
    dec_us_back.collect(p);
    if (index_head) index_head->collect(p);
    return p;
  }

  std::vector<Var> discriminator_params(bool with_latent = true) const {
    std::vector<Var> p;
    d_mr.collect(p);
    d_edge.collect(p);
    d_us_back.collect(p);
    if (with_latent) d_latent.collect(p);
    return p;
  }

  // Every tensor that defines the network, keyed by block, in a stable
  // order. Includes the fixed edge filters so a checkpoint is self-contained.
  std::map<std::string, std::vector<Var>> named_blocks() const {
    std::map<std::string, std::vector<Var>> m;
    enc_us.collect(m["enc_us"]);
    dec_us.collect(m["dec_us"]);
    dec_mr.collect(m["dec_mr"]);
    attention.collect(m["attention"]);
    enc_mr.collect(m["enc_mr"]);
    dec_us_back.collect(m["dec_us_back"]);
    edge.state(m["edge_net"]);
    d_mr.collect(m["d_mr"]);
    d_edge.collect(m["d_edge"]);
    d_us_back.collect(m["d_us_back"]);
    d_latent.collect(m["d_latent"]);
    if (index_head) index_head->collect(m["index_head"]);
    return m;
  }

  std::uint64_t parameter_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, vars] : named_blocks()) {
      h = fnv1a64(name.data(), name.size(), h);
      for (const auto& v : vars)
        h = fnv1a64(v.value().data(), v.value().numel() * sizeof(real), h);
    }
    return h;
  }

  void reset_eval_counts() const {
    enc_us.evals = dec_us.evals = dec_mr.evals = attention.evals = 0;
    enc_mr.evals = dec_us_back.evals = edge.evals = 0;
    d_mr.evals = d_edge.evals = d_us_back.evals = d_latent.evals = 0;
    if (index_head) index_head->evals = 0;
  }

  std::map<std::string, long> eval_counts() const {
    std::map<std::string, long> c;
    c["enc_us"] = enc_us.evals;
    c["dec_us"] = dec_us.evals;
    c["dec_mr"] = dec_mr.evals;
    c["attention"] = attention.evals;
    c["enc_mr"] = enc_mr.evals;
    c["dec_us_back"] = dec_us_back.evals;
    c["edge_net"] = edge.evals;
    c["d_mr"] = d_mr.evals;
    c["d_edge"] = d_edge.evals;
    c["d_us_back"] = d_us_back.evals;
    c["d_latent"] = d_latent.evals;
    c["index_head"] = index_head ? index_head->evals : 0;
    return c;
  }
};

}  // namespace xmodal
