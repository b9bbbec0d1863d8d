#pragma once

#include "xmodal/checkpoint.hpp"
#include "xmodal/dataset.hpp"
#include "xmodal/train.hpp"

namespace xmodal {

// Deployment path. Only the source encoder, the two forward decoders and the
// attention block ever run; the backward cycle, the discriminators and the
// index head stay cold, which the per-block eval counters make auditable.

struct SynthesisResult {
  Tensor mr_image;   // {1,1,h,w} in [0,1]
  Tensor recon_us;   // the source-modality reconstruction, same shape
  Tensor latent;     // {1,C,hl,wl} bottleneck code
  Tensor affinity;   // {1,hw,hw}; empty when fusion is off
};

class InferenceModel {
 public:
  static InferenceModel from_checkpoint(const std::string& path) {
    Checkpoint c = Checkpoint::load(path);
    InferenceModel im;
    im.cfg_ = TrainConfig::from_json(Json::parse(c.config_json));
    im.model_ = SynthesisModel::build(im.cfg_.model(), im.cfg_.variant,
                                      im.cfg_.seed);
    restore_model(im.model_, c);
    return im;
  }

  const TrainConfig& config() const { return cfg_; }
  const SynthesisModel& model() const { return model_; }
  int input_channels() const {
    return variant_uses_neighbors(cfg_.variant) ? 3 : 1;
  }
  int image_size() const { return cfg_.model().image_size; }

  // One slice through the kept subgraph. The input carries the neighbour
  // triplet as channels for the 3d variants, one channel otherwise.
  SynthesisResult synthesize(const Tensor& us_slice) const {
    if (us_slice.shape() !=
        std::vector<int>{1, input_channels(), image_size(), image_size()})
      throw ShapeError("synthesize: input does not match checkpoint variant");
    const SynthesisModel& m = model_;
    Var x = Var::constant(us_slice);
    Var x_mid = us_slice.dim(1) == 1 ? x : slice_channels(x, 1, 2);

    EncoderOut enc = m.enc_us.forward(x);
    const int depth = m.cfg.attention_depth;
    Var f_u;
    Var recon = m.dec_us.forward(enc.latent, enc.skips, x_mid, depth, &f_u);
    Var f_m = m.dec_mr.forward_to_depth(enc.latent, enc.skips, depth);

    SynthesisResult r;
    Var fused = f_m;
    if (cfg_.use_attention) {
      auto att = m.attention.forward(f_u, f_m);
      fused = att.features;
      r.affinity = att.affinity.value();
    }
    Var mr = m.dec_mr.forward_from_depth(fused, enc.skips, x_mid, depth);

    r.mr_image = mr.value();
    r.recon_us = recon.value();
    r.latent = enc.latent.value();
    return r;
  }

  // Per-slice synthesis over a whole volume, neighbour triplets assembled
  // with clamping at the ends, index order preserved.
  std::vector<Tensor> synthesize_volume(
      const std::vector<Tensor>& slices) const {
    const int n = static_cast<int>(slices.size());
    std::vector<Tensor> out;
    out.reserve(n);
    for (int k = 0; k < n; ++k)
      out.push_back(synthesize(assemble_input(slices, k)).mr_image);
    return out;
  }

  Tensor assemble_input(const std::vector<Tensor>& slices, int k) const {
    const int n = static_cast<int>(slices.size());
    if (k < 0 || k >= n) throw ShapeError("assemble_input: index out of range");
    const int hw = image_size();
    if (input_channels() == 1) return slices[k];
    Tensor in({1, 3, hw, hw});
    const Tensor* chans[3] = {&slices[std::max(0, k - 1)], &slices[k],
                              &slices[std::min(n - 1, k + 1)]};
    for (int c = 0; c < 3; ++c)
      std::memcpy(in.data() + in.idx4(0, c, 0, 0), chans[c]->data(),
                  sizeof(real) * hw * hw);
    return in;
  }

 private:
  TrainConfig cfg_;
  SynthesisModel model_;
};

}  // namespace xmodal
