#pragma once

#include "xmodal/conv.hpp"

namespace xmodal {

// Parameter-owning layer wrappers. Initialization is He-style scaled for the
// leaky activations used throughout; layers that must start as an identity
// contribution (the attention projection) are zero-initialized explicitly.

struct ConvLayer {
  Var w, b;
  int stride = 1, pad_h = 0, pad_w = 0;
  PadMode mode = PadMode::kZero;

  static ConvLayer make(Rng& rng, int cin, int cout, int kh, int kw,
                        int stride, int pad_h, int pad_w,
                        PadMode mode = PadMode::kZero, bool zero_init = false) {
    ConvLayer l;
    l.stride = stride;
    l.pad_h = pad_h;
    l.pad_w = pad_w;
    l.mode = mode;
    const real std = zero_init ? 0.0
                               : std::sqrt(2.0 / (static_cast<real>(cin) * kh * kw));
    l.w = Var::leaf(Tensor::randn(rng, {cout, cin, kh, kw}, std),
                    /*needs_grad=*/true);
    l.b = Var::leaf(Tensor::zeros({cout}), true);
    return l;
  }

  static ConvLayer make3(Rng& rng, int cin, int cout, int stride = 1) {
    return make(rng, cin, cout, 3, 3, stride, 1, 1);
  }

  Var operator()(const Var& x) const {
    return conv2d(x, w, b, stride, pad_h, pad_w, mode);
  }

  void collect(std::vector<Var>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

struct ConvTLayer {
  Var w, b;

  static ConvTLayer make(Rng& rng, int cin, int cout) {
    ConvTLayer l;
    const real std = std::sqrt(2.0 / (static_cast<real>(cin) * 9));
    l.w = Var::leaf(Tensor::randn(rng, {cin, cout, 3, 3}, std), true);
    l.b = Var::leaf(Tensor::zeros({cout}), true);
    return l;
  }

  // doubles the spatial extent: k3, stride 2, pad 1, output pad 1
  Var operator()(const Var& x) const {
    return conv_transpose2d(x, w, b, 2, 1, 1);
  }

  void collect(std::vector<Var>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

struct FcLayer {
  Var w, b;

  static FcLayer make(Rng& rng, int in, int out) {
    FcLayer l;
    l.w = Var::leaf(Tensor::randn(rng, {out, in}, std::sqrt(2.0 / in)), true);
    l.b = Var::leaf(Tensor::zeros({out}), true);
    return l;
  }

  Var operator()(const Var& x) const { return linear(x, w, b); }

  void collect(std::vector<Var>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

inline std::size_t param_count(const std::vector<Var>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

// True when `leaf` is an ancestor of `out` in the autodiff graph; the
// training-isolation audits are built on this.
inline bool depends_on(const Var& out, const Var& leaf) {
  if (!out.defined() || !leaf.defined()) return false;
  std::vector<const Node*> stack{out.node().get()};
  std::unordered_set<const Node*> seen{out.node().get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (n == leaf.node().get()) return true;
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  return false;
}

}  // namespace xmodal
