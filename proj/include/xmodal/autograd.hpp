#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

#include "xmodal/gemm.hpp"
#include "xmodal/tensor.hpp"

namespace xmodal {

// Define-by-run reverse-mode autodiff. Every op records a node on a tape that
// is implicit in the graph structure; node ids increase in creation order, so
// children always carry larger ids than their parents and a reverse id sort is
// a valid topological order for backprop.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward()
  bool needs_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads. Must not
  // capture the node's own shared_ptr (that would leak the graph).
  std::function<void(Node&)> backprop;
  mutable long fwd_evals = 0;  // incremented by block forwards, for audits

  Tensor& grad_buf() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

using NodeRef = std::shared_ptr<Node>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline NodeRef make_node(Tensor value, bool needs_grad,
                         std::vector<NodeRef> parents = {}) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->needs_grad = needs_grad;
  n->id = next_node_id();
  n->parents = std::move(parents);
  return n;
}

// Value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodeRef n) : node_(std::move(n)) {}

  static Var leaf(Tensor value, bool needs_grad = false) {
    return Var(make_node(std::move(value), needs_grad));
  }
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad() { return node_->grad; }
  bool needs_grad() const { return node_ && node_->needs_grad; }
  const NodeRef& node() const { return node_; }

  const std::vector<int>& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }

  void zero_grad() {
    if (node_) node_->grad = Tensor();
  }

 private:
  NodeRef node_;
};

namespace detail {

inline bool any_needs_grad(const std::vector<NodeRef>& parents) {
  for (const auto& p : parents)
    if (p->needs_grad) return true;
  return false;
}

inline void collect_subgraph(const NodeRef& root, std::vector<Node*>& out) {
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    out.push_back(n);
    for (const auto& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
}

}  // namespace detail

// Runs backprop from a scalar root. Gradients of every reachable node that
// needs them are recomputed from scratch on each call; nodes outside the
// subgraph are left untouched.
inline void backward(const Var& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward() expects a defined scalar root");
  if (!root.needs_grad()) return;
  std::vector<Node*> nodes;
  detail::collect_subgraph(root.node(), nodes);
  for (Node* n : nodes) n->grad = Tensor(n->value.shape());
  std::sort(nodes.begin(), nodes.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });
  root.node()->grad[0] = 1.0;
  for (Node* n : nodes) {
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// Accumulation helper used by op backprop closures.
inline void accum(const NodeRef& parent, std::size_t i, real g) {
  parent->grad_buf()[i] += g;
}

inline Var detach(const Var& x) {
  return Var::leaf(x.value(), /*needs_grad=*/false);
}

// ---- elementwise and reduction ops ----

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real g = self.grad[i];
        if (pa->needs_grad) pa->grad_buf()[i] += g;
        if (pb->needs_grad) pb->grad_buf()[i] += g;
      }
    };
  }
  return Var(n);
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real g = self.grad[i];
        if (pa->needs_grad) pa->grad_buf()[i] += g;
        if (pb->needs_grad) pb->grad_buf()[i] -= g;
      }
    };
  }
  return Var(n);
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real g = self.grad[i];
        if (pa->needs_grad) pa->grad_buf()[i] += g * pb->value[i];
        if (pb->needs_grad) pb->grad_buf()[i] += g * pa->value[i];
      }
    };
  }
  return Var(n);
}

inline Var scale(const Var& a, real s) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v *= s;
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, s](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        pa->grad_buf()[i] += self.grad[i] * s;
    };
  }
  return Var(n);
}

inline Var add_scalar(const Var& a, real s) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v += s;
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        pa->grad_buf()[i] += self.grad[i];
    };
  }
  return Var(n);
}

// Elementwise product with a constant mask; the mask is treated as data, not
// as a differentiable input. Used for hard selections whose gradient is taken
// with the selection held fixed.
inline Var mul_mask(const Var& a, Tensor mask) {
  require_same_shape(a.value(), mask, "mul_mask");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    auto m = std::make_shared<Tensor>(std::move(mask));
    n->backprop = [pa, m](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        pa->grad_buf()[i] += self.grad[i] * (*m)[i];
    };
  }
  return Var(n);
}

inline Var leaky_relu(const Var& a, real slope = 0.2) {
  Tensor out = a.value();
  for (auto& v : out.vec())
    if (v < 0) v *= slope;
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, slope](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        pa->grad_buf()[i] +=
            self.grad[i] * (pa->value[i] >= 0 ? real(1) : slope);
    };
  }
  return Var(n);
}

inline real sigmoid_scalar(real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const real e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.vec()) v = sigmoid_scalar(v);
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real y = self.value[i];
        pa->grad_buf()[i] += self.grad[i] * y * (1.0 - y);
      }
    };
  }
  return Var(n);
}

// sqrt(a*a + b*b + eps), smooth surrogate for a gradient magnitude.
inline Var magnitude(const Var& a, const Var& b, real eps = 1e-12) {
  require_same_shape(a.value(), b.value(), "magnitude");
  Tensor out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::sqrt(av[i] * av[i] + bv[i] * bv[i] + eps);
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real g = self.grad[i] / self.value[i];
        if (pa->needs_grad) pa->grad_buf()[i] += g * pa->value[i];
        if (pb->needs_grad) pb->grad_buf()[i] += g * pb->value[i];
      }
    };
  }
  return Var(n);
}

// Linear ramp from 0 at `lo` to 1 at `hi`, clamped outside. Gradient is zero
// in the clamped regions.
inline Var ramp(const Var& a, real lo, real hi) {
  if (!(hi > lo)) throw ShapeError("ramp: hi must exceed lo");
  const real inv = 1.0 / (hi - lo);
  Tensor out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::clamp((av[i] - lo) * inv, real(0), real(1));
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, lo, hi, inv](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i) {
        const real x = pa->value[i];
        if (x > lo && x < hi) pa->grad_buf()[i] += self.grad[i] * inv;
      }
    };
  }
  return Var(n);
}

inline Var reshape(const Var& a, std::vector<int> shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: element count mismatch");
  Tensor out(std::move(shape), a.value().vec());
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa](Node& self) {
      for (std::size_t i = 0; i < self.grad.numel(); ++i)
        pa->grad_buf()[i] += self.grad[i];
    };
  }
  return Var(n);
}

inline Var mean_all(const Var& a) {
  const real inv = 1.0 / static_cast<real>(a.numel());
  Tensor out = Tensor::scalar(a.value().sum() * inv);
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, inv](Node& self) {
      const real g = self.grad[0] * inv;
      auto& gb = pa->grad_buf();
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g;
    };
  }
  return Var(n);
}

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a.value().sum());
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa](Node& self) {
      const real g = self.grad[0];
      auto& gb = pa->grad_buf();
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g;
    };
  }
  return Var(n);
}

// w0*a0 + w1*a1 + ... over scalar vars; the workhorse for assembling totals.
inline Var weighted_sum(const std::vector<Var>& terms,
                        const std::vector<real>& weights) {
  if (terms.empty() || terms.size() != weights.size())
    throw ShapeError("weighted_sum: mismatched terms and weights");
  real acc = 0;
  bool needs = false;
  std::vector<NodeRef> parents;
  parents.reserve(terms.size());
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1)
      throw ShapeError("weighted_sum: non-scalar term");
    acc += weights[i] * terms[i].value()[0];
    needs = needs || terms[i].needs_grad();
    parents.push_back(terms[i].node());
  }
  auto n = make_node(Tensor::scalar(acc), needs, parents);
  if (needs) {
    auto w = weights;
    auto ps = parents;
    n->backprop = [ps, w](Node& self) {
      for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i]->needs_grad) ps[i]->grad_buf()[0] += self.grad[0] * w[i];
    };
  }
  return Var(n);
}

// ---- channel plumbing ----

inline Var concat_channels(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] ||
      as[3] != bs[3])
    throw ShapeError("concat_channels: incompatible shapes " +
                     a.value().shape_str() + " vs " + b.value().shape_str());
  const int N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({N, Ca + Cb, H, W});
  for (int n0 = 0; n0 < N; ++n0) {
    std::memcpy(out.data() + out.idx4(n0, 0, 0, 0),
                a.value().data() + a.value().idx4(n0, 0, 0, 0),
                Ca * plane * sizeof(real));
    std::memcpy(out.data() + out.idx4(n0, Ca, 0, 0),
                b.value().data() + b.value().idx4(n0, 0, 0, 0),
                Cb * plane * sizeof(real));
  }
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, N, Ca, Cb, plane](Node& self) {
      for (int n0 = 0; n0 < N; ++n0) {
        const real* g0 = self.grad.data() +
                         (static_cast<std::size_t>(n0) * (Ca + Cb)) * plane;
        if (pa->needs_grad) {
          real* ga = pa->grad_buf().data() +
                     static_cast<std::size_t>(n0) * Ca * plane;
          for (std::size_t i = 0; i < Ca * plane; ++i) ga[i] += g0[i];
        }
        if (pb->needs_grad) {
          real* gb = pb->grad_buf().data() +
                     static_cast<std::size_t>(n0) * Cb * plane;
          const real* gsrc = g0 + Ca * plane;
          for (std::size_t i = 0; i < Cb * plane; ++i) gb[i] += gsrc[i];
        }
      }
    };
  }
  return Var(n);
}

inline Var slice_channels(const Var& a, int c0, int c1) {
  const auto& as = a.shape();
  if (as.size() != 4 || c0 < 0 || c1 <= c0 || c1 > as[1])
    throw ShapeError("slice_channels: bad channel range");
  const int N = as[0], C = as[1], H = as[2], W = as[3];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({N, c1 - c0, H, W});
  for (int n0 = 0; n0 < N; ++n0)
    std::memcpy(out.data() + out.idx4(n0, 0, 0, 0),
                a.value().data() + a.value().idx4(n0, c0, 0, 0),
                (c1 - c0) * plane * sizeof(real));
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, N, C, c0, c1, plane](Node& self) {
      for (int n0 = 0; n0 < N; ++n0) {
        real* gp = pa->grad_buf().data() +
                   (static_cast<std::size_t>(n0) * C + c0) * plane;
        const real* gs =
            self.grad.data() + static_cast<std::size_t>(n0) * (c1 - c0) * plane;
        for (std::size_t i = 0; i < (c1 - c0) * plane; ++i) gp[i] += gs[i];
      }
    };
  }
  return Var(n);
}

// ---- batched linear algebra (Eigen GEMM under the hood; see conv.hpp for
// the convolution lowering) ----

// a: {N, M, K}, b: {N, K, P} -> {N, M, P}
inline Var bmm(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw ShapeError("bmm: incompatible shapes " + a.value().shape_str() +
                     " vs " + b.value().shape_str());
  const int N = as[0], M = as[1], K = as[2], P = bs[2];
  Tensor out({N, M, P});
  for (int n0 = 0; n0 < N; ++n0)
    detail::gemm(a.value().data() + static_cast<std::size_t>(n0) * M * K,
                 b.value().data() + static_cast<std::size_t>(n0) * K * P,
                 out.data() + static_cast<std::size_t>(n0) * M * P, M, K, P,
                 false);
  auto n = make_node(std::move(out), a.needs_grad() || b.needs_grad(),
                     {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, N, M, K, P](Node& self) {
      for (int n0 = 0; n0 < N; ++n0) {
        const real* g = self.grad.data() + static_cast<std::size_t>(n0) * M * P;
        if (pa->needs_grad)  // dA = dC * B^T
          detail::gemm_bt(g,
                          pb->value.data() + static_cast<std::size_t>(n0) * K * P,
                          pa->grad_buf().data() +
                              static_cast<std::size_t>(n0) * M * K,
                          M, P, K, true);
        if (pb->needs_grad)  // dB = A^T * dC
          detail::gemm_at(pa->value.data() + static_cast<std::size_t>(n0) * M * K,
                          g,
                          pb->grad_buf().data() +
                              static_cast<std::size_t>(n0) * K * P,
                          K, M, P, true);
      }
    };
  }
  return Var(n);
}

// {N, A, B} -> {N, B, A}
inline Var transpose12(const Var& a) {
  const auto& as = a.shape();
  if (as.size() != 3) throw ShapeError("transpose12: expects rank-3");
  const int N = as[0], A = as[1], B = as[2];
  Tensor out({N, B, A});
  for (int n0 = 0; n0 < N; ++n0)
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j)
        out.at3(n0, j, i) = a.value().at3(n0, i, j);
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, N, A, B](Node& self) {
      auto& gb = pa->grad_buf();
      for (int n0 = 0; n0 < N; ++n0)
        for (int i = 0; i < A; ++i)
          for (int j = 0; j < B; ++j)
            gb.at3(n0, i, j) += self.grad.at3(n0, j, i);
    };
  }
  return Var(n);
}

// Softmax over axis 1 of a rank-3 tensor: out[n, :, j] sums to one.
inline Var softmax_dim1(const Var& a) {
  const auto& as = a.shape();
  if (as.size() != 3) throw ShapeError("softmax_dim1: expects rank-3");
  const int N = as[0], A = as[1], B = as[2];
  Tensor out(a.shape());
  const auto& av = a.value();
  for (int n0 = 0; n0 < N; ++n0)
    for (int j = 0; j < B; ++j) {
      real mx = -1e300;
      for (int i = 0; i < A; ++i) mx = std::max(mx, av.at3(n0, i, j));
      real z = 0;
      for (int i = 0; i < A; ++i) z += std::exp(av.at3(n0, i, j) - mx);
      for (int i = 0; i < A; ++i)
        out.at3(n0, i, j) = std::exp(av.at3(n0, i, j) - mx) / z;
    }
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, N, A, B](Node& self) {
      auto& gb = pa->grad_buf();
      for (int n0 = 0; n0 < N; ++n0)
        for (int j = 0; j < B; ++j) {
          real dot = 0;
          for (int i = 0; i < A; ++i)
            dot += self.grad.at3(n0, i, j) * self.value.at3(n0, i, j);
          for (int i = 0; i < A; ++i) {
            const real y = self.value.at3(n0, i, j);
            gb.at3(n0, i, j) += y * (self.grad.at3(n0, i, j) - dot);
          }
        }
    };
  }
  return Var(n);
}

// x: {N, D}, w: {O, D}, b: {O} -> {N, O}
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] ||
      b.shape() != std::vector<int>{ws[0]})
    throw ShapeError("linear: incompatible shapes");
  const int N = xs[0], D = xs[1], O = ws[0];
  Tensor out({N, O});
  detail::gemm_bt(x.value().data(), w.value().data(), out.data(), N, D, O,
                  false);
  for (int n0 = 0; n0 < N; ++n0)
    for (int o = 0; o < O; ++o) out.at2(n0, o) += b.value()[o];
  auto n = make_node(std::move(out),
                     x.needs_grad() || w.needs_grad() || b.needs_grad(),
                     {x.node(), w.node(), b.node()});
  if (n->needs_grad) {
    NodeRef px = x.node(), pw = w.node(), pb = b.node();
    n->backprop = [px, pw, pb, N, D, O](Node& self) {
      if (px->needs_grad)  // dX = dY * W
        detail::gemm(self.grad.data(), pw->value.data(),
                     px->grad_buf().data(), N, O, D, true);
      if (pw->needs_grad)  // dW = dY^T * X
        detail::gemm_at(self.grad.data(), px->value.data(),
                        pw->grad_buf().data(), O, N, D, true);
      if (pb->needs_grad) {
        auto& gb = pb->grad_buf();
        for (int n0 = 0; n0 < N; ++n0)
          for (int o = 0; o < O; ++o) gb[o] += self.grad.at2(n0, o);
      }
    };
  }
  return Var(n);
}

// {N, C, H, W} -> {N, C}
inline Var global_avg_pool(const Var& a) {
  const auto& as = a.shape();
  if (as.size() != 4) throw ShapeError("global_avg_pool: expects rank-4");
  const int N = as[0], C = as[1];
  const std::size_t plane = static_cast<std::size_t>(as[2]) * as[3];
  const real inv = 1.0 / static_cast<real>(plane);
  Tensor out({N, C});
  for (int n0 = 0; n0 < N; ++n0)
    for (int c = 0; c < C; ++c) {
      const real* p = a.value().data() +
                      (static_cast<std::size_t>(n0) * C + c) * plane;
      real s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out.at2(n0, c) = s * inv;
    }
  auto n = make_node(std::move(out), a.needs_grad(), {a.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node();
    n->backprop = [pa, N, C, plane, inv](Node& self) {
      auto& gb = pa->grad_buf();
      for (int n0 = 0; n0 < N; ++n0)
        for (int c = 0; c < C; ++c) {
          const real g = self.grad.at2(n0, c) * inv;
          real* p = gb.data() + (static_cast<std::size_t>(n0) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) p[i] += g;
        }
    };
  }
  return Var(n);
}

}  // namespace xmodal
