#pragma once

#include <optional>
#include <sstream>

#include "xmodal/autograd.hpp"

namespace xmodal {

// Loss terms for the two-directional objective. The generator-side and
// discriminator-side parts are kept separate because they are minimized in
// alternating steps by different optimizers.

struct LossWeights {
  real lambda = 10.0;       // reconstruction terms
  real gamma = 1.0;         // adversarial terms
  real index_weight = 1.0;  // auxiliary index regression

  void validate() const {
    if (lambda < 0 || gamma < 0 || index_weight < 0)
      throw ConfigError("loss weights must be non-negative");
  }
};

enum class GanLoss { kBce, kLeastSquares };

inline GanLoss gan_loss_from(const std::string& s) {
  if (s == "bce") return GanLoss::kBce;
  if (s == "lsgan") return GanLoss::kLeastSquares;
  throw ConfigError("unknown gan_loss: " + s);
}
inline std::string to_string(GanLoss g) {
  return g == GanLoss::kBce ? "bce" : "lsgan";
}

namespace detail {

inline void require_finite(const Var& v, const char* what) {
  if (!v.value().all_finite())
    throw std::invalid_argument(std::string(what) + ": non-finite input");
}

inline real safe_log(real x) { return std::log(std::max(x, real(1e-12))); }

}  // namespace detail

// mean |a - b| over all elements; subgradient 0 at exact ties
inline Var l1_reconstruction(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "l1_reconstruction");
  const auto& av = a.value();
  const auto& bv = b.value();
  const real inv = 1.0 / static_cast<real>(av.numel());
  real acc = 0;
  for (std::size_t i = 0; i < av.numel(); ++i) acc += std::abs(av[i] - bv[i]);
  auto n = make_node(Tensor::scalar(acc * inv),
                     a.needs_grad() || b.needs_grad(), {a.node(), b.node()});
  if (n->needs_grad) {
    NodeRef pa = a.node(), pb = b.node();
    n->backprop = [pa, pb, inv](Node& self) {
      const real g = self.grad[0] * inv;
      for (std::size_t i = 0; i < pa->value.numel(); ++i) {
        const real d = pa->value[i] - pb->value[i];
        const real s = d > 0 ? g : (d < 0 ? -g : real(0));
        if (pa->needs_grad) pa->grad_buf()[i] += s;
        if (pb->needs_grad) pb->grad_buf()[i] -= s;
      }
    };
  }
  return Var(n);
}

inline real l1_reconstruction(const Tensor& a, const Tensor& b) {
  return l1_reconstruction(Var::constant(a), Var::constant(b)).value()[0];
}

// Discriminator objective over batches of per-sample scores in (0,1):
//   bce:    mean_i −[t·log d_real_i + (1−t)·log(1−d_real_i)] +
//           mean_j −log(1 − d_fake_j)
//   lsgan:  0.5·(mean (d_real − t)^2 + mean d_fake^2)
// `real_target` below 1 gives one-sided label smoothing.
inline Var adversarial_d_loss(const Var& d_real, const Var& d_fake,
                              GanLoss kind = GanLoss::kBce,
                              real real_target = 1.0) {
  detail::require_finite(d_real, "adversarial_d_loss");
  detail::require_finite(d_fake, "adversarial_d_loss");
  const auto& r = d_real.value();
  const auto& f = d_fake.value();
  const real ir = 1.0 / static_cast<real>(r.numel());
  const real jf = 1.0 / static_cast<real>(f.numel());
  const real t = real_target;

  real acc = 0;
  if (kind == GanLoss::kBce) {
    for (std::size_t i = 0; i < r.numel(); ++i)
      acc -= ir * (t * detail::safe_log(r[i]) +
                   (1 - t) * detail::safe_log(1 - r[i]));
    for (std::size_t j = 0; j < f.numel(); ++j)
      acc -= jf * detail::safe_log(1 - f[j]);
  } else {
    for (std::size_t i = 0; i < r.numel(); ++i)
      acc += 0.5 * ir * (r[i] - t) * (r[i] - t);
    for (std::size_t j = 0; j < f.numel(); ++j)
      acc += 0.5 * jf * f[j] * f[j];
  }
  auto n = make_node(Tensor::scalar(acc),
                     d_real.needs_grad() || d_fake.needs_grad(),
                     {d_real.node(), d_fake.node()});
  if (n->needs_grad) {
    NodeRef pr = d_real.node(), pf = d_fake.node();
    n->backprop = [pr, pf, kind, t, ir, jf](Node& self) {
      const real g = self.grad[0];
      if (pr->needs_grad) {
        auto& gb = pr->grad_buf();
        for (std::size_t i = 0; i < pr->value.numel(); ++i) {
          const real x = pr->value[i];
          gb[i] += kind == GanLoss::kBce
                       ? g * ir *
                             (-t / std::max(x, real(1e-12)) +
                              (1 - t) / std::max(1 - x, real(1e-12)))
                       : g * ir * (x - t);
        }
      }
      if (pf->needs_grad) {
        auto& gb = pf->grad_buf();
        for (std::size_t j = 0; j < pf->value.numel(); ++j) {
          const real x = pf->value[j];
          gb[j] += kind == GanLoss::kBce
                       ? g * jf / std::max(1 - x, real(1e-12))
                       : g * jf * x;
        }
      }
    };
  }
  return Var(n);
}

// Non-saturating generator objective: mean −log d_fake (bce) or the
// least-squares pull toward the real label.
inline Var adversarial_g_loss(const Var& d_fake, GanLoss kind = GanLoss::kBce) {
  detail::require_finite(d_fake, "adversarial_g_loss");
  const auto& f = d_fake.value();
  const real jf = 1.0 / static_cast<real>(f.numel());
  real acc = 0;
  if (kind == GanLoss::kBce) {
    for (std::size_t j = 0; j < f.numel(); ++j)
      acc -= jf * detail::safe_log(f[j]);
  } else {
    for (std::size_t j = 0; j < f.numel(); ++j)
      acc += 0.5 * jf * (f[j] - 1) * (f[j] - 1);
  }
  auto n = make_node(Tensor::scalar(acc), d_fake.needs_grad(), {d_fake.node()});
  if (n->needs_grad) {
    NodeRef pf = d_fake.node();
    n->backprop = [pf, kind, jf](Node& self) {
      const real g = self.grad[0];
      auto& gb = pf->grad_buf();
      for (std::size_t j = 0; j < pf->value.numel(); ++j) {
        const real x = pf->value[j];
        gb[j] += kind == GanLoss::kBce ? -g * jf / std::max(x, real(1e-12))
                                       : g * jf * (x - 1);
      }
    };
  }
  return Var(n);
}

// l1 between predicted normalized positions and true slice indices
inline Var index_loss(const Var& pred, const std::vector<int>& true_indices,
                      int n_slices) {
  if (pred.shape() !=
      std::vector<int>{static_cast<int>(true_indices.size())})
    throw ShapeError("index_loss: prediction/target count mismatch");
  Tensor target({static_cast<int>(true_indices.size())});
  for (std::size_t i = 0; i < true_indices.size(); ++i) {
    if (true_indices[i] < 0 || true_indices[i] >= n_slices)
      throw std::invalid_argument("index_loss: slice index out of range");
    target[i] = n_slices > 1
                    ? static_cast<real>(true_indices[i]) / (n_slices - 1)
                    : real(0);
  }
  return l1_reconstruction(pred, Var::constant(std::move(target)));
}

// ---- step report ----

struct LossReport {
  real l_lat = 0, l_app_g = 0, l_app_d = 0;
  real l_stru_g = 0, l_stru_d = 0;
  real l_proj = 0, l_app_back_g = 0, l_app_back_d = 0;
  real l_bi_g = 0, l_bi_d = 0;
  std::optional<real> l_index;
  real total_g = 0, total_d = 0;

  bool all_finite() const {
    for (real v : {l_lat, l_app_g, l_app_d, l_stru_g, l_stru_d, l_proj,
                   l_app_back_g, l_app_back_d, l_bi_g, l_bi_d, total_g,
                   total_d})
      if (!std::isfinite(v)) return false;
    return !l_index || std::isfinite(*l_index);
  }

  // The index column exists only when the run trains the index head, so the
  // log schema itself records which variant produced it.
  static std::string csv_header(bool with_index) {
    std::string h =
        "step,epoch,lr,l_lat,l_app_g,l_app_d,l_stru_g,l_stru_d,l_proj,"
        "l_app_back_g,l_app_back_d,l_bi_g,l_bi_d";
    if (with_index) h += ",l_index";
    return h + ",total_g,total_d";
  }

  std::string csv_row(long step, int epoch, real lr) const {
    std::ostringstream os;
    char buf[32];
    auto num = [&](real v) {
      std::snprintf(buf, sizeof(buf), "%.10g", v);
      os << ',' << buf;
    };
    os << step << ',' << epoch;
    num(lr);
    for (real v : {l_lat, l_app_g, l_app_d, l_stru_g, l_stru_d, l_proj,
                   l_app_back_g, l_app_back_d, l_bi_g, l_bi_d})
      num(v);
    if (l_index) num(*l_index);
    num(total_g);
    num(total_d);
    return os.str();
  }
};

// Weighted totals; the graph-side totals in the training step are assembled
// from the same weights, and the two must agree to rounding.
inline real generator_total(const LossReport& r, const LossWeights& w) {
  real t = w.lambda * (r.l_lat + r.l_proj) +
           w.gamma * (r.l_app_g + r.l_stru_g + r.l_app_back_g + r.l_bi_g);
  if (r.l_index) t += w.index_weight * *r.l_index;
  return t;
}

inline real discriminator_total(const LossReport& r, const LossWeights& w) {
  return w.gamma * (r.l_app_d + r.l_stru_d + r.l_app_back_d + r.l_bi_d);
}

inline LossReport finalize_report(LossReport r, const LossWeights& w) {
  r.total_g = generator_total(r, w);
  r.total_d = discriminator_total(r, w);
  return r;
}

}  // namespace xmodal
