#include "modelmix/losses.hpp"

#include <cmath>

#include "modelmix/ops.hpp"

namespace modelmix {
namespace {

void check_scribbles(const Shape4& s, std::span<const ScribbleMap> scribbles, const char* op) {
  if (scribbles.size() != s.n) {
    throw ContractViolation(std::string(op) + ": " + std::to_string(scribbles.size()) + " scribble maps for batch " +
                            std::to_string(s.n));
  }
  for (const auto& sc : scribbles) {
    if (sc.labels.h != s.h || sc.labels.w != s.w) {
      throw ContractViolation(std::string(op) + ": scribble " + std::to_string(sc.labels.h) + "x" +
                              std::to_string(sc.labels.w) + " does not match probabilities " + s.str());
    }
    if (static_cast<std::size_t>(sc.num_classes) != s.c) {
      throw ContractViolation(std::string(op) + ": scribble has " + std::to_string(sc.num_classes) +
                              " classes, probabilities have " + std::to_string(s.c) + " channels");
    }
  }
}

// Shared driver: value(p) and dvalue/dp per annotated pixel, averaged.
template <typename T, typename F, typename G>
SupervisedLoss<T> annotated_mean(const Var<T>& probs, std::span<const ScribbleMap> scribbles, const char* op,
                                 F value, G deriv) {
  const Shape4 s = probs.shape();
  check_scribbles(s, scribbles, op);
  std::vector<std::size_t> where;  // flat index of the true-class probability
  for (std::size_t n = 0; n < s.n; ++n) {
    const auto& labels = scribbles[n].labels.data;
    for (std::size_t p = 0; p < labels.size(); ++p) {
      if (!scribbles[n].annotated(p)) continue;
      where.push_back(((n * s.c + labels[p]) * s.h) * s.w + p);
    }
  }
  SupervisedLoss<T> out;
  out.annotated = where.size();
  if (where.empty()) {
    out.value = make_node<T>(Tensor4<T>(Shape4{1, 1, 1, 1}), {probs}, op, [](Node<T>&) {});
    return out;
  }
  const Tensor4<T>& pv = probs.value();
  double total = 0.0;
  for (std::size_t idx : where) total += value(static_cast<double>(pv[idx]));
  const double inv_count = 1.0 / static_cast<double>(where.size());
  out.value = make_node<T>(Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(total * inv_count)), {probs}, op,
                           [where = std::move(where), inv_count, deriv](Node<T>& self) {
    Node<T>& pn = *self.parents[0];
    Tensor4<T>& g = pn.ensure_grad();
    const double up = static_cast<double>(self.grad[0]) * inv_count;
    for (std::size_t idx : where) g[idx] += static_cast<T>(up * deriv(static_cast<double>(pn.value[idx])));
  });
  return out;
}

}  // namespace

template <typename T>
SupervisedLoss<T> partial_ce(const Var<T>& probs, std::span<const ScribbleMap> scribbles) {
  return annotated_mean(
      probs, scribbles, "partial_ce", [](double p) { return -std::log(std::max(p, kProbClamp)); },
      [](double p) { return p > kProbClamp ? -1.0 / p : 0.0; });
}

template <typename T>
SupervisedLoss<T> sup_loss(const Var<T>& probs, std::span<const ScribbleMap> scribbles) {
  return annotated_mean(
      probs, scribbles, "sup_loss",
      [](double p) { return -(std::log(std::max(p, kProbClamp)) + 2.0 * p / (1.0 + p)); },
      [](double p) {
        const double dlog = p > kProbClamp ? 1.0 / p : 0.0;
        return -(dlog + 2.0 / ((1.0 + p) * (1.0 + p)));
      });
}

template <typename T>
Var<T> cosine_loss(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "cosine_loss");
  const Shape4 s = a.shape();
  if (s.n == 0) throw ContractViolation("cosine_loss: empty batch");
  const std::size_t per = s.c * s.plane();
  struct Stat {
    double dot, na, nb;
  };
  std::vector<Stat> stats(s.n);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* pa = a.value().data().data() + n * per;
    const T* pb = b.value().data().data() + n * per;
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      dot += static_cast<double>(pa[i]) * pb[i];
      aa += static_cast<double>(pa[i]) * pa[i];
      bb += static_cast<double>(pb[i]) * pb[i];
    }
    if (!(aa > 0.0) || !(bb > 0.0)) {
      throw ContractViolation("cosine_loss: sample " + std::to_string(n) + " has a zero-norm argument");
    }
    stats[n] = {dot, std::sqrt(aa), std::sqrt(bb)};
    total += -dot / (stats[n].na * stats[n].nb);
  }
  const double inv_n = 1.0 / static_cast<double>(s.n);
  return make_node<T>(Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(total * inv_n)), {a, b}, "cosine_loss",
                      [stats = std::move(stats), inv_n, per](Node<T>& self) {
    Node<T>& an = *self.parents[0];
    Node<T>& bn = *self.parents[1];
    const double up = -static_cast<double>(self.grad[0]) * inv_n;
    for (std::size_t n = 0; n < stats.size(); ++n) {
      const auto [dot, na, nb] = stats[n];
      const double cos = dot / (na * nb);
      const T* pa = an.value.data().data() + n * per;
      const T* pb = bn.value.data().data() + n * per;
      if (an.requires_grad) {
        T* ga = an.ensure_grad().data().data() + n * per;
        for (std::size_t i = 0; i < per; ++i) {
          ga[i] += static_cast<T>(up * (pb[i] / (na * nb) - cos * pa[i] / (na * na)));
        }
      }
      if (bn.requires_grad) {
        T* gb = bn.ensure_grad().data().data() + n * per;
        for (std::size_t i = 0; i < per; ++i) {
          gb[i] += static_cast<T>(up * (pa[i] / (na * nb) - cos * pb[i] / (nb * nb)));
        }
      }
    }
  });
}

template <typename T>
Var<T> mix_invariant_from_outputs(const Var<T>& out_mixed, const Var<T>& out_1, const Var<T>& out_2, double alpha,
                                  bool stop_gradient_target) {
  Var<T> target = axpby(alpha, out_1, 1.0 - alpha, out_2);
  if (stop_gradient_target) target = detach(target);
  return cosine_loss(out_mixed, target);
}

template <typename T>
Var<T> mix_invariant_loss(const SegModel<T>& model, const Var<T>& x1c, const Var<T>& x2c, const Var<T>& x_mixed,
                          double alpha, SeededRng& rng, bool training, bool stop_gradient_target) {
  require_same_shape(x1c.shape(), x2c.shape(), "mix_invariant_loss");
  require_same_shape(x1c.shape(), x_mixed.shape(), "mix_invariant_loss");
  Var<T> out_mixed = model.forward(x_mixed, training, rng);
  Var<T> out_1 = model.forward(x1c, training, rng);
  Var<T> out_2 = model.forward(x2c, training, rng);
  return mix_invariant_from_outputs(out_mixed, out_1, out_2, alpha, stop_gradient_target);
}

template <typename T>
Var<T> vicinal_reg_loss(const Var<T>& virtual_out, const Var<T>& individual_out, bool stop_gradient_target) {
  return cosine_loss(virtual_out, stop_gradient_target ? detach(individual_out) : individual_out);
}

template <typename T>
SupervisedLoss<T> vicinal_sup_loss(const Var<T>& virtual_out, const Var<T>& individual_out,
                                   std::span<const ScribbleMap> scribbles) {
  SupervisedLoss<T> v = sup_loss(virtual_out, scribbles);
  SupervisedLoss<T> i = sup_loss(individual_out, scribbles);
  return {sum_scalars({v.value, i.value}), v.annotated};
}

LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {{"pce", parts.pce},
                                                  {"inv", parts.inv},
                                                  {"vicinal_sup", parts.vicinal_sup},
                                                  {"vicinal_reg", parts.vicinal_reg}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite loss part '") + name + "'");
  }
  LossBreakdown out;
  out.pce = weights.pce * parts.pce;
  out.inv = weights.inv * parts.inv;
  out.vicinal_sup = weights.vicinal_sup * parts.vicinal_sup;
  out.vicinal_reg = weights.vicinal_reg * parts.vicinal_reg;
  out.total = out.pce + out.inv + out.vicinal_sup + out.vicinal_reg;
  return out;
}

VariantSpec variant_spec(int variant) {
  switch (variant) {
    case 1: return {1, true, false, false, false, false};
    case 2: return {2, true, true, false, false, false};
    case 3: return {3, true, true, true, false, false};
    case 4: return {4, true, true, true, true, false};
    case 5: return {5, true, true, false, false, true};
    default: throw ContractViolation("unknown ablation variant " + std::to_string(variant) + " (expected 1..5)");
  }
}

LossParts mask_parts(const LossParts& parts, const VariantSpec& spec) {
  return {spec.pce ? parts.pce : 0.0, spec.inv ? parts.inv : 0.0, spec.vicinal_sup ? parts.vicinal_sup : 0.0,
          spec.vicinal_reg ? parts.vicinal_reg : 0.0};
}

#define MODELMIX_INSTANTIATE_LOSSES(T)                                                                  \
  template SupervisedLoss<T> partial_ce(const Var<T>&, std::span<const ScribbleMap>);                  \
  template SupervisedLoss<T> sup_loss(const Var<T>&, std::span<const ScribbleMap>);                    \
  template Var<T> cosine_loss(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mix_invariant_from_outputs(const Var<T>&, const Var<T>&, const Var<T>&, double, bool); \
  template Var<T> mix_invariant_loss(const SegModel<T>&, const Var<T>&, const Var<T>&, const Var<T>&,  \
                                     double, SeededRng&, bool, bool);                                  \
  template Var<T> vicinal_reg_loss(const Var<T>&, const Var<T>&, bool);                                \
  template SupervisedLoss<T> vicinal_sup_loss(const Var<T>&, const Var<T>&, std::span<const ScribbleMap>);

MODELMIX_INSTANTIATE_LOSSES(float)
MODELMIX_INSTANTIATE_LOSSES(double)

}  // namespace modelmix
