#pragma once

#include <span>
#include <stdexcept>
#include <string>

#include "modelmix/autodiff.hpp"
#include "modelmix/grid.hpp"
#include "modelmix/unet.hpp"

namespace modelmix {

/// Probabilities below this are clamped before taking logs.
inline constexpr double kProbClamp = 1e-7;

/// A scribble-supervised loss value plus the number of annotated pixels it
/// averaged over. annotated == 0 means the value is exactly 0 and carries no
/// gradient.
template <typename T>
struct SupervisedLoss {
  Var<T> value;
  std::size_t annotated = 0;
};

/// Mean over annotated pixels of -log p_true.
template <typename T>
SupervisedLoss<T> partial_ce(const Var<T>& probs, std::span<const ScribbleMap> scribbles);

/// Mean over annotated pixels of -[log p_c + 2 p_c / (1 + p_c)]: cross-entropy
/// plus the per-pixel Dice-style term for a one-hot target of class c.
template <typename T>
SupervisedLoss<T> sup_loss(const Var<T>& probs, std::span<const ScribbleMap> scribbles);

/// Batch mean of the negative cosine similarity between per-sample flattened
/// (c, h, w) vectors. Zero-norm samples are a ContractViolation.
template <typename T>
Var<T> cosine_loss(const Var<T>& a, const Var<T>& b);

/// Mix-invariance from precomputed outputs:
/// cosine_loss(out_mixed, alpha * out_1 + (1 - alpha) * out_2).
template <typename T>
Var<T> mix_invariant_from_outputs(const Var<T>& out_mixed, const Var<T>& out_1, const Var<T>& out_2, double alpha,
                                  bool stop_gradient_target = false);

/// Runs the three forward passes through `model`, then the loss above. The
/// caller guarantees x_mixed = alpha * x1c + (1 - alpha) * x2c.
template <typename T>
Var<T> mix_invariant_loss(const SegModel<T>& model, const Var<T>& x1c, const Var<T>& x2c, const Var<T>& x_mixed,
                          double alpha, SeededRng& rng, bool training = true, bool stop_gradient_target = false);

/// cosine_loss(virtual, individual) for one directed pair.
template <typename T>
Var<T> vicinal_reg_loss(const Var<T>& virtual_out, const Var<T>& individual_out, bool stop_gradient_target = false);

/// sup_loss on the virtual output plus sup_loss on the individual output for
/// one directed pair; `annotated` is the per-term pixel count.
template <typename T>
SupervisedLoss<T> vicinal_sup_loss(const Var<T>& virtual_out, const Var<T>& individual_out,
                                   std::span<const ScribbleMap> scribbles);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossParts {
  double pce = 0.0;
  double inv = 0.0;
  double vicinal_sup = 0.0;
  double vicinal_reg = 0.0;
};

struct LossWeights {
  double pce = 1.0;
  double inv = 1.0;
  double vicinal_sup = 1.0;
  double vicinal_reg = 1.0;
  bool operator==(const LossWeights&) const = default;
};

/// Weighted contributions of each objective and their sum.
struct LossBreakdown {
  double pce = 0.0;
  double inv = 0.0;
  double vicinal_sup = 0.0;
  double vicinal_reg = 0.0;
  double total = 0.0;
  bool operator==(const LossBreakdown&) const = default;
};

/// Sums the parts (unweighted by default). Throws NonFiniteLoss naming the
/// first non-finite part.
LossBreakdown total_loss(const LossParts& parts, const LossWeights& weights = {});

/// Which objectives an ablation variant enables.
struct VariantSpec {
  int id = 4;
  bool pce = false;
  bool inv = false;
  bool vicinal_sup = false;
  bool vicinal_reg = false;
  bool shared_encoder = false;
};

/// #1 {pce}; #2 {pce, inv}; #3 {pce, inv, vicinal-sup}; #4 all four;
/// #5 shared encoder {pce, inv}.
VariantSpec variant_spec(int variant);

/// Zeroes parts the variant disables.
LossParts mask_parts(const LossParts& parts, const VariantSpec& spec);

#define MODELMIX_DECLARE_LOSSES(T)                                                                             \
  extern template SupervisedLoss<T> partial_ce(const Var<T>&, std::span<const ScribbleMap>);                  \
  extern template SupervisedLoss<T> sup_loss(const Var<T>&, std::span<const ScribbleMap>);                    \
  extern template Var<T> cosine_loss(const Var<T>&, const Var<T>&);                                           \
  extern template Var<T> mix_invariant_from_outputs(const Var<T>&, const Var<T>&, const Var<T>&, double, bool); \
  extern template Var<T> mix_invariant_loss(const SegModel<T>&, const Var<T>&, const Var<T>&, const Var<T>&,  \
                                            double, SeededRng&, bool, bool);                                  \
  extern template Var<T> vicinal_reg_loss(const Var<T>&, const Var<T>&, bool);                                \
  extern template SupervisedLoss<T> vicinal_sup_loss(const Var<T>&, const Var<T>&, std::span<const ScribbleMap>);

MODELMIX_DECLARE_LOSSES(float)
MODELMIX_DECLARE_LOSSES(double)
#undef MODELMIX_DECLARE_LOSSES

}  // namespace modelmix
