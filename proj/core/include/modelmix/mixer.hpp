#pragma once

#include <span>
#include <string>
#include <vector>

#include "modelmix/unet.hpp"

namespace modelmix {

struct BetaParams {
  double a = 1.0;
  double b = 1.0;

  void validate() const;
  bool operator==(const BetaParams&) const = default;
};

/// One directed virtual encoder: task_i's encoder with `layers` replaced by
/// lambda * (task_i layer) + (1 - lambda) * (task_j layer).
struct MixPlan {
  std::string task_i;
  std::string task_j;
  std::vector<LayerAddress> layers;  // one entry unless multi-layer mixing is enabled
  double lambda = 1.0;

  void validate() const;
};

/// Draw from Beta(a, b) via two gamma variates; always in [0, 1].
double sample_lambda(const BetaParams& beta, SeededRng& rng);

/// Uniformly picks `count` distinct encoder layers (in enumeration order) and a lambda.
MixPlan sample_mix_plan(const std::string& task_i, const std::string& task_j,
                        const std::vector<LayerAddress>& candidates, const BetaParams& beta, SeededRng& rng,
                        std::size_t count = 1);

/// lambda * p_i + (1 - lambda) * p_j for kernel and bias.
template <typename T>
ConvParams<T> mix_conv(const ConvParams<T>& p_i, const ConvParams<T>& p_j, double lambda);

/// Differentiable form used inside virtual encoders.
template <typename T>
ConvLayer<T> mix_conv(const ConvLayer<T>& l_i, const ConvLayer<T>& l_j, double lambda);

/// Non-owning view of the virtual encoder for one MixPlan. Forward passes
/// read both encoders' parameters; gradients reach both at the mixed layers
/// (scaled by lambda and 1 - lambda) and enc_i everywhere else.
template <typename T>
class VirtualEncoder {
 public:
  VirtualEncoder(const SegModel<T>& enc_i, const SegModel<T>& enc_j, MixPlan plan);

  std::vector<Var<T>> encode(const Var<T>& x, bool training, SeededRng& rng) const;
  /// enc_i's own decoder applied to the virtual features.
  Var<T> forward(const Var<T>& x, bool training, SeededRng& rng) const;

  const MixPlan& plan() const { return plan_; }

 private:
  const SegModel<T>* enc_i_;
  const SegModel<T>* enc_j_;
  MixPlan plan_;
};

template <typename T>
VirtualEncoder<T> build_virtual_encoder(const SegModel<T>& enc_i, const SegModel<T>& enc_j, MixPlan plan) {
  return VirtualEncoder<T>(enc_i, enc_j, std::move(plan));
}

/// max |conv(x, mix(p_i, p_j)) - (lambda conv(x, p_i) + (1 - lambda) conv(x, p_j))|.
/// With `with_nonlinearity`, relu is applied to each of the three conv outputs
/// first (the property is expected to fail then).
template <typename T>
double verify_feature_linearity(const ConvParams<T>& p_i, const ConvParams<T>& p_j, double lambda,
                                const Tensor4<T>& x, bool with_nonlinearity);

extern template ConvParams<float> mix_conv(const ConvParams<float>&, const ConvParams<float>&, double);
extern template ConvParams<double> mix_conv(const ConvParams<double>&, const ConvParams<double>&, double);
extern template ConvLayer<float> mix_conv(const ConvLayer<float>&, const ConvLayer<float>&, double);
extern template ConvLayer<double> mix_conv(const ConvLayer<double>&, const ConvLayer<double>&, double);
extern template class VirtualEncoder<float>;
extern template class VirtualEncoder<double>;
extern template double verify_feature_linearity(const ConvParams<float>&, const ConvParams<float>&, double,
                                                const Tensor4<float>&, bool);
extern template double verify_feature_linearity(const ConvParams<double>&, const ConvParams<double>&, double,
                                                const Tensor4<double>&, bool);

}  // namespace modelmix
