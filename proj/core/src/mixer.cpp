#include "modelmix/mixer.hpp"

#include <algorithm>
#include <cmath>

#include "modelmix/ops.hpp"

namespace modelmix {

void BetaParams::validate() const {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw ContractViolation("BetaParams: a and b must be positive and finite, got (" + std::to_string(a) + ", " +
                            std::to_string(b) + ")");
  }
}

void MixPlan::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ContractViolation("MixPlan: lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (layers.empty()) throw ContractViolation("MixPlan: at least one layer must be mixed");
}

double sample_lambda(const BetaParams& beta, SeededRng& rng) {
  beta.validate();
  const double x = rng.gamma(beta.a);
  const double y = rng.gamma(beta.b);
  const double s = x + y;
  if (!(s > 0.0)) return beta.a >= beta.b ? 1.0 : 0.0;  // both underflowed
  return std::clamp(x / s, 0.0, 1.0);
}

MixPlan sample_mix_plan(const std::string& task_i, const std::string& task_j,
                        const std::vector<LayerAddress>& candidates, const BetaParams& beta, SeededRng& rng,
                        std::size_t count) {
  if (candidates.empty()) throw ContractViolation("sample_mix_plan: no candidate layers");
  if (count < 1 || count > candidates.size()) {
    throw ContractViolation("sample_mix_plan: layer count " + std::to_string(count) + " outside [1, " +
                            std::to_string(candidates.size()) + "]");
  }
  MixPlan plan{task_i, task_j, {}, 0.0};
  std::vector<std::size_t> pool(candidates.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t pick = rng.below(pool.size());
    chosen.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t idx : chosen) plan.layers.push_back(candidates[idx]);
  plan.lambda = sample_lambda(beta, rng);
  return plan;
}

template <typename T>
ConvParams<T> mix_conv(const ConvParams<T>& p_i, const ConvParams<T>& p_j, double lambda) {
  if (p_i.kernel.shape() != p_j.kernel.shape() || p_i.bias.size() != p_j.bias.size()) {
    throw ContractViolation("mix_conv: shape mismatch, kernel " + p_i.kernel.shape().str() + " bias[" +
                            std::to_string(p_i.bias.size()) + "] vs kernel " + p_j.kernel.shape().str() + " bias[" +
                            std::to_string(p_j.bias.size()) + "]");
  }
  const double mu = 1.0 - lambda;
  ConvParams<T> out{Tensor4<T>(p_i.kernel.shape()), std::vector<T>(p_i.bias.size())};
  for (std::size_t k = 0; k < out.kernel.numel(); ++k) {
    out.kernel[k] = static_cast<T>(lambda * p_i.kernel[k] + mu * p_j.kernel[k]);
  }
  for (std::size_t k = 0; k < out.bias.size(); ++k) {
    out.bias[k] = static_cast<T>(lambda * p_i.bias[k] + mu * p_j.bias[k]);
  }
  return out;
}

template <typename T>
ConvLayer<T> mix_conv(const ConvLayer<T>& l_i, const ConvLayer<T>& l_j, double lambda) {
  if (l_i.kernel.shape() != l_j.kernel.shape() || l_i.bias.shape() != l_j.bias.shape()) {
    throw ContractViolation("mix_conv: shape mismatch, kernel " + l_i.kernel.shape().str() + " vs " +
                            l_j.kernel.shape().str());
  }
  return {axpby(lambda, l_i.kernel, 1.0 - lambda, l_j.kernel), axpby(lambda, l_i.bias, 1.0 - lambda, l_j.bias)};
}

template <typename T>
VirtualEncoder<T>::VirtualEncoder(const SegModel<T>& enc_i, const SegModel<T>& enc_j, MixPlan plan)
    : enc_i_(&enc_i), enc_j_(&enc_j), plan_(std::move(plan)) {
  if (!enc_i.config().encoder_compatible(enc_j.config())) {
    throw ContractViolation("build_virtual_encoder: encoders of '" + enc_i.task_id() + "' and '" + enc_j.task_id() +
                            "' have different configurations");
  }
  plan_.validate();
  for (const auto& addr : plan_.layers) enc_i.encoder_layer(addr);  // throws on bad address
}

template <typename T>
std::vector<Var<T>> VirtualEncoder<T>::encode(const Var<T>& x, bool training, SeededRng& rng) const {
  std::vector<LayerOverride<T>> overrides;
  for (const auto& addr : plan_.layers) {
    ConvLayer<T> mixed = mix_conv(enc_i_->encoder_layer(addr), enc_j_->encoder_layer(addr), plan_.lambda);
    overrides.push_back({addr, mixed.kernel, mixed.bias});
  }
  return enc_i_->encode(x, training, rng, overrides);
}

template <typename T>
Var<T> VirtualEncoder<T>::forward(const Var<T>& x, bool training, SeededRng& rng) const {
  return enc_i_->decode(encode(x, training, rng));
}

template <typename T>
double verify_feature_linearity(const ConvParams<T>& p_i, const ConvParams<T>& p_j, double lambda,
                                const Tensor4<T>& x, bool with_nonlinearity) {
  const ConvParams<T> mixed = mix_conv(p_i, p_j, lambda);
  const std::size_t pad = p_i.kernel.h() / 2;
  auto run = [&](const ConvParams<T>& p) {
    Tensor4<T> bias(Shape4{1, p.bias.size(), 1, 1}, std::vector<T>(p.bias));
    Var<T> y = conv2d(Var<T>::leaf(x), Var<T>::leaf(p.kernel), Var<T>::leaf(std::move(bias)), 1, pad);
    return with_nonlinearity ? relu(y) : y;
  };
  const Var<T> lhs = run(mixed);
  const Var<T> rhs = axpby(lambda, run(p_i), 1.0 - lambda, run(p_j));
  return max_abs_diff(lhs.value(), rhs.value());
}

template ConvParams<float> mix_conv(const ConvParams<float>&, const ConvParams<float>&, double);
template ConvParams<double> mix_conv(const ConvParams<double>&, const ConvParams<double>&, double);
template ConvLayer<float> mix_conv(const ConvLayer<float>&, const ConvLayer<float>&, double);
template ConvLayer<double> mix_conv(const ConvLayer<double>&, const ConvLayer<double>&, double);
template class VirtualEncoder<float>;
template class VirtualEncoder<double>;
template double verify_feature_linearity(const ConvParams<float>&, const ConvParams<float>&, double,
                                         const Tensor4<float>&, bool);
template double verify_feature_linearity(const ConvParams<double>&, const ConvParams<double>&, double,
                                         const Tensor4<double>&, bool);

}  // namespace modelmix
