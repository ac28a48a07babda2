#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modelmix/autodiff.hpp"
#include "modelmix/rng.hpp"

namespace modelmix {

/// Mini U-Net description. Stage s has base_channels * 2^s channels.
struct UNetConfig {
  int depth = 3;
  int base_channels = 8;
  int in_channels = 1;
  int num_classes = 2;
  double dropout_rate = 0.5;

  /// Throws ContractViolation with the offending field named.
  void validate() const;
  std::size_t stage_channels(int stage) const;
  /// Input height and width must be multiples of this.
  std::size_t input_divisor() const;
  /// Closed-form parameter count of the network built from this config.
  std::size_t parameter_count() const;
  /// Encoders of the two configs have identical layer shapes.
  bool encoder_compatible(const UNetConfig& other) const;
  void validate_input(const Shape4& x) const;

  bool operator==(const UNetConfig&) const = default;
};

/// One convolution in the encoder: stage, then conv within the stage (0 or 1).
struct LayerAddress {
  int stage = 0;
  int conv_index = 0;

  std::string str() const;
  auto operator<=>(const LayerAddress&) const = default;
};

/// Plain-value snapshot of a convolution's parameters.
template <typename T>
struct ConvParams {
  Tensor4<T> kernel;  // (out_c, in_c, kh, kw)
  std::vector<T> bias;

  bool operator==(const ConvParams&) const = default;
};

template <typename T>
struct ConvLayer {
  Var<T> kernel;
  Var<T> bias;  // (1, out_c, 1, 1)
};

/// Replaces one encoder convolution for a single forward pass.
template <typename T>
struct LayerOverride {
  LayerAddress address;
  Var<T> kernel;
  Var<T> bias;
};

/// Encoder stages are [dropout -> conv3x3 -> relu -> conv3x3 -> relu], max-pooled
/// between stages. The decoder mirrors them with nearest upsampling and skip
/// concatenation, then a 1x1 head and channel softmax.
///
/// Copies of a SegModel would alias parameters, so the type is move-only;
/// use clone() for an independent copy.
template <typename T>
class SegModel {
 public:
  SegModel(const UNetConfig& cfg, std::string task_id, SeededRng& rng);
  SegModel(SegModel&&) noexcept = default;
  SegModel& operator=(SegModel&&) noexcept = default;
  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;

  const UNetConfig& config() const { return cfg_; }
  const std::string& task_id() const { return task_id_; }

  /// Per-stage feature maps (after the second relu, before pooling).
  std::vector<Var<T>> encode(const Var<T>& x, bool training, SeededRng& rng,
                             std::span<const LayerOverride<T>> overrides = {}) const;
  Var<T> decode(const std::vector<Var<T>>& features) const;
  Var<T> forward(const Var<T>& x, bool training, SeededRng& rng) const;
  /// Eval-mode probabilities without keeping a graph.
  Tensor4<T> predict(const Tensor4<T>& x) const;

  ConvParams<T> get_conv(const LayerAddress& addr) const;
  void set_conv(const LayerAddress& addr, const ConvParams<T>& params);
  const ConvLayer<T>& encoder_layer(const LayerAddress& addr) const;
  std::vector<LayerAddress> enumerate_encoder_layers() const;

  /// Encoder, decoder, head; deterministic order.
  std::vector<std::pair<std::string, Var<T>>> named_parameters() const;
  std::vector<Var<T>> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Makes this model's encoder use `other`'s encoder parameter storage.
  void share_encoder_with(const SegModel& other);
  SegModel clone() const;

 private:
  SegModel() = default;
  void check_address(const LayerAddress& addr) const;

  UNetConfig cfg_;
  std::string task_id_;
  std::vector<std::array<ConvLayer<T>, 2>> encoder_;
  std::vector<std::array<ConvLayer<T>, 2>> decoder_;  // index = level it outputs to
  ConvLayer<T> head_;
};

template <typename T>
SegModel<T> build_model(const UNetConfig& cfg, const std::string& task_id, SeededRng& rng) {
  return SegModel<T>(cfg, task_id, rng);
}

extern template class SegModel<float>;
extern template class SegModel<double>;

}  // namespace modelmix
