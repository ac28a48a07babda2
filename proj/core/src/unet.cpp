#include "modelmix/unet.hpp"

#include <cmath>

#include "modelmix/ops.hpp"

namespace modelmix {

void UNetConfig::validate() const {
  if (depth < 2) throw ContractViolation("UNetConfig: depth must be >= 2, got " + std::to_string(depth));
  if (depth > 8) throw ContractViolation("UNetConfig: depth must be <= 8, got " + std::to_string(depth));
  if (base_channels < 4) {
    throw ContractViolation("UNetConfig: base_channels must be >= 4, got " + std::to_string(base_channels));
  }
  if (in_channels < 1) throw ContractViolation("UNetConfig: in_channels must be >= 1");
  if (num_classes < 2) {
    throw ContractViolation("UNetConfig: num_classes must be >= 2, got " + std::to_string(num_classes));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ContractViolation("UNetConfig: dropout_rate must lie in [0, 1), got " + std::to_string(dropout_rate));
  }
}

std::size_t UNetConfig::stage_channels(int stage) const {
  return static_cast<std::size_t>(base_channels) << stage;
}

std::size_t UNetConfig::input_divisor() const { return std::size_t{1} << (depth - 1); }

std::size_t UNetConfig::parameter_count() const {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; };
  std::size_t total = 0;
  for (int s = 0; s < depth; ++s) {
    const std::size_t in = s == 0 ? static_cast<std::size_t>(in_channels) : stage_channels(s - 1);
    total += conv(in, stage_channels(s), 3) + conv(stage_channels(s), stage_channels(s), 3);
  }
  for (int l = 0; l + 1 < depth; ++l) {
    total += conv(stage_channels(l + 1) + stage_channels(l), stage_channels(l), 3) +
             conv(stage_channels(l), stage_channels(l), 3);
  }
  total += conv(stage_channels(0), static_cast<std::size_t>(num_classes), 1);
  return total;
}

bool UNetConfig::encoder_compatible(const UNetConfig& other) const {
  return depth == other.depth && base_channels == other.base_channels && in_channels == other.in_channels;
}

void UNetConfig::validate_input(const Shape4& x) const {
  if (x.c != static_cast<std::size_t>(in_channels)) {
    throw ContractViolation("SegModel: input has " + std::to_string(x.c) + " channels, config expects " +
                            std::to_string(in_channels));
  }
  const std::size_t d = input_divisor();
  if (x.h == 0 || x.w == 0 || x.h % d != 0 || x.w % d != 0) {
    throw ContractViolation("SegModel: input spatial dims " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                            " must be positive multiples of " + std::to_string(d) + " for depth " +
                            std::to_string(depth));
  }
}

std::string LayerAddress::str() const {
  return "encoder." + std::to_string(stage) + "." + std::to_string(conv_index);
}

namespace {

// He-style uniform init: kernel ~ U(-sqrt(6/fan_in), +), bias ~ U(-1/sqrt(fan_in), +).
template <typename T>
ConvLayer<T> init_conv(std::size_t in, std::size_t out, std::size_t k, SeededRng& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  const double kb = std::sqrt(6.0 / fan_in);
  const double bb = 1.0 / std::sqrt(fan_in);
  Tensor4<T> kernel(Shape4{out, in, k, k});
  for (T& v : kernel.data()) v = static_cast<T>(rng.uniform(-kb, kb));
  Tensor4<T> bias(Shape4{1, out, 1, 1});
  for (T& v : bias.data()) v = static_cast<T>(rng.uniform(-bb, bb));
  return {Var<T>::leaf(std::move(kernel), true), Var<T>::leaf(std::move(bias), true)};
}

template <typename T>
ConvLayer<T> clone_layer(const ConvLayer<T>& l) {
  return {Var<T>::leaf(l.kernel.value(), true), Var<T>::leaf(l.bias.value(), true)};
}

template <typename T>
Var<T> apply_conv(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  return conv2d(x, kernel, bias, 1, kernel.shape().h / 2);
}

}  // namespace

template <typename T>
SegModel<T>::SegModel(const UNetConfig& cfg, std::string task_id, SeededRng& rng)
    : cfg_(cfg), task_id_(std::move(task_id)) {
  cfg_.validate();
  for (int s = 0; s < cfg_.depth; ++s) {
    const std::size_t in = s == 0 ? static_cast<std::size_t>(cfg_.in_channels) : cfg_.stage_channels(s - 1);
    const std::size_t out = cfg_.stage_channels(s);
    encoder_.push_back({init_conv<T>(in, out, 3, rng), init_conv<T>(out, out, 3, rng)});
  }
  decoder_.resize(static_cast<std::size_t>(cfg_.depth - 1));
  for (int l = cfg_.depth - 2; l >= 0; --l) {
    const std::size_t out = cfg_.stage_channels(l);
    const std::size_t in = cfg_.stage_channels(l + 1) + out;
    decoder_[static_cast<std::size_t>(l)] = {init_conv<T>(in, out, 3, rng), init_conv<T>(out, out, 3, rng)};
  }
  head_ = init_conv<T>(cfg_.stage_channels(0), static_cast<std::size_t>(cfg_.num_classes), 1, rng);
}

template <typename T>
void SegModel<T>::check_address(const LayerAddress& addr) const {
  if (addr.stage < 0 || addr.stage >= cfg_.depth || addr.conv_index < 0 || addr.conv_index > 1) {
    throw ContractViolation("SegModel: invalid encoder address (stage " + std::to_string(addr.stage) + ", conv " +
                            std::to_string(addr.conv_index) + "); valid stages 0.." +
                            std::to_string(cfg_.depth - 1) + ", conv indices 0..1");
  }
}

template <typename T>
std::vector<Var<T>> SegModel<T>::encode(const Var<T>& x, bool training, SeededRng& rng,
                                        std::span<const LayerOverride<T>> overrides) const {
  cfg_.validate_input(x.shape());
  for (const auto& ov : overrides) check_address(ov.address);

  auto layer_for = [&](int stage, int idx) -> std::pair<const Var<T>*, const Var<T>*> {
    for (const auto& ov : overrides) {
      if (ov.address.stage == stage && ov.address.conv_index == idx) return {&ov.kernel, &ov.bias};
    }
    const auto& l = encoder_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(idx)];
    return {&l.kernel, &l.bias};
  };

  std::vector<Var<T>> features;
  features.reserve(static_cast<std::size_t>(cfg_.depth));
  Var<T> h = x;
  for (int s = 0; s < cfg_.depth; ++s) {
    if (s > 0) h = max_pool_2x2(h);
    h = dropout(h, cfg_.dropout_rate, rng, training);
    for (int k = 0; k < 2; ++k) {
      auto [kernel, bias] = layer_for(s, k);
      h = relu(apply_conv(h, *kernel, *bias));
    }
    features.push_back(h);
  }
  return features;
}

template <typename T>
Var<T> SegModel<T>::decode(const std::vector<Var<T>>& features) const {
  if (features.size() != static_cast<std::size_t>(cfg_.depth)) {
    throw ContractViolation("SegModel::decode: expected " + std::to_string(cfg_.depth) + " feature maps, got " +
                            std::to_string(features.size()));
  }
  Var<T> d = features.back();
  for (int l = cfg_.depth - 2; l >= 0; --l) {
    const auto& block = decoder_[static_cast<std::size_t>(l)];
    d = concat_channels(upsample_nearest_2x2(d), features[static_cast<std::size_t>(l)]);
    d = relu(apply_conv(d, block[0].kernel, block[0].bias));
    d = relu(apply_conv(d, block[1].kernel, block[1].bias));
  }
  return channel_softmax(apply_conv(d, head_.kernel, head_.bias));
}

template <typename T>
Var<T> SegModel<T>::forward(const Var<T>& x, bool training, SeededRng& rng) const {
  return decode(encode(x, training, rng));
}

template <typename T>
Tensor4<T> SegModel<T>::predict(const Tensor4<T>& x) const {
  SeededRng unused(0);
  return forward(Var<T>::leaf(x), false, unused).value();
}

template <typename T>
ConvParams<T> SegModel<T>::get_conv(const LayerAddress& addr) const {
  const auto& l = encoder_layer(addr);
  const auto& b = l.bias.value().storage();
  return {l.kernel.value(), std::vector<T>(b.begin(), b.end())};
}

template <typename T>
void SegModel<T>::set_conv(const LayerAddress& addr, const ConvParams<T>& params) {
  check_address(addr);
  auto& l = encoder_[static_cast<std::size_t>(addr.stage)][static_cast<std::size_t>(addr.conv_index)];
  require_same_shape(l.kernel.shape(), params.kernel.shape(), "SegModel::set_conv kernel");
  if (params.bias.size() != l.bias.value().numel()) {
    throw ContractViolation("SegModel::set_conv: bias has " + std::to_string(params.bias.size()) +
                            " elements, layer expects " + std::to_string(l.bias.value().numel()));
  }
  l.kernel.mutable_value() = params.kernel;
  std::copy(params.bias.begin(), params.bias.end(), l.bias.mutable_value().data().begin());
}

template <typename T>
const ConvLayer<T>& SegModel<T>::encoder_layer(const LayerAddress& addr) const {
  check_address(addr);
  return encoder_[static_cast<std::size_t>(addr.stage)][static_cast<std::size_t>(addr.conv_index)];
}

template <typename T>
std::vector<LayerAddress> SegModel<T>::enumerate_encoder_layers() const {
  std::vector<LayerAddress> out;
  for (int s = 0; s < cfg_.depth; ++s) {
    for (int k = 0; k < 2; ++k) out.push_back({s, k});
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Var<T>>> SegModel<T>::named_parameters() const {
  std::vector<std::pair<std::string, Var<T>>> out;
  auto push = [&](const std::string& prefix, const ConvLayer<T>& l) {
    out.emplace_back(prefix + ".kernel", l.kernel);
    out.emplace_back(prefix + ".bias", l.bias);
  };
  for (int s = 0; s < cfg_.depth; ++s) {
    for (int k = 0; k < 2; ++k) push(LayerAddress{s, k}.str(), encoder_[s][k]);
  }
  for (int l = 0; l + 1 < cfg_.depth; ++l) {
    for (int k = 0; k < 2; ++k) {
      push("decoder." + std::to_string(l) + "." + std::to_string(k), decoder_[l][k]);
    }
  }
  push("head", head_);
  return out;
}

template <typename T>
std::vector<Var<T>> SegModel<T>::parameters() const {
  std::vector<Var<T>> out;
  for (auto& [name, v] : named_parameters()) out.push_back(v);
  return out;
}

template <typename T>
std::size_t SegModel<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.value().numel();
  return total;
}

template <typename T>
void SegModel<T>::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

template <typename T>
void SegModel<T>::share_encoder_with(const SegModel& other) {
  if (!cfg_.encoder_compatible(other.cfg_)) {
    throw ContractViolation("SegModel::share_encoder_with: encoder configs differ");
  }
  encoder_ = other.encoder_;
}

template <typename T>
SegModel<T> SegModel<T>::clone() const {
  SegModel copy;
  copy.cfg_ = cfg_;
  copy.task_id_ = task_id_;
  for (const auto& stage : encoder_) copy.encoder_.push_back({clone_layer(stage[0]), clone_layer(stage[1])});
  for (const auto& stage : decoder_) copy.decoder_.push_back({clone_layer(stage[0]), clone_layer(stage[1])});
  copy.head_ = clone_layer(head_);
  return copy;
}

template class SegModel<float>;
template class SegModel<double>;

}  // namespace modelmix
