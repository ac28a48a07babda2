#pragma once

#include <cstddef>

#include "modelmix/autodiff.hpp"
#include "modelmix/rng.hpp"

namespace modelmix {

/// Cross-correlation (no kernel flip).
///
/// x: (n, in_c, h, w); kernel: (out_c, in_c, kh, kw) with odd kh, kw;
/// bias: any shape holding out_c elements. Output spatial size is
/// floor((h + 2 pad - kh) / stride) + 1.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride = 1,
              std::size_t pad = 0);

template <typename T>
Var<T> relu(const Var<T>& x);

/// 2x2 window, stride 2, output dims floor(h/2) x floor(w/2). The gradient
/// goes to the first maximum in row-major window order.
template <typename T>
Var<T> max_pool_2x2(const Var<T>& x);

template <typename T>
Var<T> upsample_nearest_2x2(const Var<T>& x);

/// Concatenates along channels; n, h, w must match.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, double s);

/// alpha * a + beta * b, elementwise.
template <typename T>
Var<T> axpby(double alpha, const Var<T>& a, double beta, const Var<T>& b);

/// Rotates the batch axis: output sample k is input sample (k + shift) mod n.
template <typename T>
Var<T> batch_roll(const Var<T>& x, std::size_t shift);

/// Softmax across channels at every pixel, max-subtracted.
template <typename T>
Var<T> channel_softmax(const Var<T>& x);

/// Inverted dropout: training mode zeroes each element with probability
/// `rate` and scales survivors by 1/(1-rate); eval mode is the identity.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, SeededRng& rng, bool training);

/// sum_i x_i * weights_i as a 1-element Var.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor4<T>& weights);

/// Sum of 1-element Vars.
template <typename T>
Var<T> sum_scalars(std::initializer_list<Var<T>> terms);

template <typename T>
Var<T> scalar_constant(double v) {
  return Var<T>::leaf(Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(v)));
}

#define MODELMIX_DECLARE_OPS(T)                                                                       \
  extern template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t); \
  extern template Var<T> relu(const Var<T>&);                                                        \
  extern template Var<T> max_pool_2x2(const Var<T>&);                                                \
  extern template Var<T> upsample_nearest_2x2(const Var<T>&);                                        \
  extern template Var<T> concat_channels(const Var<T>&, const Var<T>&);                              \
  extern template Var<T> add(const Var<T>&, const Var<T>&);                                          \
  extern template Var<T> scale(const Var<T>&, double);                                               \
  extern template Var<T> axpby(double, const Var<T>&, double, const Var<T>&);                        \
  extern template Var<T> batch_roll(const Var<T>&, std::size_t);                                     \
  extern template Var<T> channel_softmax(const Var<T>&);                                             \
  extern template Var<T> dropout(const Var<T>&, double, SeededRng&, bool);                           \
  extern template Var<T> weighted_sum(const Var<T>&, const Tensor4<T>&);                             \
  extern template Var<T> sum_scalars(std::initializer_list<Var<T>>);

MODELMIX_DECLARE_OPS(float)
MODELMIX_DECLARE_OPS(double)
#undef MODELMIX_DECLARE_OPS

}  // namespace modelmix
