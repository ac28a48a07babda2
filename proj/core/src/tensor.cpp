#include "modelmix/tensor.hpp"

#include <cmath>

namespace modelmix {

std::string Shape4::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
         std::to_string(w) + ")";
}

void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
  if (a != b) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

template <typename T>
bool all_finite(const Tensor4<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

template bool all_finite(const Tensor4<float>&);
template bool all_finite(const Tensor4<double>&);
template double max_abs_diff(const Tensor4<float>&, const Tensor4<float>&);
template double max_abs_diff(const Tensor4<double>&, const Tensor4<double>&);

}  // namespace modelmix
