#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modelmix {

/// Raised when an operation's shape or range precondition is violated.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

/// Dense (batch, channel, height, width) array in row-major order.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ContractViolation("Tensor4: data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::size_t index(std::size_t in, std::size_t ic, std::size_t y, std::size_t x) const {
    return ((in * shape_.c + ic) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(std::size_t in, std::size_t ic, std::size_t y, std::size_t x) {
    return data_[index(in, ic, y, x)];
  }
  const T& operator()(std::size_t in, std::size_t ic, std::size_t y, std::size_t x) const {
    return data_[index(in, ic, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* plane(std::size_t in, std::size_t ic) { return data_.data() + index(in, ic, 0, 0); }
  const T* plane(std::size_t in, std::size_t ic) const { return data_.data() + index(in, ic, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor4<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

/// Throws ContractViolation naming both shapes when they differ.
void require_same_shape(const Shape4& a, const Shape4& b, const char* op);

/// True when every element is finite.
template <typename T>
bool all_finite(const Tensor4<T>& t);

/// Largest |a - b| over all elements; shapes must match.
template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b);

extern template bool all_finite(const Tensor4<float>&);
extern template bool all_finite(const Tensor4<double>&);
extern template double max_abs_diff(const Tensor4<float>&, const Tensor4<float>&);
extern template double max_abs_diff(const Tensor4<double>&, const Tensor4<double>&);

}  // namespace modelmix
