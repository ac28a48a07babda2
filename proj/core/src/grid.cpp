#include "modelmix/grid.hpp"

#include <algorithm>

namespace modelmix {

std::size_t ScribbleMap::annotated_count() const {
  return static_cast<std::size_t>(
      std::count_if(labels.data.begin(), labels.data.end(), [u = unlabeled()](std::uint8_t v) { return v != u; }));
}

void ScribbleMap::validate() const {
  if (num_classes < 1 || num_classes > 254) {
    throw ContractViolation("ScribbleMap: num_classes out of range: " + std::to_string(num_classes));
  }
  for (std::uint8_t v : labels.data) {
    if (v > num_classes) {
      throw ContractViolation("ScribbleMap: label " + std::to_string(v) + " outside [0, " +
                              std::to_string(num_classes) + "]");
    }
  }
}

template <typename T>
Tensor4<T> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) return {};
  const std::size_t h = images.front()->h, w = images.front()->w;
  Tensor4<T> out(Shape4{images.size(), 1, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n]->h != h || images[n]->w != w) {
      throw ContractViolation("stack_images: image " + std::to_string(n) + " has different dimensions");
    }
    T* dst = out.plane(n, 0);
    for (std::size_t i = 0; i < h * w; ++i) dst[i] = static_cast<T>(images[n]->data[i]);
  }
  return out;
}

template Tensor4<float> stack_images(const std::vector<const Image*>&);
template Tensor4<double> stack_images(const std::vector<const Image*>&);

}  // namespace modelmix
