#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "modelmix/autodiff.hpp"

namespace modelmix {

struct GradCheckReport {
  std::string op_name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool passed = false;
  std::string failure;  // empty unless the check aborted
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t directions = 6;         // random directional probes per input
  std::size_t max_coordinates = 4096;  // per-element probes for inputs up to this size
  std::uint64_t seed = 12345;
};

using DifferentiableFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of a random projection of `fn`'s output
/// against central differences, both along random directions (JVPs) and
/// per coordinate for small inputs. Relative error uses the denominator
/// max(|fd|, |ad|, 1e-6 * max(1, |grad|_inf)).
GradCheckReport finite_difference_check(const std::string& op_name, const DifferentiableFn& fn,
                                         const std::vector<Tensor4<double>>& inputs,
                                         const GradCheckOptions& options = {});

}  // namespace modelmix
