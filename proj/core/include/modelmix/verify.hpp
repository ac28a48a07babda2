#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace modelmix {

struct CheckLine {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckLine> checks;
  double seconds = 0.0;

  bool passed() const;
};

/// Convolution mixing vs feature mixing over random double-precision draws,
/// plus the relu negative control.
SuiteResult verify_linearity(std::uint64_t seed = 1, std::size_t draws = 100);
/// Finite-difference checks of every differentiable op, loss and composite.
SuiteResult verify_gradients(std::uint64_t seed = 2);
/// Loss point values and variant masks.
SuiteResult verify_losses();
/// Dice and Hausdorff against quadratic-time references on random masks.
SuiteResult verify_metrics(std::uint64_t seed = 3, std::size_t cases = 1000);

/// "linearity", "gradients", "losses", "metrics" or "all".
std::vector<SuiteResult> run_suites(const std::string& name, std::uint64_t seed = 0);

}  // namespace modelmix
