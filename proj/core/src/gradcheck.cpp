#include "modelmix/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "modelmix/ops.hpp"
#include "modelmix/rng.hpp"

namespace modelmix {
namespace {

std::vector<Var<double>> as_leaves(const std::vector<Tensor4<double>>& values, bool requires_grad) {
  std::vector<Var<double>> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(Var<double>::leaf(v, requires_grad));
  return out;
}

}  // namespace

GradCheckReport finite_difference_check(const std::string& op_name, const DifferentiableFn& fn,
                                         const std::vector<Tensor4<double>>& inputs,
                                         const GradCheckOptions& options) {
  GradCheckReport report;
  report.op_name = op_name;
  if (!(options.eps > 0.0)) throw ContractViolation("finite_difference_check: eps must be positive");
  for (const auto& in : inputs) {
    if (!all_finite(in)) {
      report.failure = "non-finite input";
      return report;
    }
  }

  SeededRng rng(options.seed);
  auto leaves = as_leaves(inputs, true);
  Var<double> out = fn(leaves);
  if (!all_finite(out.value())) {
    report.failure = "non-finite forward output";
    return report;
  }
  Tensor4<double> projection(out.shape());
  for (double& r : projection.data()) r = rng.normal();

  backward(weighted_sum(out, projection));

  auto objective = [&](const std::vector<Tensor4<double>>& point, bool& finite) {
    Var<double> y = fn(as_leaves(point, false));
    finite = all_finite(y.value());
    double s = 0.0;
    for (std::size_t i = 0; i < projection.numel(); ++i) s += y.value()[i] * projection[i];
    return s;
  };

  double grad_inf = 0.0;
  std::vector<Tensor4<double>> grads;
  for (const auto& leaf : leaves) {
    grads.push_back(leaf.grad());
    for (double g : grads.back().data()) grad_inf = std::max(grad_inf, std::abs(g));
  }
  const double floor = 1e-6 * std::max(1.0, grad_inf);

  auto record = [&](double fd, double ad) {
    const double abs_err = std::abs(fd - ad);
    const double denom = std::max({std::abs(fd), std::abs(ad), floor});
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
  };

  std::vector<Tensor4<double>> point = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t numel = inputs[k].numel();
    if (numel == 0) continue;

    for (std::size_t d = 0; d < options.directions; ++d) {
      Tensor4<double> dir(inputs[k].shape());
      double norm = 0.0;
      for (double& v : dir.data()) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      double ad = 0.0;
      for (std::size_t i = 0; i < numel; ++i) {
        dir[i] /= norm;
        ad += grads[k][i] * dir[i];
      }
      bool ok_plus = true, ok_minus = true;
      for (std::size_t i = 0; i < numel; ++i) point[k][i] = inputs[k][i] + options.eps * dir[i];
      const double plus = objective(point, ok_plus);
      for (std::size_t i = 0; i < numel; ++i) point[k][i] = inputs[k][i] - options.eps * dir[i];
      const double minus = objective(point, ok_minus);
      point[k] = inputs[k];
      if (!ok_plus || !ok_minus) {
        report.failure = "non-finite forward output during probing";
        return report;
      }
      record((plus - minus) / (2.0 * options.eps), ad);
    }

    if (numel <= options.max_coordinates) {
      for (std::size_t i = 0; i < numel; ++i) {
        bool ok_plus = true, ok_minus = true;
        point[k][i] = inputs[k][i] + options.eps;
        const double plus = objective(point, ok_plus);
        point[k][i] = inputs[k][i] - options.eps;
        const double minus = objective(point, ok_minus);
        point[k][i] = inputs[k][i];
        if (!ok_plus || !ok_minus) {
          report.failure = "non-finite forward output during probing";
          return report;
        }
        record((plus - minus) / (2.0 * options.eps), grads[k][i]);
      }
    }
  }
  report.passed = report.max_rel_err < options.tolerance;
  return report;
}

}  // namespace modelmix
