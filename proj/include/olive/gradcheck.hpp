#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "olive/autodiff.hpp"

namespace olive {

struct GradCheckOptions {
  double eps = 1e-3;
  /// Check every `stride`-th coordinate of each input; 1 checks all.
  std::size_t stride = 1;
};

/// Compares reverse-mode gradients against central differences for a
/// scalar function of several tensors. Returns the maximum over checked
/// coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
template <class T, class F>
double finite_diff_check_all(F&& f, const std::vector<BasicTensor<T>>& inputs, GradCheckOptions opts = {}) {
  auto evaluate = [&](const std::vector<BasicTensor<T>>& xs, std::vector<BasicTensor<T>>* grads) {
    BasicTape<T> tape;
    std::vector<BasicVar<T>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.param(x));
    BasicVar<T> out = f(tape, std::span<const BasicVar<T>>(vars));
    require(out.value().size() == 1, ErrorCode::Usage, "finite_diff_check needs a scalar-valued function");
    const double value = static_cast<double>(out.value()[0]);
    if (grads) {
      tape.backward(out);
      for (const auto& v : vars) grads->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<BasicTensor<T>> analytic;
  evaluate(inputs, &analytic);

  double worst = 0.0;
  auto work = inputs;
  for (std::size_t t = 0; t < work.size(); ++t) {
    for (std::size_t i = 0; i < work[t].size(); i += std::max<std::size_t>(1, opts.stride)) {
      const T original = work[t][i];
      work[t][i] = static_cast<T>(static_cast<double>(original) + opts.eps);
      const double plus = evaluate(work, nullptr);
      work[t][i] = static_cast<T>(static_cast<double>(original) - opts.eps);
      const double minus = evaluate(work, nullptr);
      work[t][i] = original;
      const double numeric = (plus - minus) / (2.0 * opts.eps);
      const double a = static_cast<double>(analytic[t][i]);
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8));
    }
  }
  return worst;
}

/// Single-input form.
template <class T, class F>
double finite_diff_check(F&& f, const BasicTensor<T>& x, double eps = 1e-3) {
  auto wrapped = [&](BasicTape<T>& tape, std::span<const BasicVar<T>> vars) { return f(tape, vars[0]); };
  return finite_diff_check_all<T>(wrapped, std::vector<BasicTensor<T>>{x}, GradCheckOptions{eps, 1});
}

}  // namespace olive
