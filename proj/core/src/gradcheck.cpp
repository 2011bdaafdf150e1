// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cobev {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& inputs) {
  NoGradGuard guard;
  Tensor y = f(inputs);
  return y.item();
}

}  // namespace

GradcheckResult gradcheck(const ScalarFunction& f, std::vector<Tensor> inputs, double step) {
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad() || !inputs[i].is_leaf()) {
      throw std::invalid_argument("gradcheck: input " + std::to_string(i) +
                                  " is not a requires_grad leaf");
    }
    inputs[i].zero_grad();
  }

  Tensor y = f(inputs);
  if (y.numel() != 1) throw std::invalid_argument("gradcheck: f must be scalar-valued");
  const double base = y.item();
  y.backward();
  if (evaluate(f, inputs) != base) {
    throw NonDeterministicError("gradcheck: repeated evaluation changed the value");
  }

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  GradcheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + step;
      const double plus = evaluate(f, inputs);
      values[j] = saved - step;
      const double minus = evaluate(f, inputs);
      values[j] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[i][j];
      const double err =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++result.elements_checked;
      if (err > result.max_rel_error || result.elements_checked == 1) {
        result.max_rel_error = err;
        result.worst_input = i;
        result.worst_element = j;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

}  // namespace cobev
