// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cobev/tensor.hpp"

namespace cobev {

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements_checked = 0;
};

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients against central differences.
//
// Every tensor in `inputs` must be a requires_grad leaf. The error for one
// element is |analytic - numeric| / max(1, |analytic|, |numeric|); the
// result carries the maximum. Throws NonDeterministicError if two
// evaluations at the same point disagree.
GradcheckResult gradcheck(const ScalarFunction& f, std::vector<Tensor> inputs,
                          double step = 1e-5);

}  // namespace cobev
