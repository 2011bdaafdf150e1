// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cobev/gradcheck.hpp"

namespace cobev {

struct ProblemSize {
  std::size_t batch = 1;
  std::size_t agents = 3;
  std::size_t channels = 4;
  std::size_t height = 8;
  std::size_t width = 8;

  // "B=1,N=3,C=4,H=8,W=8"; keys may appear in any order and absent keys
  // keep their defaults. Throws ConfigError on malformed input.
  static ProblemSize parse(const std::string& spec);
  std::string str() const;
};

struct OpCheck {
  std::string name;
  GradcheckResult result;
  bool passed = false;
};

// Gradient checks of every differentiable operator on small random
// operands, followed by whole-model checks (fusion, seg head, task loss and
// the weighted metric loss) at `size`.
std::vector<OpCheck> run_gradcheck_suite(const ProblemSize& size, double tolerance,
                                         std::uint64_t seed = 7);

}  // namespace cobev
