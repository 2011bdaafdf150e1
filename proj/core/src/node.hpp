// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cobev/tensor.hpp"

namespace cobev::detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

std::uint64_t next_sequence();

// Creates an op output. When recording is on and any input requires a
// gradient, the node keeps its inputs and VJP; otherwise both are dropped.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);

inline Node& node_of(const Tensor& t) { return *t.node(); }

}  // namespace cobev::detail
