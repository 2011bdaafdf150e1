// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cobev {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised when operand shapes are incompatible. The message names every
// offending shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces NaN or Inf from finite inputs.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {
struct Node;
}

// Dense row-major tensor of doubles with an optional reverse-mode gradient.
//
// A Tensor is a cheap handle; copies share storage. Values are immutable
// once an operation has produced them. Leaf tensors (created through the
// factory functions) may be edited through mutable_data(), which is how
// optimizers and finite-difference probes touch parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Only valid on leaves.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  // Empty span until a backward pass reached this tensor.
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse-mode pass from a scalar. Gradients accumulate into every
  // requires_grad ancestor.
  void backward() const;

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;

  // Monotone creation stamp; later operations have larger stamps.
  std::uint64_t sequence() const;
  const char* op_name() const;

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// The ordered record of operations reachable from a root tensor.
//
// Entries are sorted by descending creation stamp, so running them is the
// exact reverse of forward execution order.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::uint64_t> order() const;
  std::vector<std::string> ops() const;

  // Seeds the root gradient with ones and runs every recorded VJP.
  void run();

 private:
  Tensor root_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

}  // namespace cobev
