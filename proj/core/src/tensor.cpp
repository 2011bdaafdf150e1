// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "node.hpp"

namespace cobev {

namespace {

thread_local bool g_grad_mode = true;
std::atomic<std::uint64_t> g_sequence{1};

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> data,
                                        bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    std::ostringstream os;
    os << "data length " << data.size() << " does not match shape "
       << shape_str(shape);
    throw ShapeError(os.str());
  }
  check_finite("leaf", data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->seq = detail::next_sequence();
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::uint64_t next_sequence() { return g_sequence.fetch_add(1); }

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->seq = next_sequence();
  bool needs = false;
  if (g_grad_mode) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->inputs.empty() && !node_->backward; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar, got shape " +
                                shape_str(shape()));
  }
  Tape tape(*this);
  tape.run();
}

Tensor Tensor::detach() const {
  return Tensor(make_leaf(node_->shape, node_->data, false));
}

std::uint64_t Tensor::sequence() const { return node_->seq; }

const char* Tensor::op_name() const { return node_->op; }

Tape::Tape(const Tensor& root) : root_(root) {
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack;
  if (root.requires_grad()) stack.push_back(root.node());
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(node.get()).second) continue;
    for (const auto& in : node->inputs) {
      if (in->requires_grad) stack.push_back(in);
    }
    nodes_.push_back(std::move(node));
  }
  std::sort(nodes_.begin(), nodes_.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });
}

std::vector<std::uint64_t> Tape::order() const {
  std::vector<std::uint64_t> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back(n->seq);
  return out;
}

std::vector<std::string> Tape::ops() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.emplace_back(n->op);
  return out;
}

void Tape::run() {
  if (nodes_.empty()) return;
  auto& seed = root_.node()->grad_buffer();
  for (double& g : seed) g += 1.0;
  for (auto& node : nodes_) {
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

bool grad_mode_enabled() { return g_grad_mode; }

}  // namespace cobev
