// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "cobev/gradcheck.hpp"
#include "cobev/ops.hpp"
#include "oracles.hpp"

using namespace cobev;

TEST_SUITE("tensor") {

TEST_CASE("factories check extents and data length") {
  CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  const Tensor t = Tensor::full({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  for (double v : t.data()) CHECK(v == 1.5);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
}

TEST_CASE("non-finite results are hard errors") {
  const Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, 10.0), NumericError);
  CHECK_THROWS_AS(Tensor::from_data({1}, {std::numeric_limits<double>::quiet_NaN()}),
                  NumericError);
}

TEST_CASE("shape errors name both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("sum(x) has all-ones gradient") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("mse(x, 0) gradient is 2x/n") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  mse(x, Tensor::zeros({1})).backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::zeros({2}, true);
  CHECK_THROWS_AS(add(x, 1.0).backward(), std::invalid_argument);
}

TEST_CASE("tape runs in exact reverse creation order") {
  Tensor x = Tensor::from_data({3}, {1, -2, 3}, true);
  const Tensor a = mul(x, 2.0);
  const Tensor b = relu(a);
  const Tensor c = add(b, x);
  const Tensor d = sum(c);
  Tape tape(d);
  const auto order = tape.order();
  REQUIRE(order.size() == 5);
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i - 1] > order[i]);
  CHECK(order.front() == d.sequence());
  CHECK(order[3] == a.sequence());
  CHECK(order.back() == x.sequence());
}

TEST_CASE("a tensor consumed twice accumulates both path gradients") {
  Rng rng(3);
  Tensor x = oracle::random_tensor(rng, {4}, 1.0, true);
  // f = sum(x * x) + sum(3x): df/dx = 2x + 3
  const Tensor f = add(sum(mul(x, x)), sum(mul(x, 3.0)));
  f.backward();
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i] + 3));
  const auto r = gradcheck([](const std::vector<Tensor>& in) {
    return add(sum(mul(in[0], in[0])), sum(mul(in[0], 3.0)));
  }, {x});
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::zeros({2}, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_mode_enabled());
    y = mul(x, 2.0);
  }
  CHECK(grad_mode_enabled());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("detach cuts the graph") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  const Tensor d = mul(x, 2.0).detach();
  CHECK(d.is_leaf());
  CHECK_FALSE(d.requires_grad());
  CHECK(d.data()[1] == 4.0);
}

TEST_CASE("gradcheck rejects non-deterministic functions") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  int calls = 0;
  CHECK_THROWS_AS(gradcheck([&](const std::vector<Tensor>& in) {
    ++calls;
    return sum(mul(in[0], static_cast<double>(calls)));
  }, {x}), NonDeterministicError);
}

TEST_CASE("gradcheck detects a wrong gradient") {
  // relu's kink at 0.0 makes the one-sided VJP disagree with central differences.
  Tensor x = Tensor::from_data({1}, {0.0}, true);
  const auto r = gradcheck([](const std::vector<Tensor>& in) { return sum(relu(in[0])); }, {x});
  CHECK(r.max_rel_error == doctest::Approx(0.5));
}

}  // TEST_SUITE
