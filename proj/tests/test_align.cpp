// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numbers>

#include "cobev/align.hpp"
#include "oracles.hpp"

using namespace cobev;
using oracle::max_abs_diff;
using oracle::random_tensor;
using oracle::to_vec;

namespace {

constexpr double kPi = std::numbers::pi;

Tensor hot_pixel(std::size_t c, std::size_t h, std::size_t w, std::size_t row, std::size_t col) {
  std::vector<double> v(c * h * w, 0.0);
  for (std::size_t k = 0; k < c; ++k) v[(k * h + row) * w + col] = 1.0 + static_cast<double>(k);
  return Tensor::from_data({c, h, w}, v);
}

// Where a source cell centre lands under rel, in output cell indices.
std::pair<long, long> map_cell(const Pose2& rel, std::size_t row, std::size_t col, std::size_t h,
                               std::size_t w) {
  const double su = static_cast<double>(col) + 0.5 - 0.5 * static_cast<double>(w);
  const double sv = static_cast<double>(row) + 0.5 - 0.5 * static_cast<double>(h);
  const double u = std::cos(rel.theta) * su - std::sin(rel.theta) * sv + rel.x;
  const double v = std::sin(rel.theta) * su + std::cos(rel.theta) * sv + rel.y;
  return {std::lround(v + 0.5 * static_cast<double>(h) - 0.5),
          std::lround(u + 0.5 * static_cast<double>(w) - 0.5)};
}

Pose2 inverse(const Pose2& p) {
  const double c = std::cos(p.theta), s = std::sin(p.theta);
  return {-(c * p.x + s * p.y), s * p.x - c * p.y, -p.theta};
}

}  // namespace

TEST_SUITE("align") {

TEST_CASE("relative pose of identical poses is zero") {
  const Pose2 p{3.0, -1.0, 0.4};
  const Pose2 r = relative_pose(p, p);
  CHECK(r.x == 0.0);
  CHECK(r.y == 0.0);
  CHECK(r.theta == 0.0);
  const Pose2 q = relative_pose({0, 0, kPi / 2}, {0, 2, kPi / 2});
  CHECK(q.x == doctest::Approx(2.0));
  CHECK(std::abs(q.y) < 1e-15);
}

TEST_CASE("identity warp returns the input") {
  Rng rng(41);
  const Tensor f = random_tensor(rng, {3, 7, 5});
  CHECK(to_vec(warp_features(f, {0, 0, 0})) == to_vec(f));
  AgentObservation obs{f, {}, {}};
  obs.agent.pose = {4.0, 9.0, 1.1};
  CHECK(to_vec(warp_to_ego(obs, obs.agent)) == to_vec(f));
}

TEST_CASE("integer translation shifts the map and zeroes the vacated border") {
  Rng rng(42);
  const Tensor f = random_tensor(rng, {2, 6, 8});
  const auto out = to_vec(warp_features(f, {2.0, 0.0, 0.0}));
  const auto in = to_vec(f);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const double want = c >= 2 ? in[(k * 6 + r) * 8 + c - 2] : 0.0;
        CHECK(std::abs(out[(k * 6 + r) * 8 + c] - want) <= 1e-12);
      }
}

TEST_CASE("quarter-turn rotation moves a hot pixel to the rotated cell") {
  const Pose2 rel{0.0, 0.0, kPi / 2};
  const Tensor f = hot_pixel(2, 8, 8, 1, 5);
  const auto out = to_vec(warp_features(f, rel));
  const auto [r, c] = map_cell(rel, 1, 5, 8, 8);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t rr = 0; rr < 8; ++rr)
      for (std::size_t cc = 0; cc < 8; ++cc) {
        const bool hot = static_cast<long>(rr) == r && static_cast<long>(cc) == c;
        const double want = hot ? 1.0 + static_cast<double>(k) : 0.0;
        CHECK(std::abs(out[(k * 8 + rr) * 8 + cc] - want) <= 1e-12);
      }
}

TEST_CASE("lattice transforms are exact permutations on random maps") {
  Rng rng(43);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 9));
    const Pose2 rel{static_cast<double>(rng.uniform_int(-3, 3)),
                    static_cast<double>(rng.uniform_int(-3, 3)), rng.uniform_int(0, 3) * kPi / 2};
    const std::size_t row = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
    const std::size_t col = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1));
    const auto out = to_vec(warp_features(hot_pixel(1, n, n, row, col), rel));
    const auto [r, c] = map_cell(rel, row, col, n, n);
    for (std::size_t rr = 0; rr < n; ++rr)
      for (std::size_t cc = 0; cc < n; ++cc) {
        const bool hot = static_cast<long>(rr) == r && static_cast<long>(cc) == c;
        CHECK(std::abs(out[rr * n + cc] - (hot ? 1.0 : 0.0)) <= 1e-12);
      }
  }
}

TEST_CASE("warp then inverse warp reproduces the interior of smooth maps") {
  // Bilinear resampling reproduces affine fields exactly, so the round trip
  // is checkable for arbitrary poses away from the border.
  Rng rng(44);
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 16, w = 16;
    const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), c0 = rng.uniform(-1, 1);
    std::vector<double> v(h * w);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        v[r * w + c] = a * static_cast<double>(c) + b * static_cast<double>(r) + c0;
    const Tensor f = Tensor::from_data({1, h, w}, v);
    const Pose2 rel{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.3, 0.3)};
    const auto back = to_vec(warp_features(warp_features(f, rel), inverse(rel)));
    for (std::size_t r = 4; r + 4 < h; ++r)
      for (std::size_t c = 4; c + 4 < w; ++c) CHECK(std::abs(back[r * w + c] - v[r * w + c]) <= 1e-6);
  }
}

TEST_CASE("assemble stacks independent warps and zeroes masked agents") {
  Rng rng(45);
  for (int t = 0; t < 20; ++t) {
    std::vector<AgentObservation> obs(3);
    for (auto& o : obs) {
      o.features = random_tensor(rng, {2, 6, 6});
      o.agent.pose = {rng.uniform(0, 6), rng.uniform(0, 6), rng.uniform(-kPi, kPi)};
    }
    const std::size_t ego = static_cast<std::size_t>(rng.uniform_int(0, 2));
    std::vector<std::uint8_t> mask{1, 1, 1};
    const std::size_t off = (ego + 1) % 3;
    if (rng.bernoulli(0.5)) mask[off] = 0;
    const AlignedBatch b = assemble(obs, ego, mask);
    CHECK(b.x.shape() == Shape{1, 3, 2, 6, 6});
    CHECK(b.ego == std::vector<std::size_t>{ego});
    const auto x = to_vec(b.x);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(b.mask(0, k) == (mask[k] != 0));
      const std::vector<double> slice(x.begin() + static_cast<long>(k * 72),
                                      x.begin() + static_cast<long>((k + 1) * 72));
      const auto want = mask[k] ? to_vec(warp_to_ego(obs[k], obs[ego].agent)) : std::vector<double>(72, 0.0);
      CHECK(slice == want);
    }
    const std::vector<double> ego_slice(x.begin() + static_cast<long>(ego * 72),
                                        x.begin() + static_cast<long>((ego + 1) * 72));
    CHECK(ego_slice == to_vec(obs[ego].features));
  }
}

TEST_CASE("assemble edge cases") {
  Rng rng(46);
  std::vector<AgentObservation> one(1);
  one[0].features = random_tensor(rng, {2, 4, 4});
  const AlignedBatch b = assemble(one, 0, {1});
  CHECK(to_vec(b.x) == to_vec(one[0].features));
  CHECK_THROWS_AS(assemble(one, 0, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(assemble(one, 0, {0}), std::invalid_argument);
}

TEST_CASE("collate concatenates items in order") {
  Rng rng(47);
  std::vector<AgentObservation> obs(2);
  for (auto& o : obs) o.features = random_tensor(rng, {1, 3, 3});
  const AlignedBatch a = assemble(obs, 0, {1, 1});
  const AlignedBatch b = assemble(obs, 1, {0, 1});
  const AlignedBatch c = collate({&a, &b});
  CHECK(c.x.shape() == Shape{2, 2, 1, 3, 3});
  CHECK(c.ego == std::vector<std::size_t>{0, 1});
  CHECK(c.mask.bits == std::vector<std::uint8_t>{1, 1, 0, 1});
  auto want = to_vec(a.x);
  const auto bv = to_vec(b.x);
  want.insert(want.end(), bv.begin(), bv.end());
  CHECK(to_vec(c.x) == want);
  CHECK_THROWS(collate({}));
}

}  // TEST_SUITE
