// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/align.hpp"

#include <cmath>
#include <stdexcept>

namespace cobev {

Pose2 relative_pose(const Pose2& ego, const Pose2& agent) {
  const double c = std::cos(ego.theta);
  const double s = std::sin(ego.theta);
  const double dx = agent.x - ego.x;
  const double dy = agent.y - ego.y;
  return {c * dx + s * dy, -s * dx + c * dy, agent.theta - ego.theta};
}

Tensor warp_features(const Tensor& features, const Pose2& rel) {
  if (features.rank() != 3) {
    throw ShapeError("warp_features: expected [C,H,W], got " + shape_str(features.shape()));
  }
  const std::size_t ch = features.dim(0), h = features.dim(1), w = features.dim(2);
  const double c = std::cos(rel.theta);
  const double s = std::sin(rel.theta);
  const double half_w = 0.5 * static_cast<double>(w);
  const double half_h = 0.5 * static_cast<double>(h);
  const auto src = features.data();
  std::vector<double> out(features.numel(), 0.0);
  const auto iw = static_cast<long>(w), ih = static_cast<long>(h);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      // ego-local cell centre -> agent-local coordinates
      const double u = static_cast<double>(col) + 0.5 - half_w - rel.x;
      const double v = static_cast<double>(r) + 0.5 - half_h - rel.y;
      const double au = c * u + s * v;
      const double av = -s * u + c * v;
      const double fx = au + half_w - 0.5;
      const double fy = av + half_h - 0.5;
      const double x0f = std::floor(fx), y0f = std::floor(fy);
      const double tx = fx - x0f, ty = fy - y0f;
      const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
      const double wts[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
      const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (wts[t] == 0.0 || xs[t] < 0 || ys[t] < 0 || xs[t] >= iw || ys[t] >= ih) continue;
        const auto sp = static_cast<std::size_t>(ys[t]) * w + static_cast<std::size_t>(xs[t]);
        for (std::size_t k = 0; k < ch; ++k) {
          out[k * h * w + r * w + col] += wts[t] * src[k * h * w + sp];
        }
      }
    }
  }
  return Tensor::from_data(features.shape(), std::move(out));
}

Tensor warp_to_ego(const AgentObservation& obs, const AgentSpec& ego) {
  return warp_features(obs.features, relative_pose(ego.pose, obs.agent.pose));
}

AlignedBatch assemble(const std::vector<AgentObservation>& observations, std::size_t ego_index,
                      const std::vector<std::uint8_t>& mask) {
  const std::size_t n = observations.size();
  if (mask.size() != n) {
    throw std::invalid_argument("assemble: " + std::to_string(n) + " observations but mask of " +
                                std::to_string(mask.size()));
  }
  if (ego_index >= n) throw std::invalid_argument("assemble: ego index out of range");
  if (!mask[ego_index]) throw std::invalid_argument("assemble: ego agent is masked");
  const Tensor& ego_features = observations[ego_index].features;
  if (!ego_features.defined() || ego_features.rank() != 3) {
    throw ShapeError("assemble: ego observation must hold [C,H,W] features");
  }
  const Shape& fs = ego_features.shape();
  const std::size_t block = ego_features.numel();
  std::vector<double> x(n * block, 0.0);
  AgentMask m(1, n, 0);
  const AgentSpec& ego = observations[ego_index].agent;
  for (std::size_t k = 0; k < n; ++k) {
    if (!mask[k]) continue;
    if (observations[k].features.shape() != fs) {
      throw ShapeError("assemble: observation " + std::to_string(k) + " has shape " +
                       shape_str(observations[k].features.shape()) + ", ego has " + shape_str(fs));
    }
    m.set(0, k, true);
    const Tensor warped = warp_to_ego(observations[k], ego);
    std::copy(warped.data().begin(), warped.data().end(), x.begin() + static_cast<long>(k * block));
  }
  AlignedBatch batch;
  batch.x = Tensor::from_data({1, n, fs[0], fs[1], fs[2]}, std::move(x));
  batch.mask = std::move(m);
  batch.ego = {ego_index};
  return batch;
}

AlignedBatch collate(const std::vector<const AlignedBatch*>& items) {
  if (items.empty()) throw std::invalid_argument("collate: empty batch");
  const Shape& first = items.front()->x.shape();
  Shape shape = first;
  shape[0] = 0;
  std::size_t rows = 0;
  for (const auto* it : items) {
    Shape s = it->x.shape();
    s[0] = 0;
    if (s != shape) throw ShapeError("collate: mismatched item shapes");
    rows += it->x.dim(0);
  }
  shape[0] = rows;
  std::vector<double> x;
  x.reserve(shape_numel(shape));
  AgentMask mask(rows, first[1], 0);
  std::vector<std::size_t> ego;
  std::size_t row = 0;
  for (const auto* it : items) {
    x.insert(x.end(), it->x.data().begin(), it->x.data().end());
    for (std::size_t r = 0; r < it->mask.rows; ++r, ++row) {
      for (std::size_t k = 0; k < it->mask.cols; ++k) mask.set(row, k, it->mask(r, k));
      ego.push_back(it->ego[r]);
    }
  }
  AlignedBatch out;
  out.x = Tensor::from_data(std::move(shape), std::move(x));
  out.mask = std::move(mask);
  out.ego = std::move(ego);
  return out;
}

}  // namespace cobev
