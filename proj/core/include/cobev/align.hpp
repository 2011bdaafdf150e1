// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "cobev/ops.hpp"
#include "cobev/scene.hpp"
#include "cobev/tensor.hpp"

namespace cobev {

// Ego-frame features of every agent for a batch of scenes.
struct AlignedBatch {
  Tensor x;                       // [B,N,C,H,W]
  AgentMask mask;                 // B x N
  std::vector<std::size_t> ego;   // one index per batch item
};

// Relative transform taking agent-local coordinates to ego-local ones.
Pose2 relative_pose(const Pose2& ego, const Pose2& agent);

// Bilinear inverse-mapped resampling of a [C,H,W] map under `agent_to_ego`.
// Samples outside the source map read as zero.
Tensor warp_features(const Tensor& features, const Pose2& agent_to_ego);

Tensor warp_to_ego(const AgentObservation& obs, const AgentSpec& ego);

// Stacks warped observations into a single-item batch [1,N,C,H,W]; agents
// whose mask bit is clear contribute zeros.
AlignedBatch assemble(const std::vector<AgentObservation>& observations, std::size_t ego_index,
                      const std::vector<std::uint8_t>& mask);

// Concatenates single-item batches along the batch axis.
AlignedBatch collate(const std::vector<const AlignedBatch*>& items);

}  // namespace cobev
