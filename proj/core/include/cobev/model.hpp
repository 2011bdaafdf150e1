// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cobev/align.hpp"
#include "cobev/checkpoint.hpp"
#include "cobev/config.hpp"
#include "cobev/deml.hpp"
#include "cobev/dmoe.hpp"

namespace cobev {

inline constexpr std::size_t kNumLabels = kNumClasses + 1;

struct SegHeadParams {
  Tensor w1, b1;  // [hidden,C,3,3], [hidden]
  Tensor w2, b2;  // [K+1,hidden,3,3], [K+1]

  static SegHeadParams init(std::size_t channels, std::size_t hidden, std::uint64_t seed);
  static SegHeadParams zeros(std::size_t channels, std::size_t hidden);
  NamedTensors named() const;
};

// conv3x3 -> relu -> conv3x3, biases per channel. [B,C,H,W] -> [B,K+1,H,W]
Tensor seg_head(const Tensor& features, const SegHeadParams& head);

// Mean per-pixel cross-entropy against labels in [0, K].
Tensor task_loss(const Tensor& logits, std::span<const int> labels);

struct Model {
  FusionKind fusion = FusionKind::kDmoe;
  DmoeConfig dmoe;
  DmoeParams params;
  SegHeadParams head;

  static Model init(const ExperimentConfig& cfg);
  // Parameters by name from a checkpoint; every name must be present.
  static Model from_checkpoint(const ExperimentConfig& cfg, const Checkpoint& ck);

  NamedTensors named() const;
  std::vector<Tensor> parameters() const;
  bool has_experts() const {
    return fusion == FusionKind::kDmoe || fusion == FusionKind::kVanillaMoe;
  }
};

struct ForwardResult {
  Tensor features;  // input of the seg head
  Tensor logits;
  std::optional<FusionOutput> moe;  // set for the expert-based kinds
};

ForwardResult forward(const Model& model, const AlignedBatch& batch);

struct LossBreakdown {
  Tensor total;
  Tensor task;
  Tensor deml;  // undefined when the fusion has no experts
  std::optional<TripletReport> report;
  ForwardResult forward;
};

// L_task + lambda * L_DEML, the metric term only for expert-based fusion.
LossBreakdown compute_loss(const Model& model, const AlignedBatch& batch,
                           std::span<const int> labels, const DemlConfig& deml_cfg);

}  // namespace cobev
