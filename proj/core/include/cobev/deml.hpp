// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobev/ops.hpp"
#include "cobev/tensor.hpp"

namespace cobev {

struct DemlConfig {
  double margin = 0.5;
  double beta = 1.0;
  double lambda = 0.4;

  void validate() const;
  nlohmann::json to_json() const;
  static DemlConfig from_json(const nlohmann::json& j);
  bool operator==(const DemlConfig&) const = default;
};

struct ExpertTriplet {
  std::size_t batch = 0;
  std::size_t expert = 0;
  double d_pos = 0.0;
  // Unset when the expert has no valid peer.
  std::optional<double> d_neg;
  std::optional<std::size_t> hardest_negative;
  double triplet_loss = 0.0;
};

struct TripletReport {
  std::vector<ExpertTriplet> experts;
  std::size_t n_valid = 0;  // summed over batch items
  double loss = 0.0;

  // One JSON object; callers write it as a JSON-lines record.
  nlohmann::json to_json() const;
};

struct DemlResult {
  Tensor loss;
  TripletReport report;
};

// Metric loss over the experts of each batch item with the preliminary
// fused map as anchor, the expert's own output as positive and the closest
// other valid expert as negative. Distances are per-element MSE over one
// C x H x W map. The per-item losses are averaged over the batch.
// Negative selection is a constant of the forward pass.
DemlResult deml(const Tensor& fused, const Tensor& experts, const AgentMask& mask,
                const DemlConfig& cfg);

Tensor total_loss(const Tensor& task_loss, const Tensor& deml_loss, double lambda);

}  // namespace cobev
