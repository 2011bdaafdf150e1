// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobev/ops.hpp"
#include "cobev/tensor.hpp"

namespace cobev {

enum class KernelGenVariant { kDenseReshape, kDeconvStack };
// Which feature map each expert convolves: the preliminary fused map, or
// the expert's own agent map.
enum class ExpertInput { kFused, kPerAgent };

struct DmoeConfig {
  std::size_t channels = 8;
  std::size_t pooled_dim = 4;
  std::size_t hidden_dim = 8;
  std::size_t num_agents_max = 4;
  std::string activation = "relu";
  KernelGenVariant kernel_gen_variant = KernelGenVariant::kDenseReshape;
  ExpertInput expert_input = ExpertInput::kFused;
  // Width of the intermediate 3x3 lattice in the deconv-stack generator.
  std::size_t deconv_channels = 4;
  // Std-dev of the generator's output layer at initialisation.
  double kernel_init_scale = 0.05;

  void validate() const;
  nlohmann::json to_json() const;
  // `channels` and `num_agents_max` come from the scene, not the file.
  static DmoeConfig from_json(const nlohmann::json& j, std::size_t channels,
                              std::size_t num_agents);
  bool operator==(const DmoeConfig&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Learned parameters of the fusion stage. Every tensor is a
// requires_grad leaf.
struct DmoeParams {
  // z_k projection C -> C'
  Tensor proj_w, proj_b;
  // MLP C' -> d -> d
  Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;
  // dense-reshape generator d -> C*C*9
  Tensor kgen_w, kgen_b;
  // deconv-stack generator: d -> (c1 x 3 x 3) -> (C*C x 3 x 3)
  Tensor deconv1_w, deconv1_b, deconv2_k;
  // gate C -> d -> N
  Tensor gate1_w, gate1_b, gate2_w, gate2_b;
  // static per-slot kernels used by the vanilla MoE baseline [N,C,C,3,3]
  Tensor static_kernels;

  static DmoeParams init(const DmoeConfig& cfg, std::uint64_t seed);
  NamedTensors named() const;
};

struct GateOutput {
  Tensor logits;   // Gate(AvgPool(F_c)), [B,N]
  Tensor probs;    // unmasked softmax of the logits
  Tensor weights;  // masked softmax; exactly 0 on masked agents
};

struct ExpertBank {
  Tensor kernels;  // [B,N,C,C,3,3]
  GateOutput gate;
  AgentMask mask;
};

struct FusionOutput {
  Tensor fused;     // F_c [B,C,H,W]
  Tensor experts;   // E   [B,N,C,H,W]
  Tensor moe;       // F_MoE
  Tensor residual;  // F_res = F_c + F_MoE
  ExpertBank bank;
};

// Cross-agent attention with the ego as query. [B,N,C,H,W] -> [B,C,H,W]
Tensor preliminary_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego);

// Per-agent kernels from pooled agent features. -> [B,N,C,C,3,3]
Tensor generate_expert_kernels(const Tensor& x, const DmoeParams& params, const DmoeConfig& cfg);

GateOutput gate(const Tensor& fused, const AgentMask& mask, const DmoeParams& params);

// E[b,k] = conv(F_c[b], W[b,k]).
Tensor apply_experts(const Tensor& fused, const Tensor& kernels);
// E[b,k] = conv(X[b,k], W[b,k]).
Tensor apply_experts_per_agent(const Tensor& x, const Tensor& kernels);

FusionOutput dmoe_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego,
                       const DmoeParams& params, const DmoeConfig& cfg);

// Same pipeline with the static per-slot kernels in place of generated ones.
FusionOutput vanilla_moe_fuse(const Tensor& x, const AgentMask& mask,
                              std::span<const std::size_t> ego, const DmoeParams& params,
                              const DmoeConfig& cfg);

enum class BaselineKind { kMean, kMax, kAttention, kVanillaMoe };
BaselineKind parse_baseline_kind(const std::string& name);
const char* baseline_name(BaselineKind kind);

Tensor baseline_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego,
                     BaselineKind kind, const DmoeParams& params, const DmoeConfig& cfg);

// Mean pairwise MSE between the valid experts of each batch item, averaged
// over items with at least two valid experts.
double expert_diversity(const Tensor& experts, const AgentMask& mask);

}  // namespace cobev
