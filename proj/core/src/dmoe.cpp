// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/dmoe.hpp"

#include <cmath>
#include <stdexcept>

#include "cobev/errors.hpp"
#include "cobev/rng.hpp"
#include "json_util.hpp"

namespace cobev {

using nlohmann::json;

namespace {

const char* variant_name(KernelGenVariant v) {
  return v == KernelGenVariant::kDenseReshape ? "dense-reshape" : "deconv-stack";
}

const char* expert_input_name(ExpertInput e) {
  return e == ExpertInput::kFused ? "fused" : "per_agent";
}

Tensor normal_tensor(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor zero_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor activate(const Tensor& t, const std::string& activation) {
  return activation == "relu" ? relu(t) : t;
}

void require_experts(const char* op, const Tensor& x) {
  if (x.rank() != 5) {
    throw ShapeError(std::string(op) + ": expected [B,N,C,H,W], got " + shape_str(x.shape()));
  }
}

}  // namespace

void DmoeConfig::validate() const {
  if (channels == 0 || pooled_dim == 0 || hidden_dim == 0 || num_agents_max == 0 ||
      deconv_channels == 0) {
    throw ConfigError("dmoe: all dimensions must be positive");
  }
  if (pooled_dim > channels) throw ConfigError("dmoe.pooled_dim: must not exceed channels");
  if (activation != "relu" && activation != "identity") {
    throw ConfigError("dmoe.activation: unknown activation '" + activation + "'");
  }
  if (!(kernel_init_scale >= 0.0)) throw ConfigError("dmoe.kernel_init_scale: must be >= 0");
}

json DmoeConfig::to_json() const {
  return json{{"channels", channels},
              {"pooled_dim", pooled_dim},
              {"hidden_dim", hidden_dim},
              {"num_agents_max", num_agents_max},
              {"activation", activation},
              {"kernel_gen_variant", variant_name(kernel_gen_variant)},
              {"expert_input", expert_input_name(expert_input)},
              {"deconv_channels", deconv_channels},
              {"kernel_init_scale", kernel_init_scale}};
}

DmoeConfig DmoeConfig::from_json(const json& j, std::size_t channels, std::size_t num_agents) {
  DmoeConfig c;
  c.channels = channels;
  c.num_agents_max = num_agents;
  c.pooled_dim = channels / 2 == 0 ? 1 : channels / 2;
  c.hidden_dim = channels;
  detail::FieldReader r(j, "dmoe");
  // Echoed by to_json; must agree with the scene when present.
  std::size_t file_channels = channels, file_agents = num_agents;
  r.read("channels", file_channels);
  r.read("num_agents_max", file_agents);
  if (file_channels != channels) throw ConfigError("dmoe.channels: disagrees with scene.channels");
  if (file_agents != num_agents) {
    throw ConfigError("dmoe.num_agents_max: disagrees with scene.num_agents");
  }
  r.read("pooled_dim", c.pooled_dim);
  r.read("hidden_dim", c.hidden_dim);
  r.read("activation", c.activation);
  std::string variant = variant_name(c.kernel_gen_variant);
  r.read("kernel_gen_variant", variant);
  if (variant == "dense-reshape") {
    c.kernel_gen_variant = KernelGenVariant::kDenseReshape;
  } else if (variant == "deconv-stack") {
    c.kernel_gen_variant = KernelGenVariant::kDeconvStack;
  } else {
    throw ConfigError("dmoe.kernel_gen_variant: unknown variant '" + variant + "'");
  }
  std::string input = expert_input_name(c.expert_input);
  r.read("expert_input", input);
  if (input == "fused") {
    c.expert_input = ExpertInput::kFused;
  } else if (input == "per_agent") {
    c.expert_input = ExpertInput::kPerAgent;
  } else {
    throw ConfigError("dmoe.expert_input: unknown value '" + input + "'");
  }
  r.read("deconv_channels", c.deconv_channels);
  r.read("kernel_init_scale", c.kernel_init_scale);
  r.finish();
  c.validate();
  return c;
}

DmoeParams DmoeParams::init(const DmoeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t c = cfg.channels, cp = cfg.pooled_dim, d = cfg.hidden_dim,
                    n = cfg.num_agents_max, c1 = cfg.deconv_channels;
  const double ks = cfg.kernel_init_scale;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  DmoeParams p;
  p.proj_w = normal_tensor(rng, {cp, c}, std::sqrt(1.0 / static_cast<double>(c)));
  p.proj_b = zero_param({cp});
  p.mlp1_w = normal_tensor(rng, {d, cp}, he(cp));
  p.mlp1_b = zero_param({d});
  p.mlp2_w = normal_tensor(rng, {d, d}, he(d));
  p.mlp2_b = zero_param({d});
  p.kgen_w = normal_tensor(rng, {c * c * 9, d}, ks / std::sqrt(static_cast<double>(d)));
  p.kgen_b = normal_tensor(rng, {c * c * 9}, ks);
  p.deconv1_w = normal_tensor(rng, {c1 * 9, d}, he(d));
  p.deconv1_b = zero_param({c1 * 9});
  p.deconv2_k = normal_tensor(rng, {c * c, c1, 3, 3}, ks / std::sqrt(static_cast<double>(c1 * 9)));
  p.gate1_w = normal_tensor(rng, {d, c}, he(c));
  p.gate1_b = zero_param({d});
  p.gate2_w = normal_tensor(rng, {n, d}, 0.1 / std::sqrt(static_cast<double>(d)));
  p.gate2_b = zero_param({n});
  p.static_kernels = normal_tensor(rng, {n, c, c, 3, 3}, ks);
  return p;
}

NamedTensors DmoeParams::named() const {
  return {{"fusion.proj_w", proj_w},       {"fusion.proj_b", proj_b},
          {"fusion.mlp1_w", mlp1_w},       {"fusion.mlp1_b", mlp1_b},
          {"fusion.mlp2_w", mlp2_w},       {"fusion.mlp2_b", mlp2_b},
          {"fusion.kgen_w", kgen_w},       {"fusion.kgen_b", kgen_b},
          {"fusion.deconv1_w", deconv1_w}, {"fusion.deconv1_b", deconv1_b},
          {"fusion.deconv2_k", deconv2_k}, {"fusion.gate1_w", gate1_w},
          {"fusion.gate1_b", gate1_b},     {"fusion.gate2_w", gate2_w},
          {"fusion.gate2_b", gate2_b},     {"fusion.static_kernels", static_kernels}};
}

Tensor preliminary_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego) {
  require_experts("preliminary_fuse", x);
  return agent_attention(x, mask, ego);
}

Tensor generate_expert_kernels(const Tensor& x, const DmoeParams& params, const DmoeConfig& cfg) {
  require_experts("generate_expert_kernels", x);
  const std::size_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  if (c != cfg.channels) {
    throw ShapeError("generate_expert_kernels: features have " + std::to_string(c) +
                     " channels, config expects " + std::to_string(cfg.channels));
  }
  const Tensor flat = reshape(x, {b * n, c, x.dim(3), x.dim(4)});
  const Tensor z = dense(global_avg_pool(flat), params.proj_w, params.proj_b);
  Tensor h = activate(dense(z, params.mlp1_w, params.mlp1_b), cfg.activation);
  h = activate(dense(h, params.mlp2_w, params.mlp2_b), cfg.activation);
  Tensor kernels;
  if (cfg.kernel_gen_variant == KernelGenVariant::kDenseReshape) {
    kernels = dense(h, params.kgen_w, params.kgen_b);
  } else {
    Tensor lattice = activate(dense(h, params.deconv1_w, params.deconv1_b), cfg.activation);
    lattice = reshape(lattice, {b * n, cfg.deconv_channels, 3, 3});
    kernels = conv2d_3x3(lattice, params.deconv2_k);
  }
  return reshape(kernels, {b, n, c, c, 3, 3});
}

GateOutput gate(const Tensor& fused, const AgentMask& mask, const DmoeParams& params) {
  if (fused.rank() != 4) throw ShapeError("gate: expected [B,C,H,W], got " + shape_str(fused.shape()));
  for (std::size_t r = 0; r < mask.rows; ++r) {
    if (mask.count_row(r) == 0) {
      throw std::invalid_argument("gate: batch item " + std::to_string(r) + " has no valid agent");
    }
  }
  GateOutput g;
  const Tensor hidden = relu(dense(global_avg_pool(fused), params.gate1_w, params.gate1_b));
  g.logits = dense(hidden, params.gate2_w, params.gate2_b);
  g.probs = softmax_lastdim(g.logits);
  g.weights = masked_softmax_lastdim(g.logits, mask);
  return g;
}

Tensor apply_experts(const Tensor& fused, const Tensor& kernels) {
  if (fused.rank() != 4 || kernels.rank() != 6 || kernels.dim(0) != fused.dim(0)) {
    throw ShapeError("apply_experts: fused " + shape_str(fused.shape()) + " vs kernels " +
                     shape_str(kernels.shape()));
  }
  const std::size_t n = kernels.dim(1);
  return apply_experts_per_agent(expand_dim1(fused, n), kernels);
}

Tensor apply_experts_per_agent(const Tensor& x, const Tensor& kernels) {
  require_experts("apply_experts", x);
  if (kernels.rank() != 6 || kernels.dim(0) != x.dim(0) || kernels.dim(1) != x.dim(1)) {
    throw ShapeError("apply_experts: inputs " + shape_str(x.shape()) + " vs kernels " +
                     shape_str(kernels.shape()));
  }
  const std::size_t b = x.dim(0), n = x.dim(1), c = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t cout = kernels.dim(2);
  const Tensor flat_x = reshape(x, {b * n, c, h, w});
  const Tensor flat_k = reshape(kernels, {b * n, cout, kernels.dim(3), 3, 3});
  return reshape(conv2d_3x3_per_sample(flat_x, flat_k), {b, n, cout, h, w});
}

namespace {

FusionOutput moe_with_kernels(const Tensor& x, const AgentMask& mask, const DmoeParams& params, const DmoeConfig& cfg, Tensor kernels,
                              Tensor fused) {
  FusionOutput out;
  out.fused = std::move(fused);
  out.bank.kernels = std::move(kernels);
  out.bank.mask = mask;
  out.bank.gate = gate(out.fused, mask, params);
  out.experts = cfg.expert_input == ExpertInput::kFused
                    ? apply_experts(out.fused, out.bank.kernels)
                    : apply_experts_per_agent(x, out.bank.kernels);
  out.moe = weighted_agent_sum(out.experts, out.bank.gate.weights);
  out.residual = add(out.fused, out.moe);
  return out;
}

}  // namespace

FusionOutput dmoe_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego,
                       const DmoeParams& params, const DmoeConfig& cfg) {
  require_experts("dmoe_fuse", x);
  if (x.dim(1) != cfg.num_agents_max) {
    throw ShapeError("dmoe_fuse: batch has " + std::to_string(x.dim(1)) +
                     " agents, config expects " + std::to_string(cfg.num_agents_max));
  }
  Tensor kernels = generate_expert_kernels(x, params, cfg);
  Tensor fused = preliminary_fuse(x, mask, ego);
  return moe_with_kernels(x, mask, params, cfg, std::move(kernels), std::move(fused));
}

FusionOutput vanilla_moe_fuse(const Tensor& x, const AgentMask& mask,
                              std::span<const std::size_t> ego, const DmoeParams& params,
                              const DmoeConfig& cfg) {
  require_experts("vanilla_moe_fuse", x);
  if (x.dim(1) != params.static_kernels.dim(0)) {
    throw ShapeError("vanilla_moe_fuse: batch has " + std::to_string(x.dim(1)) +
                     " agents, static kernels cover " + std::to_string(params.static_kernels.dim(0)));
  }
  Tensor kernels = repeat_leading(params.static_kernels, x.dim(0));
  Tensor fused = preliminary_fuse(x, mask, ego);
  return moe_with_kernels(x, mask, params, cfg, std::move(kernels), std::move(fused));
}

BaselineKind parse_baseline_kind(const std::string& name) {
  if (name == "mean") return BaselineKind::kMean;
  if (name == "max") return BaselineKind::kMax;
  if (name == "attention") return BaselineKind::kAttention;
  if (name == "vanilla_moe") return BaselineKind::kVanillaMoe;
  throw std::invalid_argument("unknown baseline fusion kind '" + name + "'");
}

const char* baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kMean: return "mean";
    case BaselineKind::kMax: return "max";
    case BaselineKind::kAttention: return "attention";
    case BaselineKind::kVanillaMoe: return "vanilla_moe";
  }
  return "unknown";
}

Tensor baseline_fuse(const Tensor& x, const AgentMask& mask, std::span<const std::size_t> ego,
                     BaselineKind kind, const DmoeParams& params, const DmoeConfig& cfg) {
  switch (kind) {
    case BaselineKind::kMean: return agent_mean(x, mask);
    case BaselineKind::kMax: return agent_max(x, mask);
    case BaselineKind::kAttention: return preliminary_fuse(x, mask, ego);
    case BaselineKind::kVanillaMoe: return vanilla_moe_fuse(x, mask, ego, params, cfg).residual;
  }
  throw std::invalid_argument("baseline_fuse: unknown kind");
}

double expert_diversity(const Tensor& experts, const AgentMask& mask) {
  require_experts("expert_diversity", experts);
  const std::size_t b = experts.dim(0), n = experts.dim(1);
  const std::size_t block = experts.numel() / (b * n);
  const auto e = experts.data();
  double total = 0.0;
  std::size_t items = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask(bi, i)) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!mask(bi, j)) continue;
        double s = 0.0;
        for (std::size_t t = 0; t < block; ++t) {
          const double d = e[(bi * n + i) * block + t] - e[(bi * n + j) * block + t];
          s += d * d;
        }
        acc += s / static_cast<double>(block);
        ++pairs;
      }
    }
    if (pairs) {
      total += acc / static_cast<double>(pairs);
      ++items;
    }
  }
  return items ? total / static_cast<double>(items) : 0.0;
}

}  // namespace cobev
