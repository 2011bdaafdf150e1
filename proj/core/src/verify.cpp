// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/verify.hpp"

#include <algorithm>
#include <functional>
#include <sstream>

#include "cobev/errors.hpp"
#include "cobev/model.hpp"
#include "cobev/ops.hpp"
#include "cobev/rng.hpp"

namespace cobev {

ProblemSize ProblemSize::parse(const std::string& spec) {
  ProblemSize s;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == part.size()) {
      throw ConfigError("size: expected KEY=VALUE, got '" + part + "'");
    }
    const std::string key = part.substr(0, eq);
    std::size_t value = 0;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(part.substr(eq + 1), &used);
      if (used != part.size() - eq - 1 || v <= 0) throw std::invalid_argument(part);
      value = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("size." + key + ": expected a positive integer, got '" +
                        part.substr(eq + 1) + "'");
    }
    if (key == "B") {
      s.batch = value;
    } else if (key == "N") {
      s.agents = value;
    } else if (key == "C") {
      s.channels = value;
    } else if (key == "H") {
      s.height = value;
    } else if (key == "W") {
      s.width = value;
    } else {
      throw ConfigError("size." + key + ": unknown key (expected B, N, C, H or W)");
    }
  }
  if (s.channels < 2) throw ConfigError("size.C: must be at least 2");
  return s;
}

std::string ProblemSize::str() const {
  return "B=" + std::to_string(batch) + ",N=" + std::to_string(agents) +
         ",C=" + std::to_string(channels) + ",H=" + std::to_string(height) +
         ",W=" + std::to_string(width);
}

namespace {

Tensor random_leaf(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random coefficients turns any tensor into a
// scalar whose gradient exercises every output element.
Tensor probe(const Tensor& t, const Tensor& weights) { return sum(mul(t, weights)); }

struct Suite {
  double tol;
  std::vector<OpCheck> checks;

  void run(const std::string& name, const ScalarFunction& f, std::vector<Tensor> inputs) {
    OpCheck c;
    c.name = name;
    c.result = gradcheck(f, std::move(inputs));
    c.passed = c.result.max_rel_error <= tol;
    checks.push_back(std::move(c));
  }
};

AgentMask random_mask(Rng& rng, std::size_t rows, std::size_t cols, std::size_t keep) {
  AgentMask m(rows, cols, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c != keep && rng.bernoulli(0.3)) m.set(r, c, false);
    }
  }
  return m;
}

void pipeline_check(Suite& suite, const std::string& name, const ProblemSize& s, FusionKind kind,
                    KernelGenVariant variant, ExpertInput input, bool mask_last, Rng& rng,
                    std::uint64_t seed) {
  Model model;
  model.fusion = kind;
  model.dmoe.channels = s.channels;
  model.dmoe.num_agents_max = s.agents;
  model.dmoe.pooled_dim = std::max<std::size_t>(1, s.channels / 2);
  model.dmoe.hidden_dim = s.channels;
  model.dmoe.kernel_gen_variant = variant;
  model.dmoe.expert_input = input;
  model.params = DmoeParams::init(model.dmoe, derive_seed(seed, 1));
  model.head = SegHeadParams::init(s.channels, 4, derive_seed(seed, 2));

  AlignedBatch batch;
  batch.x = random_leaf(rng, {s.batch, s.agents, s.channels, s.height, s.width});
  batch.mask = AgentMask(s.batch, s.agents, 1);
  if (mask_last && s.agents >= 3) {
    for (std::size_t b = 0; b < s.batch; ++b) batch.mask.set(b, s.agents - 1, false);
  }
  batch.ego.assign(s.batch, 0);
  std::vector<int> labels(s.batch * s.height * s.width);
  for (int& l : labels) l = rng.uniform_int(0, kNumClasses);
  DemlConfig deml;

  std::vector<Tensor> inputs{batch.x};
  for (const auto& [pname, t] : model.named()) {
    const bool unused =
        (pname == "fusion.static_kernels" && kind != FusionKind::kVanillaMoe) ||
        ((pname == "fusion.deconv1_w" || pname == "fusion.deconv1_b" ||
          pname == "fusion.deconv2_k") &&
         variant != KernelGenVariant::kDeconvStack) ||
        ((pname == "fusion.kgen_w" || pname == "fusion.kgen_b") &&
         variant != KernelGenVariant::kDenseReshape);
    if (!unused) inputs.push_back(t);
  }
  suite.run(name, [&](const std::vector<Tensor>&) {
    return compute_loss(model, batch, labels, deml).total;
  }, inputs);
}

}  // namespace

std::vector<OpCheck> run_gradcheck_suite(const ProblemSize& s, double tolerance,
                                         std::uint64_t seed) {
  Suite suite{tolerance, {}};
  Rng rng(seed);
  const std::size_t b = 2, n = 3, c = 2, h = 4, w = 5;

  {
    Tensor x = random_leaf(rng, {b, c, h, w});
    Tensor k = random_leaf(rng, {3, c, 3, 3});
    Tensor p = random_leaf(rng, {b, 3, h, w});
    suite.run("conv2d_3x3", [=](const auto&) { return probe(conv2d_3x3(x, k), p); }, {x, k});
  }
  {
    Tensor x = random_leaf(rng, {b, c, h, w});
    Tensor k = random_leaf(rng, {b, 3, c, 3, 3});
    Tensor p = random_leaf(rng, {b, 3, h, w});
    suite.run("conv2d_3x3_per_sample",
              [=](const auto&) { return probe(conv2d_3x3_per_sample(x, k), p); }, {x, k});
  }
  {
    Tensor x = random_leaf(rng, {b, c, h, w});
    Tensor p = random_leaf(rng, {b, c});
    suite.run("global_avg_pool", [=](const auto&) { return probe(global_avg_pool(x), p); }, {x});
  }
  {
    Tensor x = random_leaf(rng, {b, 4});
    Tensor wt = random_leaf(rng, {3, 4});
    Tensor bias = random_leaf(rng, {3});
    Tensor p = random_leaf(rng, {b, 3});
    suite.run("dense", [=](const auto&) { return probe(dense(x, wt, bias), p); }, {x, wt, bias});
  }
  {
    Tensor x = random_leaf(rng, {b, c, h, w});
    Tensor bias = random_leaf(rng, {c});
    Tensor p = random_leaf(rng, {b, c, h, w});
    suite.run("add_channel_bias", [=](const auto&) { return probe(add_channel_bias(x, bias), p); },
              {x, bias});
  }
  {
    Tensor x = random_leaf(rng, {b, n});
    Tensor p = random_leaf(rng, {b, n});
    suite.run("softmax", [=](const auto&) { return probe(softmax_lastdim(x), p); }, {x});
    const AgentMask m = random_mask(rng, b, n, 0);
    suite.run("masked_softmax", [=](const auto&) { return probe(masked_softmax_lastdim(x, m), p); },
              {x});
  }
  {
    Tensor x = random_leaf(rng, {b, c, h, w});
    Tensor y = random_leaf(rng, {b, c, h, w});
    Tensor p = random_leaf(rng, {b, c, h, w});
    suite.run("add", [=](const auto&) { return probe(add(x, y), p); }, {x, y});
    suite.run("sub", [=](const auto&) { return probe(sub(x, y), p); }, {x, y});
    suite.run("mul", [=](const auto&) { return probe(mul(x, y), p); }, {x, y});
    suite.run("scalar_affine", [=](const auto&) { return probe(add(mul(x, 1.7), -0.3), p); }, {x});
    suite.run("relu", [=](const auto&) { return probe(relu(x), p); }, {x});
    suite.run("mse", [=](const auto&) { return mse(x, y); }, {x, y});
    suite.run("reshape_select", [=](const auto&) {
      return probe(reshape(select(x, {1}), {c * h * w}), reshape(select(p, {0}), {c * h * w}));
    }, {x});
  }
  {
    Tensor x = random_leaf(rng, {c, h, w});
    Tensor p = random_leaf(rng, {b, n, c, h, w});
    Tensor q = random_leaf(rng, {n, c, h, w});
    Tensor xb = random_leaf(rng, {b, c, h, w});
    suite.run("repeat_leading", [=](const auto&) { return probe(repeat_leading(x, n), q); }, {x});
    suite.run("expand_dim1", [=](const auto&) { return probe(expand_dim1(xb, n), p); }, {xb});
  }
  {
    Tensor x = random_leaf(rng, {b, n, c, h, w});
    Tensor p = random_leaf(rng, {b, c, h, w});
    const AgentMask m = random_mask(rng, b, n, 0);
    const std::vector<std::size_t> ego(b, 0);
    suite.run("agent_attention", [=](const auto&) { return probe(agent_attention(x, m, ego), p); },
              {x});
    suite.run("agent_mean", [=](const auto&) { return probe(agent_mean(x, m), p); }, {x});
    suite.run("agent_max", [=](const auto&) { return probe(agent_max(x, m), p); }, {x});
    Tensor wts = random_leaf(rng, {b, n});
    suite.run("weighted_agent_sum",
              [=](const auto&) { return probe(weighted_agent_sum(x, wts), p); }, {x, wts});
  }
  {
    Tensor logits = random_leaf(rng, {b, 4, h, w});
    std::vector<int> labels(b * h * w);
    for (int& l : labels) l = rng.uniform_int(0, 3);
    suite.run("cross_entropy_2d", [=](const auto&) { return cross_entropy_2d(logits, labels); },
              {logits});
  }
  {
    Tensor fused = random_leaf(rng, {b, c, h, w});
    Tensor experts = random_leaf(rng, {b, n, c, h, w}, 0.5);
    const AgentMask m = random_mask(rng, b, n, 0);
    DemlConfig cfg;
    suite.run("deml", [=](const auto&) { return deml(fused, experts, m, cfg).loss; },
              {fused, experts});
  }

  const std::uint64_t pseed = derive_seed(seed, 99);
  pipeline_check(suite, "pipeline/dmoe", s, FusionKind::kDmoe, KernelGenVariant::kDenseReshape,
                 ExpertInput::kFused, false, rng, pseed);
  if (s.agents >= 3) {
    pipeline_check(suite, "pipeline/dmoe-masked", s, FusionKind::kDmoe,
                   KernelGenVariant::kDenseReshape, ExpertInput::kFused, true, rng, pseed);
  }
  pipeline_check(suite, "pipeline/dmoe-deconv-stack", s, FusionKind::kDmoe,
                 KernelGenVariant::kDeconvStack, ExpertInput::kFused, false, rng, pseed);
  pipeline_check(suite, "pipeline/dmoe-per-agent", s, FusionKind::kDmoe,
                 KernelGenVariant::kDenseReshape, ExpertInput::kPerAgent, false, rng, pseed);
  pipeline_check(suite, "pipeline/vanilla-moe", s, FusionKind::kVanillaMoe,
                 KernelGenVariant::kDenseReshape, ExpertInput::kFused, false, rng, pseed);
  return suite.checks;
}

}  // namespace cobev
