// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <vector>

#include "cobev/align.hpp"
#include "cobev/deml.hpp"
#include "cobev/dmoe.hpp"
#include "cobev/ops.hpp"
#include "cobev/rng.hpp"
#include "cobev/train.hpp"

using namespace cobev;

namespace {

Tensor random(Rng& rng, Shape shape, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), grad);
}

DmoeConfig config_for(std::size_t c, std::size_t n) {
  DmoeConfig cfg;
  cfg.channels = c;
  cfg.pooled_dim = c / 2;
  cfg.hidden_dim = c;
  cfg.num_agents_max = n;
  return cfg;
}

}  // namespace

static void BM_Conv3x3Forward(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor x = random(rng, {2, 8, hw, hw});
  const Tensor k = random(rng, {8, 8, 3, 3});
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_3x3(x, k));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * 8 * 8 * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3Forward)->Arg(16)->Arg(32)->Arg(64);

static void BM_Conv3x3Backward(benchmark::State& state) {
  const auto hw = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  Tensor x = random(rng, {2, 8, hw, hw}, true);
  Tensor k = random(rng, {8, 8, 3, 3}, true);
  for (auto _ : state) {
    x.zero_grad();
    k.zero_grad();
    sum(conv2d_3x3(x, k)).backward();
  }
}
BENCHMARK(BM_Conv3x3Backward)->Arg(16)->Arg(32);

static void BM_DmoeForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const DmoeConfig cfg = config_for(8, n);
  const DmoeParams p = DmoeParams::init(cfg, 3);
  Rng rng(3);
  const Tensor x = random(rng, {2, n, 8, 32, 32});
  const AgentMask m(2, n, 1);
  const std::vector<std::size_t> ego{0, 0};
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(dmoe_fuse(x, m, ego, p, cfg).residual);
}
BENCHMARK(BM_DmoeForward)->Arg(2)->Arg(4)->Arg(8);

static void BM_DmoeDemlBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const DmoeConfig cfg = config_for(8, n);
  const DmoeParams p = DmoeParams::init(cfg, 4);
  Rng rng(4);
  const Tensor x = random(rng, {2, n, 8, 32, 32});
  const AgentMask m(2, n, 1);
  const std::vector<std::size_t> ego{0, 0};
  for (auto _ : state) {
    for (auto& [name, t] : p.named()) t.zero_grad();
    const auto out = dmoe_fuse(x, m, ego, p, cfg);
    const auto d = deml(out.fused, out.experts, m, DemlConfig{});
    total_loss(sum(out.residual), d.loss, 0.4).backward();
  }
}
BENCHMARK(BM_DmoeDemlBackward)->Arg(2)->Arg(4);

static void BM_AgentAttention(benchmark::State& state) {
  Rng rng(5);
  const Tensor x = random(rng, {2, 4, 8, 32, 32});
  const AgentMask m(2, 4, 1);
  const std::vector<std::size_t> ego{0, 0};
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(agent_attention(x, m, ego));
}
BENCHMARK(BM_AgentAttention);

static void BM_WarpFeatures(benchmark::State& state) {
  Rng rng(6);
  const Tensor f = random(rng, {8, 32, 32});
  const Pose2 rel{3.5, -2.25, 0.7};
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(warp_features(f, rel));
}
BENCHMARK(BM_WarpFeatures);

static void BM_TrainStep(benchmark::State& state) {
  ExperimentConfig cfg;
  cfg.fusion = state.range(0) ? FusionKind::kDmoe : FusionKind::kAttention;
  cfg.deml.lambda = state.range(0) ? 0.4 : 0.0;
  const auto samples = build_dataset(cfg.scene, cfg.data_seed, Split::kTrain, 2);
  const Model model = Model::init(cfg);
  Adam opt(model.parameters(), cfg.optimizer);
  const std::vector<std::size_t> order{0, 1};
  std::vector<int> labels;
  const AlignedBatch batch = batch_of(samples, order, labels);
  for (auto _ : state) {
    opt.zero_grad();
    compute_loss(model, batch, labels, cfg.deml).total.backward();
    opt.step(1e-4);
  }
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
