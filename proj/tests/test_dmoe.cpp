// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cobev/dmoe.hpp"
#include "cobev/errors.hpp"
#include "oracles.hpp"

using namespace cobev;
using oracle::max_abs_diff;
using oracle::random_tensor;
using oracle::to_vec;

namespace {

DmoeConfig small_cfg(std::size_t c = 4, std::size_t n = 3) {
  DmoeConfig cfg;
  cfg.channels = c;
  cfg.pooled_dim = std::max<std::size_t>(1, c / 2);
  cfg.hidden_dim = c;
  cfg.num_agents_max = n;
  cfg.kernel_init_scale = 0.3;
  return cfg;
}

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

Tensor delta_kernels(std::size_t lead, std::size_t c) {
  std::vector<double> k(lead * c * c * 9, 0.0);
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t o = 0; o < c; ++o) k[((l * c + o) * c + o) * 9 + 4] = 1.0;
  return Tensor::from_data({lead, c, c, 3, 3}, k);
}

AgentMask random_mask(Rng& rng, std::size_t b, std::size_t n, const std::vector<std::size_t>& ego) {
  AgentMask m(b, n, 1);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t k = 0; k < n; ++k)
      if (k != ego[r] && rng.bernoulli(0.4)) m.set(r, k, false);
  return m;
}

std::vector<double> slice(const std::vector<double>& v, std::size_t i, std::size_t block) {
  return {v.begin() + static_cast<long>(i * block), v.begin() + static_cast<long>((i + 1) * block)};
}

}  // namespace

TEST_SUITE("dmoe") {

TEST_CASE("config validation") {
  DmoeConfig c = small_cfg();
  c.pooled_dim = 9;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dmoe.pooled_dim"), ConfigError);
  c = small_cfg();
  c.activation = "tanh";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dmoe.activation"), ConfigError);
  CHECK_THROWS_AS(DmoeConfig::from_json({{"channels", 3}}, 4, 3), ConfigError);
  CHECK_THROWS_AS(DmoeConfig::from_json({{"kernel_gen_variant", "fft"}}, 4, 3), ConfigError);
  const DmoeConfig r = DmoeConfig::from_json(small_cfg().to_json(), 4, 3);
  CHECK(r == small_cfg());
}

TEST_CASE("preliminary fusion of a single or duplicated agent is that agent") {
  Rng rng(51);
  const Tensor one = random_tensor(rng, {2, 1, 3, 4, 4});
  const std::vector<std::size_t> ego{0, 0};
  CHECK(max_abs_diff(to_vec(preliminary_fuse(one, AgentMask(2, 1, 1), ego)), to_vec(one)) == 0.0);
  const Tensor map = random_tensor(rng, {1, 3, 4, 4});
  CHECK(max_abs_diff(to_vec(preliminary_fuse(expand_dim1(map, 3), AgentMask(1, 3, 1), {ego.data(), 1})),
                     to_vec(map)) <= 1e-15);
}

TEST_CASE("kernel generator contracts") {
  Rng rng(52);
  for (auto variant : {KernelGenVariant::kDenseReshape, KernelGenVariant::kDeconvStack}) {
    DmoeConfig cfg = small_cfg();
    cfg.kernel_gen_variant = variant;
    const DmoeParams p = DmoeParams::init(cfg, 3);
    const Tensor map = random_tensor(rng, {2, 1, 4, 5, 5});
    const Tensor x = reshape(expand_dim1(reshape(map, {2, 4, 5, 5}), 3), {2, 3, 4, 5, 5});
    const Tensor k = generate_expert_kernels(x, p, cfg);
    CHECK(k.shape() == Shape{2, 3, 4, 4, 3, 3});
    const auto kv = to_vec(k);
    const std::size_t block = 4 * 4 * 9;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t n = 1; n < 3; ++n) CHECK(slice(kv, b * 3 + n, block) == slice(kv, b * 3, block));
    // kernels take both signs
    CHECK(*std::min_element(kv.begin(), kv.end()) < 0.0);
    CHECK(*std::max_element(kv.begin(), kv.end()) > 0.0);
  }
  DmoeConfig cfg = small_cfg();
  const DmoeParams zero = DmoeParams::init(cfg, 4);
  for (const auto& [name, t] : zero.named()) fill(t, 0.0);
  for (double v : to_vec(generate_expert_kernels(random_tensor(rng, {1, 3, 4, 3, 3}), zero, cfg)))
    CHECK(v == 0.0);
  // zero input: kernels reduce to the output bias when every other bias is zero
  const DmoeParams p = DmoeParams::init(cfg, 5);
  const auto kz = to_vec(generate_expert_kernels(Tensor::zeros({1, 3, 4, 3, 3}), p, cfg));
  for (std::size_t n = 0; n < 3; ++n) CHECK(slice(kz, n, 144) == to_vec(p.kgen_b));
  CHECK_THROWS_AS(generate_expert_kernels(Tensor::zeros({1, 3, 5, 3, 3}), p, cfg), ShapeError);
}

TEST_CASE("gate examples") {
  DmoeConfig cfg = small_cfg(4, 3);
  DmoeParams p = DmoeParams::init(cfg, 6);
  fill(p.gate2_w, 0.0);
  Rng rng(53);
  const Tensor fc = random_tensor(rng, {1, 4, 3, 3});
  for (double w : to_vec(gate(fc, AgentMask(1, 3, 1), p).weights)) CHECK(w == doctest::Approx(1.0 / 3));
  auto b = p.gate2_b.mutable_data();
  b[0] = 1;
  b[1] = 2;
  b[2] = 3;
  AgentMask m(1, 3, 1);
  m.set(0, 2, false);
  const auto g = gate(fc, m, p);
  const double z = std::exp(1.0) + std::exp(2.0);
  CHECK(std::abs(g.weights.data()[0] - std::exp(1.0) / z) <= 1e-15);
  CHECK(std::abs(g.weights.data()[1] - std::exp(2.0) / z) <= 1e-15);
  CHECK(g.weights.data()[2] == 0.0);
  AgentMask first(1, 3, 0);
  first.set(0, 0, true);
  const auto w = to_vec(gate(fc, first, p).weights);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 0.0);
  CHECK_THROWS_AS(gate(fc, AgentMask(1, 3, 0), p), std::invalid_argument);
}

TEST_CASE("gate weights sum to one and vanish exactly on masked agents") {
  Rng rng(54);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 6)),
                      b = static_cast<std::size_t>(rng.uniform_int(1, 3));
    DmoeConfig cfg = small_cfg(4, n);
    const DmoeParams p = DmoeParams::init(cfg, static_cast<std::uint64_t>(t));
    const std::vector<std::size_t> ego(b, 0);
    const AgentMask m = random_mask(rng, b, n, ego);
    const auto w = to_vec(gate(random_tensor(rng, {b, 4, 3, 3}, 3.0), m, p).weights);
    for (std::size_t r = 0; r < b; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        s += w[r * n + k];
        if (!m(r, k)) CHECK(w[r * n + k] == 0.0);
        else CHECK(w[r * n + k] > 0.0);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("apply_experts examples and conv oracle") {
  Rng rng(55);
  const Tensor fc = random_tensor(rng, {2, 3, 4, 4});
  const Tensor delta = reshape(delta_kernels(2 * 2, 3), {2, 2, 3, 3, 3, 3});
  const auto e = to_vec(apply_experts(fc, delta));
  const auto f = to_vec(fc);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 2; ++n) CHECK(slice(e, b * 2 + n, 48) == slice(f, b, 48));
  for (double v : to_vec(apply_experts(fc, Tensor::zeros({2, 2, 3, 3, 3, 3})))) CHECK(v == 0.0);
  for (int t = 0; t < 50; ++t) {
    const std::size_t B = static_cast<std::size_t>(rng.uniform_int(1, 2)),
                      N = static_cast<std::size_t>(rng.uniform_int(1, 4)),
                      C = static_cast<std::size_t>(rng.uniform_int(1, 3)),
                      H = static_cast<std::size_t>(rng.uniform_int(1, 5)),
                      W = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const Tensor x = random_tensor(rng, {B, C, H, W});
    const Tensor k = random_tensor(rng, {B, N, C, C, 3, 3});
    const auto got = to_vec(apply_experts(x, k));
    const auto xv = to_vec(x), kv = to_vec(k);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n) {
        const auto ref = oracle::conv3x3(slice(xv, b, C * H * W), 1, C, H, W,
                                         slice(kv, b * N + n, C * C * 9), C);
        CHECK(max_abs_diff(slice(got, b * N + n, C * H * W), ref) <= 1e-12);
      }
  }
  CHECK_THROWS_AS(apply_experts(fc, Tensor::zeros({1, 2, 3, 3, 3, 3})), ShapeError);
}

TEST_CASE("one-hot gate collapses the mixture onto one expert") {
  Rng rng(56);
  DmoeConfig cfg = small_cfg(4, 3);
  DmoeParams p = DmoeParams::init(cfg, 7);
  fill(p.gate2_w, 0.0);
  p.gate2_b.mutable_data()[1] = 800.0;
  const Tensor x = random_tensor(rng, {1, 3, 4, 5, 5});
  const std::vector<std::size_t> ego{0};
  const auto out = dmoe_fuse(x, AgentMask(1, 3, 1), ego, p, cfg);
  auto want = to_vec(out.fused);
  const auto e1 = to_vec(select(out.experts, {0, 1}));
  for (std::size_t i = 0; i < want.size(); ++i) want[i] += e1[i];
  CHECK(max_abs_diff(to_vec(out.residual), want) == 0.0);
}

TEST_CASE("zero kernels leave the residual equal to the preliminary fusion") {
  Rng rng(57);
  DmoeConfig cfg = small_cfg(4, 3);
  DmoeParams p = DmoeParams::init(cfg, 8);
  fill(p.kgen_w, 0.0);
  fill(p.kgen_b, 0.0);
  const std::vector<std::size_t> ego{0};
  const auto out = dmoe_fuse(random_tensor(rng, {1, 3, 4, 5, 5}), AgentMask(1, 3, 1), ego, p, cfg);
  CHECK(to_vec(out.residual) == to_vec(out.fused));
}

TEST_CASE("dmoe_fuse equals its stages composed by hand") {
  Rng rng(58);
  for (int t = 0; t < 20; ++t) {
    const std::size_t B = 2, N = 3, C = 4;
    DmoeConfig cfg = small_cfg(C, N);
    if (t % 2) cfg.expert_input = ExpertInput::kPerAgent;
    const DmoeParams p = DmoeParams::init(cfg, static_cast<std::uint64_t>(t));
    const Tensor x = random_tensor(rng, {B, N, C, 4, 4});
    const std::vector<std::size_t> ego{0, 1};
    const AgentMask m = random_mask(rng, B, N, ego);
    const auto out = dmoe_fuse(x, m, ego, p, cfg);
    const Tensor fc = preliminary_fuse(x, m, ego);
    const Tensor k = generate_expert_kernels(x, p, cfg);
    const auto g = gate(fc, m, p);
    const Tensor e = cfg.expert_input == ExpertInput::kFused ? apply_experts(fc, k)
                                                             : apply_experts_per_agent(x, k);
    // manual weighted sum over agents
    const auto ev = to_vec(e), wv = to_vec(g.weights), fv = to_vec(fc);
    const std::size_t block = C * 16;
    std::vector<double> res(fv);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < block; ++i)
          res[b * block + i] += wv[b * N + n] * ev[(b * N + n) * block + i];
    CHECK(max_abs_diff(to_vec(out.residual), res) <= 1e-12);
    CHECK(to_vec(out.fused) == fv);
    CHECK(to_vec(out.experts) == ev);
  }
}

TEST_CASE("permuting non-ego agents permutes experts and gates and keeps the output") {
  Rng rng(59);
  for (int t = 0; t < 30; ++t) {
    const std::size_t N = 4, C = 4, block = C * 16;
    DmoeConfig cfg = small_cfg(C, N);
    if (t % 3 == 1) cfg.expert_input = ExpertInput::kPerAgent;
    if (t % 3 == 2) cfg.kernel_gen_variant = KernelGenVariant::kDeconvStack;
    const DmoeParams p = DmoeParams::init(cfg, static_cast<std::uint64_t>(100 + t));
    const Tensor x = random_tensor(rng, {1, N, C, 4, 4});
    const std::vector<std::size_t> ego{0};
    const AgentMask m = random_mask(rng, 1, N, ego);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin() + 1, perm.end(), std::mt19937_64(static_cast<std::uint64_t>(t)));
    const auto xv = to_vec(x);
    std::vector<double> xp;
    AgentMask mp(1, N, 0);
    for (std::size_t k = 0; k < N; ++k) {
      const auto s = slice(xv, perm[k], block);
      xp.insert(xp.end(), s.begin(), s.end());
      mp.set(0, k, m(0, perm[k]));
    }
    // the gate assigns one logit per slot, so slot-symmetric parameters are needed
    DmoeParams sym = p;
    sym.gate2_w = Tensor::zeros(p.gate2_w.shape(), true);
    sym.gate2_b = Tensor::zeros(p.gate2_b.shape(), true);
    const auto a = dmoe_fuse(x, m, ego, sym, cfg);
    const auto b = dmoe_fuse(Tensor::from_data(x.shape(), xp), mp, ego, sym, cfg);
    CHECK(max_abs_diff(to_vec(a.residual), to_vec(b.residual)) <= 1e-9);
    const auto ea = to_vec(a.experts), eb = to_vec(b.experts);
    for (std::size_t k = 0; k < N; ++k) {
      CHECK(std::abs(b.bank.gate.weights.data()[k] - a.bank.gate.weights.data()[perm[k]]) <= 1e-12);
      CHECK(max_abs_diff(slice(eb, k, block), slice(ea, perm[k], block)) <= 1e-12);
    }
  }
}

TEST_CASE("masked agents cannot influence the fused output") {
  Rng rng(60);
  for (int t = 0; t < 60; ++t) {
    const std::size_t B = 2, N = 3, C = 4, block = C * 16;
    DmoeConfig cfg = small_cfg(C, N);
    if (t % 2) cfg.expert_input = ExpertInput::kPerAgent;
    const DmoeParams p = DmoeParams::init(cfg, static_cast<std::uint64_t>(t));
    const std::vector<std::size_t> ego{0, 0};
    AgentMask m = random_mask(rng, B, N, ego);
    m.set(1, 2, false);
    const Tensor x = random_tensor(rng, {B, N, C, 4, 4});
    auto xv = to_vec(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < N; ++k)
        if (!m(b, k))
          for (std::size_t i = 0; i < block; ++i) xv[(b * N + k) * block + i] = rng.uniform(-50, 50);
    const Tensor xp = Tensor::from_data(x.shape(), xv);
    CHECK(max_abs_diff(to_vec(dmoe_fuse(x, m, ego, p, cfg).residual),
                       to_vec(dmoe_fuse(xp, m, ego, p, cfg).residual)) <= 1e-9);
    CHECK(max_abs_diff(to_vec(vanilla_moe_fuse(x, m, ego, p, cfg).residual),
                       to_vec(vanilla_moe_fuse(xp, m, ego, p, cfg).residual)) <= 1e-9);
  }
}

TEST_CASE("baselines") {
  Rng rng(61);
  DmoeConfig cfg = small_cfg(3, 2);
  DmoeParams p = DmoeParams::init(cfg, 9);
  const Tensor map = random_tensor(rng, {1, 3, 4, 4});
  const Tensor twin = expand_dim1(map, 2);
  const std::vector<std::size_t> ego{0};
  const AgentMask all(1, 2, 1);
  CHECK(max_abs_diff(to_vec(baseline_fuse(twin, all, ego, BaselineKind::kMean, p, cfg)),
                     to_vec(map)) <= 1e-15);
  std::vector<double> zp(2 * 48, 0.0);
  for (std::size_t i = 48; i < 96; ++i) zp[i] = 0.5 + rng.uniform();
  const auto mx = to_vec(baseline_fuse(Tensor::from_data({1, 2, 3, 4, 4}, zp), all, ego,
                                       BaselineKind::kMax, p, cfg));
  CHECK(mx == slice(zp, 1, 48));
  p.static_kernels = delta_kernels(2, 3);
  const Tensor x = random_tensor(rng, {1, 2, 3, 4, 4});
  const auto fc = to_vec(preliminary_fuse(x, all, ego));
  const auto v = to_vec(baseline_fuse(x, all, ego, BaselineKind::kVanillaMoe, p, cfg));
  for (std::size_t i = 0; i < fc.size(); ++i) CHECK(std::abs(v[i] - 2 * fc[i]) <= 1e-12);
  CHECK(to_vec(baseline_fuse(x, all, ego, BaselineKind::kAttention, p, cfg)) == fc);
  CHECK_THROWS_AS(parse_baseline_kind("sum"), std::invalid_argument);
  for (auto k : {BaselineKind::kMean, BaselineKind::kMax, BaselineKind::kAttention,
                 BaselineKind::kVanillaMoe})
    CHECK(parse_baseline_kind(baseline_name(k)) == k);
}

TEST_CASE("expert diversity is the mean pairwise MSE over valid experts") {
  Rng rng(62);
  for (int t = 0; t < 50; ++t) {
    const std::size_t B = 2, N = static_cast<std::size_t>(rng.uniform_int(2, 5)), D = 12;
    const Tensor e = random_tensor(rng, {B, N, 3, 2, 2});
    const std::vector<std::size_t> ego(B, 0);
    const AgentMask m = random_mask(rng, B, N, ego);
    const auto ev = to_vec(e);
    double total = 0.0;
    int items = 0;
    for (std::size_t b = 0; b < B; ++b) {
      double acc = 0.0;
      int pairs = 0;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (i != j && m(b, i) && m(b, j)) {
            acc += oracle::map_mse(ev, (b * N + i) * D, ev, (b * N + j) * D, D);
            ++pairs;
          }
      if (pairs) {
        total += acc / pairs;
        ++items;
      }
    }
    const double want = items ? total / items : 0.0;
    CHECK(std::abs(expert_diversity(e, m) - want) <= 1e-12);
    CHECK(expert_diversity(e, m) >= 0.0);
  }
}

}  // TEST_SUITE
