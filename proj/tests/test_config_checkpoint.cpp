// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>

#include "cobev/checkpoint.hpp"
#include "cobev/config.hpp"
#include "cobev/model.hpp"
#include "cobev/verify.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cobev;
using oracle::to_vec;

TEST_SUITE("config") {

TEST_CASE("empty config takes every default") {
  const ExperimentConfig c = ExperimentConfig::from_json(nlohmann::json::object());
  CHECK(c == ExperimentConfig{});
  CHECK(c.fusion == FusionKind::kDmoe);
  CHECK(c.deml.lambda == 0.4);
  CHECK(c.scene.force_heterogeneity);
}

TEST_CASE("config JSON round trip and stable hash") {
  const ExperimentConfig c = fixture::tiny_config();
  const ExperimentConfig r = ExperimentConfig::from_json(c.to_json());
  CHECK(r == c);
  CHECK(config_hash(c.to_json()) == config_hash(r.to_json()));
  CHECK(config_hash(c.to_json()).size() == 16);
  ExperimentConfig d = c;
  d.seed = 9;
  CHECK(config_hash(d.to_json()) != config_hash(c.to_json()));
}

TEST_CASE("config errors name the offending field") {
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json({{"fusion", "swap"}}), doctest::Contains("fusion"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json({{"epochs", "many"}}), doctest::Contains("epochs"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json({{"schedule", {{"warmup", 3}}}}),
                       doctest::Contains("schedule.warmup"), ConfigError);
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json({{"batch_size", 0}}), doctest::Contains("batch_size"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json({{"scene", {{"width", -1}}}}),
                       doctest::Contains("scene.width"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/cfg.json"), ConfigError);
  for (auto k : {FusionKind::kAttention, FusionKind::kMean, FusionKind::kMax, FusionKind::kVanillaMoe,
                 FusionKind::kDmoe})
    CHECK(parse_fusion_kind(fusion_kind_name(k)) == k);
}

TEST_CASE("total steps resolve to at least one") {
  ExperimentConfig c;
  c.train_scenes = 5;
  c.batch_size = 2;
  c.epochs = 3;
  CHECK(c.steps_per_epoch() == 3);
  CHECK(c.resolved_total_steps() == 9);
  c.epochs = 0;
  CHECK(c.resolved_total_steps() == 1);
  c.schedule.total_steps = 40;
  CHECK(c.resolved_total_steps() == 40);
}

TEST_CASE("problem size parsing") {
  const ProblemSize p = ProblemSize::parse("W=5,B=2");
  CHECK(p.batch == 2);
  CHECK(p.width == 5);
  CHECK(p.agents == 3);
  CHECK(ProblemSize::parse(p.str()).str() == p.str());
  CHECK_THROWS_AS(ProblemSize::parse("B=0"), ConfigError);
  CHECK_THROWS_AS(ProblemSize::parse("Q=3"), ConfigError);
  CHECK_THROWS_AS(ProblemSize::parse("B=x"), ConfigError);
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("encode/decode round trip is exact") {
  const ExperimentConfig cfg = fixture::tiny_config();
  const Model m = Model::init(cfg);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(cfg.to_json(), m.named()));
  CHECK(ck.config == cfg.to_json());
  REQUIRE(ck.tensors.size() == m.named().size());
  const Model back = Model::from_checkpoint(cfg, ck);
  const auto a = m.named(), b = back.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
    CHECK(to_vec(a[i].second) == to_vec(b[i].second));
  }
  CHECK_THROWS_AS(ck.at("no.such.tensor"), CheckpointError);
}

TEST_CASE("file round trip") {
  const ExperimentConfig cfg = fixture::tiny_config();
  const Model m = Model::init(cfg);
  const auto path = std::filesystem::temp_directory_path() / "cobev_test_ck.bin";
  write_checkpoint(path, cfg.to_json(), m.named());
  const Checkpoint ck = read_checkpoint(path);
  CHECK(to_vec(ck.at("head.w1")) == to_vec(m.head.w1));
  CHECK_THROWS_AS(read_checkpoint("/nonexistent/ck.bin"), CheckpointError);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const ExperimentConfig cfg = fixture::tiny_config();
  const std::string good = encode_checkpoint(cfg.to_json(), Model::init(cfg).named());
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, 10)), CheckpointError);
  ExperimentConfig wider = cfg;
  wider.head_hidden = 5;
  CHECK_THROWS_AS(Model::from_checkpoint(wider, decode_checkpoint(good)), CheckpointError);
}

}  // TEST_SUITE
