// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cobev/deml.hpp"
#include "cobev/dmoe.hpp"
#include "cobev/errors.hpp"
#include "cobev/scene.hpp"

namespace cobev {

enum class FusionKind { kAttention, kMean, kMax, kVanillaMoe, kDmoe };
FusionKind parse_fusion_kind(const std::string& name);
const char* fusion_kind_name(FusionKind kind);

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const OptimizerConfig&) const = default;
};

// Cosine annealing from initial_lr to final_lr over total_steps. A zero
// total_steps means one full pass of the training schedule.
struct ScheduleConfig {
  double initial_lr = 0.01;
  double final_lr = 0.0005;
  std::size_t total_steps = 0;
  bool operator==(const ScheduleConfig&) const = default;
};

struct ExperimentConfig {
  SceneConfig scene;
  FusionKind fusion = FusionKind::kDmoe;
  DmoeConfig dmoe;
  DemlConfig deml;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::size_t epochs = 30;
  std::size_t batch_size = 2;
  std::size_t train_scenes = 200;
  std::size_t eval_scenes = 50;
  std::size_t head_hidden = 8;
  // Evaluate every this many epochs; 0 evaluates after the last one only.
  std::size_t eval_every = 0;
  // Model initialisation and data order.
  std::uint64_t seed = 0;
  // Scenes and observation noise. Kept apart from `seed` so the seeds of one
  // ablation see the same data.
  std::uint64_t data_seed = 1000;

  void validate() const;
  std::size_t steps_per_epoch() const;
  // total_steps with the zero default resolved; always at least 1.
  std::size_t resolved_total_steps() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  bool operator==(const ExperimentConfig&) const = default;
};

// FNV-1a 64 over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& canonical);

// Strict JSON file read; parse errors become ConfigError naming the file.
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace cobev
