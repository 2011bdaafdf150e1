// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <nlohmann/json.hpp>

#include "cobev/config.hpp"

namespace fixture {

// A scene and run small enough to train in well under a second.
inline nlohmann::json tiny_config_json() {
  return {{"scene",
           {{"height", 16},
            {"width", 16},
            {"channels", 4},
            {"num_agents", 3},
            {"road_width", 4},
            {"num_vehicles", 3},
            {"num_occluders", 2},
            {"view_range", 8.0},
            {"comm_radius", 16.0},
            {"agent_spread", 6.0}}},
          {"epochs", 2},
          {"batch_size", 2},
          {"train_scenes", 6},
          {"eval_scenes", 4},
          {"head_hidden", 4}};
}

inline cobev::ExperimentConfig tiny_config() {
  return cobev::ExperimentConfig::from_json(tiny_config_json());
}

}  // namespace fixture
