// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobev/tensor.hpp"

namespace cobev {

// Label ids in the BEV class map. Background is 0.
enum class ObjectClass : int { kBackground = 0, kVehicle = 1, kDrivable = 2, kLane = 3 };
inline constexpr int kNumClasses = 3;
const char* class_name(ObjectClass c);
ObjectClass parse_class(const std::string& name);

// Axis-aligned block of cells [x, x+w) x [y, y+h); x is the column.
struct Rect {
  int x = 0, y = 0, w = 1, h = 1;
  bool contains_cell(int cx, int cy) const {
    return cx >= x && cx < x + w && cy >= y && cy < y + h;
  }
  bool operator==(const Rect&) const = default;
};

struct SceneObject {
  ObjectClass label = ObjectClass::kVehicle;
  Rect rect;
  bool operator==(const SceneObject&) const = default;
};

// World-frame pose in metres and radians. One cell is one metre.
struct Pose2 {
  double x = 0.0, y = 0.0, theta = 0.0;
  bool operator==(const Pose2&) const = default;
};

struct AgentSpec {
  Pose2 pose;
  double fov_half_angle = 3.141592653589793;
  double view_range = 16.0;
  bool valid = true;

  void validate() const;
  bool operator==(const AgentSpec&) const = default;
};

struct SceneConfig {
  int height = 32;
  int width = 32;
  int channels = 8;
  int num_agents = 4;
  int num_roads = 2;
  int road_width = 6;
  int num_vehicles = 10;
  int num_occluders = 6;
  int occluder_min = 2;
  int occluder_max = 5;
  double fov_half_angle = 1.2;
  double view_range = 14.0;
  double noise_sigma = 0.3;
  double comm_radius = 24.0;
  // Non-ego agents are dropped near the ego, or anywhere on a road with this
  // probability (which may put them out of communication range).
  double agent_spread = 12.0;
  double far_agent_prob = 0.1;
  double invalid_agent_prob = 0.0;
  bool force_heterogeneity = true;
  int max_retries = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
  bool operator==(const SceneConfig&) const = default;
};

struct Scene {
  std::uint64_t seed = 0;
  int attempt = 0;
  SceneConfig config;
  int height = 0;
  int width = 0;
  // Painted in order; later objects sit on top.
  std::vector<SceneObject> objects;
  std::vector<Rect> occluders;
  std::vector<AgentSpec> agents;
  std::vector<int> label_map;  // row-major height x width

  int label_at(int row, int col) const { return label_map[row * width + col]; }
  bool operator==(const Scene&) const = default;
};

struct AgentObservation {
  Tensor features;                   // [C,H,W], agent-local frame
  std::vector<std::uint8_t> visibility;  // H*W, agent-local frame
  AgentSpec agent;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- geometry -------------------------------------------------------------

// Centre of local cell (row, col) in metres relative to the map centre.
struct LocalPoint {
  double u = 0.0, v = 0.0;
};
LocalPoint local_cell_center(int row, int col, int height, int width);
// Local offset (u, v) under a pose, in world metres.
LocalPoint local_to_world(const Pose2& pose, LocalPoint p);

// Closed segment against the closed rectangle [x, x+w] x [y, y+h].
bool segment_hits_rect(double ax, double ay, double bx, double by, const Rect& r);

// Range, field-of-view and occlusion test for a world point.
bool point_visible(const Scene& scene, const AgentSpec& agent, double px, double py);

std::vector<int> rasterize_labels(int height, int width, const std::vector<SceneObject>& objects);

// Visibility of every world cell centre (row-major).
std::vector<std::uint8_t> world_visibility(const Scene& scene, const AgentSpec& agent);

// Number of agents seeing at least one cell of each object.
std::vector<int> object_view_counts(const Scene& scene);

// --- operations -----------------------------------------------------------

Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

AgentObservation observe(const Scene& scene, const AgentSpec& agent, std::uint64_t noise_seed);

// mask[k] = agent k valid and within `radius` of the ego; mask[ego] = 1.
std::vector<std::uint8_t> comm_filter(const Scene& scene, std::size_t ego_index, double radius);

// Ground-truth classes sampled at the ego's local cell centres; 0 outside
// the world.
std::vector<int> ego_label_map(const Scene& scene, const AgentSpec& ego);

// --- serialisation --------------------------------------------------------

inline constexpr int kSceneFormatVersion = 1;
nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);

}  // namespace cobev
