// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "cobev/rng.hpp"
#include "json_util.hpp"

namespace cobev {

using nlohmann::json;

const char* class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::kBackground: return "background";
    case ObjectClass::kVehicle: return "vehicle";
    case ObjectClass::kDrivable: return "drivable";
    case ObjectClass::kLane: return "lane";
  }
  return "unknown";
}

ObjectClass parse_class(const std::string& name) {
  if (name == "vehicle") return ObjectClass::kVehicle;
  if (name == "drivable") return ObjectClass::kDrivable;
  if (name == "lane") return ObjectClass::kLane;
  if (name == "background") return ObjectClass::kBackground;
  throw std::invalid_argument("unknown object class '" + name + "'");
}

void AgentSpec::validate() const {
  if (!(view_range > 0.0)) throw std::invalid_argument("agent view_range must be positive");
  if (!(fov_half_angle > 0.0 && fov_half_angle <= std::numbers::pi)) {
    throw std::invalid_argument("agent fov_half_angle must lie in (0, pi]");
  }
  if (!std::isfinite(pose.x) || !std::isfinite(pose.y) || !std::isfinite(pose.theta)) {
    throw std::invalid_argument("agent pose must be finite");
  }
}

void SceneConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("scene.") + name + ": must be positive");
  };
  positive(height, "height");
  positive(width, "width");
  positive(road_width, "road_width");
  positive(occluder_min, "occluder_min");
  positive(max_retries, "max_retries");
  if (num_agents < 2) throw ConfigError("scene.num_agents: need at least 2 agents");
  if (channels < kNumClasses + 1) {
    throw ConfigError("scene.channels: need one channel per class plus a noise channel");
  }
  if (num_roads < 1) throw ConfigError("scene.num_roads: need at least one road");
  if (num_vehicles < 0 || num_occluders < 0) {
    throw ConfigError("scene.num_vehicles/num_occluders: must be non-negative");
  }
  if (occluder_max < occluder_min) throw ConfigError("scene.occluder_max: below occluder_min");
  if (road_width + 8 > std::min(height, width)) {
    throw ConfigError("scene.road_width: too wide for the world");
  }
  if (!(fov_half_angle > 0.0 && fov_half_angle <= std::numbers::pi)) {
    throw ConfigError("scene.fov_half_angle: must lie in (0, pi]");
  }
  if (!(view_range > 0.0)) throw ConfigError("scene.view_range: must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("scene.noise_sigma: must be non-negative");
  if (!(comm_radius >= 0.0)) throw ConfigError("scene.comm_radius: must be non-negative");
  if (!(agent_spread > 0.0)) throw ConfigError("scene.agent_spread: must be positive");
  if (!(far_agent_prob >= 0.0 && far_agent_prob <= 1.0)) {
    throw ConfigError("scene.far_agent_prob: must lie in [0, 1]");
  }
  if (!(invalid_agent_prob >= 0.0 && invalid_agent_prob <= 1.0)) {
    throw ConfigError("scene.invalid_agent_prob: must lie in [0, 1]");
  }
}

json SceneConfig::to_json() const {
  return json{{"height", height},
              {"width", width},
              {"channels", channels},
              {"num_agents", num_agents},
              {"num_roads", num_roads},
              {"road_width", road_width},
              {"num_vehicles", num_vehicles},
              {"num_occluders", num_occluders},
              {"occluder_min", occluder_min},
              {"occluder_max", occluder_max},
              {"fov_half_angle", fov_half_angle},
              {"view_range", view_range},
              {"noise_sigma", noise_sigma},
              {"comm_radius", comm_radius},
              {"agent_spread", agent_spread},
              {"far_agent_prob", far_agent_prob},
              {"invalid_agent_prob", invalid_agent_prob},
              {"force_heterogeneity", force_heterogeneity},
              {"max_retries", max_retries}};
}

SceneConfig SceneConfig::from_json(const json& j) {
  SceneConfig c;
  detail::FieldReader r(j, "scene");
  r.read("height", c.height);
  r.read("width", c.width);
  r.read("channels", c.channels);
  r.read("num_agents", c.num_agents);
  r.read("num_roads", c.num_roads);
  r.read("road_width", c.road_width);
  r.read("num_vehicles", c.num_vehicles);
  r.read("num_occluders", c.num_occluders);
  r.read("occluder_min", c.occluder_min);
  r.read("occluder_max", c.occluder_max);
  r.read("fov_half_angle", c.fov_half_angle);
  r.read("view_range", c.view_range);
  r.read("noise_sigma", c.noise_sigma);
  r.read("comm_radius", c.comm_radius);
  r.read("agent_spread", c.agent_spread);
  r.read("far_agent_prob", c.far_agent_prob);
  r.read("invalid_agent_prob", c.invalid_agent_prob);
  r.read("force_heterogeneity", c.force_heterogeneity);
  r.read("max_retries", c.max_retries);
  r.finish();
  c.validate();
  return c;
}

LocalPoint local_cell_center(int row, int col, int height, int width) {
  return {col + 0.5 - 0.5 * width, row + 0.5 - 0.5 * height};
}

LocalPoint local_to_world(const Pose2& pose, LocalPoint p) {
  const double c = std::cos(pose.theta);
  const double s = std::sin(pose.theta);
  return {pose.x + c * p.u - s * p.v, pose.y + s * p.u + c * p.v};
}

bool segment_hits_rect(double ax, double ay, double bx, double by, const Rect& r) {
  // Liang-Barsky clipping of a + t (b - a), t in [0, 1].
  const double dx = bx - ax;
  const double dy = by - ay;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {ax - r.x, (r.x + r.w) - ax, ay - r.y, (r.y + r.h) - ay};
  double t0 = 0.0;
  double t1 = 1.0;
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
      continue;
    }
    const double t = q[i] / p[i];
    if (p[i] < 0.0) {
      t0 = std::max(t0, t);
    } else {
      t1 = std::min(t1, t);
    }
    if (t0 > t1) return false;
  }
  return true;
}

bool point_visible(const Scene& scene, const AgentSpec& agent, double px, double py) {
  const double dx = px - agent.pose.x;
  const double dy = py - agent.pose.y;
  const double dist = std::hypot(dx, dy);
  if (dist > agent.view_range) return false;
  if (agent.fov_half_angle < std::numbers::pi && dist > 1e-12) {
    double rel = std::atan2(dy, dx) - agent.pose.theta;
    rel = std::remainder(rel, 2.0 * std::numbers::pi);
    if (std::abs(rel) > agent.fov_half_angle) return false;
  }
  for (const Rect& occ : scene.occluders) {
    if (segment_hits_rect(agent.pose.x, agent.pose.y, px, py, occ)) return false;
  }
  return true;
}

std::vector<int> rasterize_labels(int height, int width, const std::vector<SceneObject>& objects) {
  std::vector<int> labels(static_cast<std::size_t>(height * width), 0);
  for (const auto& obj : objects) {
    const int x0 = std::max(0, obj.rect.x), x1 = std::min(width, obj.rect.x + obj.rect.w);
    const int y0 = std::max(0, obj.rect.y), y1 = std::min(height, obj.rect.y + obj.rect.h);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) labels[y * width + x] = static_cast<int>(obj.label);
  }
  return labels;
}

std::vector<std::uint8_t> world_visibility(const Scene& scene, const AgentSpec& agent) {
  std::vector<std::uint8_t> vis(static_cast<std::size_t>(scene.height * scene.width), 0);
  for (int y = 0; y < scene.height; ++y)
    for (int x = 0; x < scene.width; ++x)
      vis[y * scene.width + x] = point_visible(scene, agent, x + 0.5, y + 0.5) ? 1 : 0;
  return vis;
}

std::vector<int> object_view_counts(const Scene& scene) {
  std::vector<int> counts(scene.objects.size(), 0);
  for (const auto& agent : scene.agents) {
    if (!agent.valid) continue;
    const auto vis = world_visibility(scene, agent);
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const Rect& r = scene.objects[i].rect;
      bool seen = false;
      for (int y = std::max(0, r.y); y < std::min(scene.height, r.y + r.h) && !seen; ++y)
        for (int x = std::max(0, r.x); x < std::min(scene.width, r.x + r.w) && !seen; ++x)
          seen = vis[y * scene.width + x] != 0;
      counts[i] += seen ? 1 : 0;
    }
  }
  return counts;
}

namespace {

struct Road {
  Rect rect;
  bool horizontal = true;
};

bool overlaps(const Rect& a, const Rect& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

Pose2 pose_on_road(Rng& rng, const Road& road, double lo, double hi) {
  Pose2 p;
  const double along = rng.uniform(lo, hi);
  const int extent = road.horizontal ? road.rect.h : road.rect.w;
  const double offset = rng.uniform(0.6, extent - 0.6);
  const double heading = rng.bernoulli(0.5) ? 0.0 : std::numbers::pi;
  if (road.horizontal) {
    p.x = along;
    p.y = road.rect.y + offset;
    p.theta = heading;
  } else {
    p.x = road.rect.x + offset;
    p.y = along;
    p.theta = heading + 0.5 * std::numbers::pi;
  }
  p.theta = std::remainder(p.theta + rng.uniform(-0.3, 0.3), 2.0 * std::numbers::pi);
  return p;
}

Scene build_candidate(std::uint64_t seed, int attempt, const SceneConfig& cfg) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(attempt)));
  Scene s;
  s.seed = seed;
  s.attempt = attempt;
  s.config = cfg;
  s.height = cfg.height;
  s.width = cfg.width;

  std::vector<Road> roads;
  for (int i = 0; i < cfg.num_roads; ++i) {
    const bool horizontal = i < 2 ? (i == 0) : rng.bernoulli(0.5);
    const int extent = horizontal ? cfg.height : cfg.width;
    const int off = rng.uniform_int(4, extent - cfg.road_width - 4);
    Road road;
    road.horizontal = horizontal;
    road.rect = horizontal ? Rect{0, off, cfg.width, cfg.road_width}
                           : Rect{off, 0, cfg.road_width, cfg.height};
    roads.push_back(road);
    s.objects.push_back({ObjectClass::kDrivable, road.rect});
  }
  for (const Road& road : roads) {
    const int mid = road.horizontal ? road.rect.y + road.rect.h / 2 : road.rect.x + road.rect.w / 2;
    s.objects.push_back({ObjectClass::kLane, road.horizontal ? Rect{0, mid, cfg.width, 1}
                                                             : Rect{mid, 0, 1, cfg.height}});
  }
  for (int i = 0; i < cfg.num_vehicles; ++i) {
    const Road& road = roads[static_cast<std::size_t>(rng.uniform_int(0, cfg.num_roads - 1))];
    Rect v;
    if (road.horizontal) {
      v = {rng.uniform_int(0, cfg.width - 4), road.rect.y + rng.uniform_int(0, road.rect.h - 2), 4, 2};
    } else {
      v = {road.rect.x + rng.uniform_int(0, road.rect.w - 2), rng.uniform_int(0, cfg.height - 4), 2, 4};
    }
    s.objects.push_back({ObjectClass::kVehicle, v});
  }
  for (int i = 0; i < cfg.num_occluders; ++i) {
    for (int tries = 0; tries < 20; ++tries) {
      const int w = rng.uniform_int(cfg.occluder_min, cfg.occluder_max);
      const int h = rng.uniform_int(cfg.occluder_min, cfg.occluder_max);
      const Rect occ{rng.uniform_int(0, cfg.width - w), rng.uniform_int(0, cfg.height - h), w, h};
      bool clash = false;
      for (const Road& road : roads) clash = clash || overlaps(occ, road.rect);
      if (!clash) {
        s.occluders.push_back(occ);
        break;
      }
    }
  }

  auto make_agent = [&](const Pose2& pose) {
    AgentSpec a;
    a.pose = pose;
    a.fov_half_angle = cfg.fov_half_angle;
    a.view_range = cfg.view_range;
    return a;
  };
  {
    const Road& road = roads[static_cast<std::size_t>(rng.uniform_int(0, cfg.num_roads - 1))];
    const double extent = road.horizontal ? cfg.width : cfg.height;
    s.agents.push_back(make_agent(pose_on_road(rng, road, 0.3 * extent, 0.7 * extent)));
  }
  const Pose2 ego = s.agents.front().pose;
  for (int k = 1; k < cfg.num_agents; ++k) {
    const bool far = rng.bernoulli(cfg.far_agent_prob);
    Pose2 pose;
    for (int tries = 0; tries < 200; ++tries) {
      const Road& road = roads[static_cast<std::size_t>(rng.uniform_int(0, cfg.num_roads - 1))];
      const double extent = road.horizontal ? cfg.width : cfg.height;
      pose = pose_on_road(rng, road, 0.5, extent - 0.5);
      if (far || std::hypot(pose.x - ego.x, pose.y - ego.y) <= cfg.agent_spread) break;
    }
    AgentSpec a = make_agent(pose);
    a.valid = !rng.bernoulli(cfg.invalid_agent_prob);
    s.agents.push_back(a);
  }
  s.label_map = rasterize_labels(s.height, s.width, s.objects);
  return s;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    Scene s = build_candidate(seed, attempt, config);
    if (!config.force_heterogeneity) return s;
    const auto counts = object_view_counts(s);
    if (std::find(counts.begin(), counts.end(), 1) != counts.end()) return s;
  }
  throw GenerationError("generate_scene: no heterogeneous scene for seed " +
                        std::to_string(seed) + " after " + std::to_string(config.max_retries) +
                        " attempts");
}

AgentObservation observe(const Scene& scene, const AgentSpec& agent, std::uint64_t noise_seed) {
  agent.validate();
  if (!agent.valid) throw std::invalid_argument("observe: agent is not valid");
  const int h = scene.height, w = scene.width;
  const auto ch = static_cast<std::size_t>(scene.config.channels);
  const auto hw = static_cast<std::size_t>(h * w);
  const double sigma = scene.config.noise_sigma;
  Rng rng(noise_seed);
  AgentObservation obs;
  obs.agent = agent;
  obs.visibility.assign(hw, 0);
  std::vector<double> feat(ch * hw, 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const LocalPoint wp = local_to_world(agent.pose, local_cell_center(r, c, h, w));
      if (!point_visible(scene, agent, wp.u, wp.v)) continue;
      const auto cell = static_cast<std::size_t>(r * w + c);
      obs.visibility[cell] = 1;
      const int col = static_cast<int>(std::floor(wp.u));
      const int row = static_cast<int>(std::floor(wp.v));
      int label = 0;
      if (row >= 0 && row < h && col >= 0 && col < w) label = scene.label_at(row, col);
      if (label > 0) feat[static_cast<std::size_t>(label - 1) * hw + cell] = 1.0;
      if (sigma > 0.0) {
        for (std::size_t k = 0; k < ch; ++k) feat[k * hw + cell] += sigma * rng.normal();
      }
    }
  }
  obs.features = Tensor::from_data({ch, static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                                   std::move(feat));
  return obs;
}

std::vector<std::uint8_t> comm_filter(const Scene& scene, std::size_t ego_index, double radius) {
  if (ego_index >= scene.agents.size()) {
    throw std::invalid_argument("comm_filter: ego index out of range");
  }
  const AgentSpec& ego = scene.agents[ego_index];
  if (!ego.valid) throw std::invalid_argument("comm_filter: ego agent is not valid");
  std::vector<std::uint8_t> mask(scene.agents.size(), 0);
  for (std::size_t k = 0; k < scene.agents.size(); ++k) {
    const AgentSpec& a = scene.agents[k];
    const double d = std::hypot(a.pose.x - ego.pose.x, a.pose.y - ego.pose.y);
    mask[k] = (a.valid && d <= radius) ? 1 : 0;
  }
  mask[ego_index] = 1;
  return mask;
}

std::vector<int> ego_label_map(const Scene& scene, const AgentSpec& ego) {
  const int h = scene.height, w = scene.width;
  std::vector<int> out(static_cast<std::size_t>(h * w), 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const LocalPoint wp = local_to_world(ego.pose, local_cell_center(r, c, h, w));
      const int col = static_cast<int>(std::floor(wp.u));
      const int row = static_cast<int>(std::floor(wp.v));
      if (row >= 0 && row < h && col >= 0 && col < w) out[r * w + c] = scene.label_at(row, col);
    }
  return out;
}

json scene_to_json(const Scene& s) {
  json objects = json::array();
  for (const auto& o : s.objects) {
    objects.push_back({{"class", class_name(o.label)},
                       {"x", o.rect.x},
                       {"y", o.rect.y},
                       {"w", o.rect.w},
                       {"h", o.rect.h}});
  }
  json occluders = json::array();
  for (const auto& r : s.occluders) occluders.push_back({{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}});
  json agents = json::array();
  for (const auto& a : s.agents) {
    agents.push_back({{"x", a.pose.x},
                      {"y", a.pose.y},
                      {"theta", a.pose.theta},
                      {"fov_half_angle", a.fov_half_angle},
                      {"view_range", a.view_range},
                      {"valid", a.valid}});
  }
  json rows = json::array();
  for (int r = 0; r < s.height; ++r) {
    rows.push_back(std::vector<int>(s.label_map.begin() + r * s.width,
                                    s.label_map.begin() + (r + 1) * s.width));
  }
  return json{{"format", "cobev.scene"},
              {"version", kSceneFormatVersion},
              {"seed", s.seed},
              {"attempt", s.attempt},
              {"config", s.config.to_json()},
              {"height", s.height},
              {"width", s.width},
              {"objects", objects},
              {"occluders", occluders},
              {"agents", agents},
              {"label_map", rows}};
}

Scene scene_from_json(const json& j) {
  if (j.value("format", "") != "cobev.scene") throw ConfigError("scene: not a cobev.scene document");
  if (j.value("version", 0) != kSceneFormatVersion) {
    throw ConfigError("scene.version: unsupported version " + j.value("version", json(0)).dump());
  }
  try {
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.attempt = j.at("attempt").get<int>();
    s.config = SceneConfig::from_json(j.at("config"));
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    for (const auto& o : j.at("objects")) {
      s.objects.push_back({parse_class(o.at("class").get<std::string>()),
                           Rect{o.at("x"), o.at("y"), o.at("w"), o.at("h")}});
    }
    for (const auto& r : j.at("occluders")) s.occluders.push_back(Rect{r.at("x"), r.at("y"), r.at("w"), r.at("h")});
    for (const auto& a : j.at("agents")) {
      AgentSpec spec;
      spec.pose = {a.at("x"), a.at("y"), a.at("theta")};
      spec.fov_half_angle = a.at("fov_half_angle");
      spec.view_range = a.at("view_range");
      spec.valid = a.at("valid");
      s.agents.push_back(spec);
    }
    for (const auto& row : j.at("label_map")) {
      for (const auto& v : row) s.label_map.push_back(v.get<int>());
    }
    if (s.label_map.size() != static_cast<std::size_t>(s.height * s.width)) {
      throw ConfigError("scene.label_map: size does not match height x width");
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene: malformed document: ") + e.what());
  }
}

}  // namespace cobev
