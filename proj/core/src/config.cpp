// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace cobev {

using nlohmann::json;

FusionKind parse_fusion_kind(const std::string& name) {
  if (name == "attention") return FusionKind::kAttention;
  if (name == "mean") return FusionKind::kMean;
  if (name == "max") return FusionKind::kMax;
  if (name == "vanilla_moe") return FusionKind::kVanillaMoe;
  if (name == "dmoe") return FusionKind::kDmoe;
  throw ConfigError("fusion: unknown fusion kind '" + name +
                    "' (expected attention, mean, max, vanilla_moe or dmoe)");
}

const char* fusion_kind_name(FusionKind kind) {
  switch (kind) {
    case FusionKind::kAttention: return "attention";
    case FusionKind::kMean: return "mean";
    case FusionKind::kMax: return "max";
    case FusionKind::kVanillaMoe: return "vanilla_moe";
    case FusionKind::kDmoe: return "dmoe";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  scene.validate();
  dmoe.validate();
  deml.validate();
  if (dmoe.channels != static_cast<std::size_t>(scene.channels)) {
    throw ConfigError("dmoe.channels: disagrees with scene.channels");
  }
  if (dmoe.num_agents_max != static_cast<std::size_t>(scene.num_agents)) {
    throw ConfigError("dmoe.num_agents_max: disagrees with scene.num_agents");
  }
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0)) {
    throw ConfigError("optimizer.beta1: must lie in [0, 1)");
  }
  if (!(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer.beta2: must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps: must be positive");
  if (!(schedule.initial_lr > 0.0)) throw ConfigError("schedule.initial_lr: must be positive");
  if (!(schedule.final_lr >= 0.0)) throw ConfigError("schedule.final_lr: must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size: must be at least 1");
  if (train_scenes == 0) throw ConfigError("train_scenes: must be at least 1");
  if (eval_scenes == 0) throw ConfigError("eval_scenes: must be at least 1");
  if (head_hidden == 0) throw ConfigError("head_hidden: must be at least 1");
}

std::size_t ExperimentConfig::steps_per_epoch() const {
  return (train_scenes + batch_size - 1) / batch_size;
}

std::size_t ExperimentConfig::resolved_total_steps() const {
  const std::size_t t = schedule.total_steps != 0 ? schedule.total_steps : epochs * steps_per_epoch();
  return t == 0 ? 1 : t;
}

json ExperimentConfig::to_json() const {
  return json{{"scene", scene.to_json()},
              {"fusion", fusion_kind_name(fusion)},
              {"dmoe", dmoe.to_json()},
              {"deml", deml.to_json()},
              {"optimizer",
               {{"beta1", optimizer.beta1}, {"beta2", optimizer.beta2}, {"eps", optimizer.eps}}},
              {"schedule",
               {{"initial_lr", schedule.initial_lr},
                {"final_lr", schedule.final_lr},
                {"total_steps", schedule.total_steps}}},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"train_scenes", train_scenes},
              {"eval_scenes", eval_scenes},
              {"head_hidden", head_hidden},
              {"eval_every", eval_every},
              {"seed", seed},
              {"data_seed", data_seed}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  detail::FieldReader r(j, "");
  if (const json* s = r.child("scene")) c.scene = SceneConfig::from_json(*s);
  std::string fusion = fusion_kind_name(c.fusion);
  r.read("fusion", fusion);
  c.fusion = parse_fusion_kind(fusion);
  const json* d = r.child("dmoe");
  c.dmoe = DmoeConfig::from_json(d ? *d : json::object(), static_cast<std::size_t>(c.scene.channels),
                                 static_cast<std::size_t>(c.scene.num_agents));
  if (const json* m = r.child("deml")) c.deml = DemlConfig::from_json(*m);
  if (const json* o = r.child("optimizer")) {
    detail::FieldReader ro(*o, "optimizer");
    ro.read("beta1", c.optimizer.beta1);
    ro.read("beta2", c.optimizer.beta2);
    ro.read("eps", c.optimizer.eps);
    ro.finish();
  }
  if (const json* s = r.child("schedule")) {
    detail::FieldReader rs(*s, "schedule");
    rs.read("initial_lr", c.schedule.initial_lr);
    rs.read("final_lr", c.schedule.final_lr);
    rs.read("total_steps", c.schedule.total_steps);
    rs.finish();
  }
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("train_scenes", c.train_scenes);
  r.read("eval_scenes", c.eval_scenes);
  r.read("head_hidden", c.head_hidden);
  r.read("eval_every", c.eval_every);
  r.read("seed", c.seed);
  r.read("data_seed", c.data_seed);
  r.finish();
  c.validate();
  return c;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from_json(read_json_file(path));
}

std::string config_hash(const json& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cobev
