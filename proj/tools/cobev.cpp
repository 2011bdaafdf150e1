// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cobev/checkpoint.hpp"
#include "cobev/config.hpp"
#include "cobev/train.hpp"
#include "cobev/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cobev;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

constexpr const char* kToolVersion = "0.1.0";

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> train_scenes;
  std::optional<std::size_t> eval_scenes;
  std::optional<std::string> fusion;
  std::optional<double> lambda;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--seed", seed, "Override the model/data-order seed");
    cmd.add_option("--data-seed", data_seed, "Override the scene seed");
    cmd.add_option("--epochs", epochs, "Override the number of epochs");
    cmd.add_option("--train-scenes", train_scenes, "Override the training set size");
    cmd.add_option("--eval-scenes", eval_scenes, "Override the evaluation set size");
    cmd.add_option("--fusion", fusion, "Override the fusion kind");
    cmd.add_option("--lambda", lambda, "Override the metric-loss weight");
  }

  void apply(ExperimentConfig& c) const {
    if (seed) c.seed = *seed;
    if (data_seed) c.data_seed = *data_seed;
    if (epochs) c.epochs = *epochs;
    if (train_scenes) c.train_scenes = *train_scenes;
    if (eval_scenes) c.eval_scenes = *eval_scenes;
    if (fusion) c.fusion = parse_fusion_kind(*fusion);
    if (lambda) c.deml.lambda = *lambda;
    c.validate();
  }
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)),
        start_(std::chrono::steady_clock::now()), started_at_(utc_now()) {}

  void set_config(const json& config, std::uint64_t seed) {
    config_ = config;
    seed_ = seed;
  }
  void add_artifact(const fs::path& p) { artifacts_.push_back(p.filename().string()); }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& dir) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j{{"format", "cobev.manifest"},
           {"tool", "cobev"},
           {"tool_version", kToolVersion},
           {"command", command_},
           {"argv", argv_},
           {"config_hash", config_.is_null() ? json(nullptr) : json(config_hash(config_))},
           {"seed", seed_ ? json(*seed_) : json(nullptr)},
           {"config", config_},
           {"artifacts", artifacts_},
           {"started_at", started_at_},
           {"wall_clock_seconds", secs}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::chrono::steady_clock::time_point start_;
  std::string started_at_;
  json config_;
  std::optional<std::uint64_t> seed_;
  std::vector<std::string> artifacts_;
  json extra_ = json::object();
};

fs::path prepare_out(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + out);
  return dir;
}

void print_eval(const EvalRecord& e) {
  std::printf("iou vehicle=%s drivable=%s lane=%s mean=%s diversity=%s\n",
              format_optional(e.iou[0]).c_str(), format_optional(e.iou[1]).c_str(),
              format_optional(e.iou[2]).c_str(), format_optional(e.mean_iou).c_str(),
              format_optional(e.diversity).c_str());
}

int cmd_generate(const std::string& config_path, const std::string& out,
                 std::optional<std::uint64_t> seed, std::size_t count,
                 const std::vector<std::string>& argv) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  const std::uint64_t base = seed.value_or(cfg.data_seed);
  const fs::path dir = prepare_out(out);
  Manifest manifest("generate", argv);
  manifest.set_config(cfg.to_json(), base);
  for (std::size_t i = 0; i < count; ++i) {
    const Scene scene = generate_scene(scene_seed(base, Split::kTrain, i), cfg.scene);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.json", i);
    write_text(dir / name, scene_to_json(scene).dump(1) + "\n");
    manifest.add_artifact(dir / name);
  }
  manifest.set("num_scenes", count);
  manifest.write(dir);
  std::printf("wrote %zu scenes to %s\n", count, dir.string().c_str());
  return kExitOk;
}

void write_run_outputs(const fs::path& dir, const ExperimentConfig& cfg, const TrainResult& r,
                       Manifest& manifest) {
  const auto add = [&](const char* name) {
    manifest.add_artifact(dir / name);
    return dir / name;
  };
  write_metrics_csv(add("metrics.csv"), r.metrics);
  write_metrics_jsonl(add("metrics.jsonl"), r.metrics);
  write_loss_curve_csv(add("loss_curve.csv"), r.metrics);
  write_timing_csv(add("timing.csv"), r.metrics);
  if (r.metrics.final_eval) write_eval_csv(add("eval.csv"), *r.metrics.final_eval);
  write_checkpoint(add("checkpoint.bin"), cfg.to_json(), r.model.named());
}

int cmd_train(const std::string& config_path, const std::string& out, const Overrides& ov,
              const std::vector<std::string>& argv) {
  ExperimentConfig cfg = ExperimentConfig::load(config_path);
  ov.apply(cfg);
  const fs::path dir = prepare_out(out);
  Manifest manifest("train", argv);
  manifest.set_config(cfg.to_json(), cfg.seed);
  try {
    const TrainResult r = train(cfg, [](const EpochRecord& e) {
      std::fprintf(stderr, "epoch %zu step %zu loss %.6f task %.6f deml %.6f (%.1fs)\n", e.epoch,
                   e.step, e.loss, e.task_loss, e.deml_loss, e.seconds);
    });
    write_run_outputs(dir, cfg, r, manifest);
    if (r.metrics.final_eval) print_eval(*r.metrics.final_eval);
  } catch (const TrainingError& e) {
    write_text(dir / "diagnostic.json", e.dump().dump(2) + "\n");
    manifest.add_artifact(dir / "diagnostic.json");
    manifest.set("error", e.what());
    manifest.write(dir);
    std::fprintf(stderr, "error: %s (batch dump in %s)\n", e.what(),
                 (dir / "diagnostic.json").string().c_str());
    return kExitCheckFailed;
  }
  manifest.write(dir);
  return kExitOk;
}

int cmd_eval(const std::optional<std::string>& config_path, const std::string& checkpoint,
             const std::string& out, const Overrides& ov, const std::vector<std::string>& argv) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  ExperimentConfig cfg =
      config_path ? ExperimentConfig::load(*config_path) : ExperimentConfig::from_json(ck.config);
  ov.apply(cfg);
  const Model model = Model::from_checkpoint(cfg, ck);
  const auto scenes = build_dataset(cfg.scene, cfg.data_seed, Split::kEval, cfg.eval_scenes);
  const EvalRecord e = evaluate(model, scenes, cfg.batch_size, cfg.deml);
  const fs::path dir = prepare_out(out);
  Manifest manifest("eval", argv);
  manifest.set_config(cfg.to_json(), cfg.seed);
  manifest.set("checkpoint", fs::absolute(checkpoint).string());
  write_eval_csv(dir / "eval.csv", e);
  manifest.add_artifact(dir / "eval.csv");
  manifest.write(dir);
  print_eval(e);
  return kExitOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("seeds: expected comma-separated integers, got '" + text + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  return seeds;
}

int cmd_ablate(const std::string& config_path, const std::string& out, const std::string& seeds_text,
               const Overrides& ov, const std::vector<std::string>& argv) {
  ExperimentConfig cfg = ExperimentConfig::load(config_path);
  ov.apply(cfg);
  const auto seeds = parse_seeds(seeds_text);
  const fs::path dir = prepare_out(out);
  Manifest manifest("ablate", argv);
  manifest.set_config(cfg.to_json(), cfg.seed);
  manifest.set("seeds", seeds);
  std::ofstream runs(dir / "ablation_runs.jsonl", std::ios::trunc);
  const AblationResult r =
      ablate(cfg, seeds, [&](const std::string& label, std::uint64_t seed, const EvalRecord& e) {
        std::fprintf(stderr, "%-14s seed %llu vehicle IoU %s\n", label.c_str(),
                     static_cast<unsigned long long>(seed), format_optional(e.iou[0]).c_str());
        runs << json{{"label", label}, {"seed", seed}, {"eval", e.to_json()}}.dump() << '\n';
      });
  runs.close();
  write_ablation_csv(dir / "ablation.csv", r);
  manifest.add_artifact(dir / "ablation.csv");
  manifest.add_artifact(dir / "ablation_runs.jsonl");
  manifest.set("unique_runs", r.unique_runs);
  manifest.write(dir);
  std::printf("%-14s %10s %10s %10s %10s %12s\n", "row", "vehicle", "drivable", "lane", "mad", "diversity");
  auto row = [](const AblationCell& c) {
    const auto m = c.median_iou();
    std::printf("%-14s %10.4f %10.4f %10.4f %10.4f %12.6f\n", c.label.c_str(), m[0].value_or(0),
                m[1].value_or(0), m[2].value_or(0), c.vehicle_mad(), c.median_diversity().value_or(0));
  };
  for (const auto& c : r.components) row(c);
  for (const auto& c : r.lambda_sweep) row(c);
  return kExitOk;
}

int cmd_gradcheck(const std::string& size_text, double tolerance, std::uint64_t seed) {
  const ProblemSize size = ProblemSize::parse(size_text);
  if (!(tolerance > 0.0)) throw ConfigError("tolerance: must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = run_gradcheck_suite(size, tolerance, seed);
  bool ok = true;
  std::printf("gradcheck size %s tolerance %g\n", size.str().c_str(), tolerance);
  std::printf("%-28s %14s %10s  %s\n", "op", "max_rel_error", "elements", "status");
  for (const auto& c : checks) {
    std::printf("%-28s %14.3e %10zu  %s\n", c.name.c_str(), c.result.max_rel_error,
                c.result.elements_checked, c.passed ? "ok" : "FAIL");
    ok = ok && c.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s in %.2fs\n", ok ? "all checks passed" : "some checks failed", secs);
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent BEV fusion with dynamic mixture-of-experts"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  const std::vector<std::string> args(argv, argv + argc);

  std::string config, out, checkpoint, size = "B=1,N=3,C=4,H=8,W=8", seeds = "0,1,2,3,4";
  std::optional<std::string> eval_config;
  std::optional<std::uint64_t> gen_seed;
  std::size_t num_scenes = 10;
  double tolerance = 1e-4;
  std::uint64_t check_seed = 7;
  Overrides train_ov, eval_ov, ablate_ov;

  auto* gen = app.add_subcommand("generate", "Write a deterministic set of scene files");
  gen->add_option("--config", config, "Experiment config (JSON)")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Base scene seed (default: config data_seed)");
  gen->add_option("--num-scenes", num_scenes, "Number of scenes")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train a model and evaluate it");
  tr->add_option("--config", config, "Experiment config (JSON)")->required();
  tr->add_option("--out", out, "Output directory")->required();
  train_ov.add_to(*tr);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the evaluation split");
  ev->add_option("--config", eval_config, "Experiment config (default: the checkpoint's)");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--out", out, "Output directory")->required();
  eval_ov.add_to(*ev);

  auto* ab = app.add_subcommand("ablate", "Component ablation and metric-loss weight sweep");
  ab->add_option("--config", config, "Base experiment config (JSON)")->required();
  ab->add_option("--out", out, "Output directory")->required();
  ab->add_option("--seeds", seeds, "Comma-separated seeds");
  ablate_ov.add_to(*ab);

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  gc->add_option("--size", size, "Problem size, e.g. B=1,N=3,C=4,H=8,W=8");
  gc->add_option("--tolerance", tolerance, "Maximum relative error");
  gc->add_option("--seed", check_seed, "Seed of the random operands");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(config, out, gen_seed, num_scenes, args);
    if (tr->parsed()) return cmd_train(config, out, train_ov, args);
    if (ev->parsed()) return cmd_eval(eval_config, checkpoint, out, eval_ov, args);
    if (ab->parsed()) return cmd_ablate(config, out, seeds, ablate_ov, args);
    if (gc->parsed()) return cmd_gradcheck(size, tolerance, check_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitCheckFailed;
  }
  return kExitUsage;
}
