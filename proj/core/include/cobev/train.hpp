// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobev/align.hpp"
#include "cobev/config.hpp"
#include "cobev/metrics.hpp"
#include "cobev/model.hpp"

namespace cobev {

// --- optimisation ---------------------------------------------------------

double cosine_lr(std::size_t step, std::size_t total_steps, const ScheduleConfig& s);

class Adam {
 public:
  Adam(std::vector<Tensor> params, OptimizerConfig cfg);

  // One bias-corrected update of every parameter that received a gradient.
  void step(double lr);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// --- data -----------------------------------------------------------------

struct Sample {
  std::uint64_t scene_seed = 0;
  int attempt = 0;
  AlignedBatch batch;       // single item
  std::vector<int> labels;  // ego-frame, H*W
};

enum class Split { kTrain, kEval };

// Scene i of a split uses derive_seed(data_seed, i) for training and a
// disjoint stream for evaluation; the ego is agent 0.
std::uint64_t scene_seed(std::uint64_t data_seed, Split split, std::size_t index);
Sample make_sample(const Scene& scene);
std::vector<Sample> build_dataset(const SceneConfig& cfg, std::uint64_t data_seed, Split split,
                                  std::size_t count);

// Stacks samples[order[begin..end)] into one batch.
AlignedBatch batch_of(const std::vector<Sample>& samples, std::span<const std::size_t> order,
                      std::vector<int>& labels_out);

// --- training -------------------------------------------------------------

// Raised when a step produces a non-finite value. `dump` describes the
// offending batch.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, nlohmann::json dump)
      : std::runtime_error(what), dump_(std::move(dump)) {}
  const nlohmann::json& dump() const { return dump_; }

 private:
  nlohmann::json dump_;
};

struct TrainResult {
  Model model;
  MetricsRecord metrics;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

TrainResult train(const ExperimentConfig& cfg, const ProgressFn& progress = {});

// Same with prebuilt data, reused across the runs of an ablation.
TrainResult train(const ExperimentConfig& cfg, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& eval_set, const ProgressFn& progress = {});

EvalRecord evaluate(const Model& model, const std::vector<Sample>& scenes, std::size_t batch_size,
                    const DemlConfig& deml_cfg);

// --- ablation -------------------------------------------------------------

struct AblationCell {
  std::string label;
  FusionKind fusion = FusionKind::kDmoe;
  double lambda = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalRecord> runs;  // one per seed

  std::array<std::optional<double>, kNumClasses> median_iou() const;
  std::optional<double> median_mean_iou() const;
  std::optional<double> median_diversity() const;
  // Median absolute deviation of the vehicle IoU across seeds.
  double vehicle_mad() const;
};

struct AblationResult {
  std::vector<AblationCell> components;  // attention, +vanilla MoE, +DMoE, +DMoE +DEML
  std::vector<AblationCell> lambda_sweep;
  std::size_t unique_runs = 0;
};

inline const std::vector<double>& lambda_grid() {
  static const std::vector<double> grid{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  return grid;
}

using RunFn = std::function<void(const std::string& label, std::uint64_t seed, const EvalRecord&)>;

// Runs every component row and lambda value over `seeds`. Identical
// configurations are trained once. The +DMoE +DEML row uses base.deml.lambda.
AblationResult ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                      const RunFn& on_run = {});

double median(std::vector<double> v);
double median_absolute_deviation(const std::vector<double>& v);

// ablation.csv: table,label,fusion,lambda,seed,iou_vehicle,iou_drivable,iou_lane,mean_iou,diversity
// with one row per seed followed by a row whose seed column reads "median".
void write_ablation_csv(const std::filesystem::path& path, const AblationResult& r);

}  // namespace cobev
