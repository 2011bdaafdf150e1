// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cobev/scene.hpp"

namespace cobev {

// counts[truth][pred] over labels 0..K.
struct ConfusionMatrix {
  static constexpr std::size_t kSize = kNumClasses + 1;
  std::array<std::array<std::uint64_t, kSize>, kSize> counts{};

  void add(std::span<const int> predicted, std::span<const int> truth);
  // TP / (TP + FP + FN); unset when the class is absent from both maps.
  std::optional<double> iou(int label) const;
};

struct EvalRecord {
  // Vehicle, drivable, lane.
  std::array<std::optional<double>, kNumClasses> iou{};
  std::optional<double> mean_iou;     // over the classes that have an IoU
  std::optional<double> diversity;    // unset without experts
  double loss = 0.0;                  // mean task loss over eval batches
  std::size_t scenes = 0;

  double vehicle_iou() const { return iou[0].value_or(0.0); }
  nlohmann::json to_json() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // optimizer steps completed
  double lr = 0.0;        // step size of the epoch's last step
  double loss = 0.0;      // epoch means
  double task_loss = 0.0;
  double deml_loss = 0.0;
  std::optional<EvalRecord> eval;
  double seconds = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double task_loss = 0.0;
  double deml_loss = 0.0;
};

struct MetricsRecord {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  std::optional<EvalRecord> final_eval;
};

// Argmax over the class axis of [B,K,H,W] logits; ties go to the lower id.
std::vector<int> predict_labels(std::span<const double> logits, std::size_t batch,
                                std::size_t classes, std::size_t pixels);

// Writers. Numeric cells use 17 significant digits; unset values are empty.
// Columns of metrics.csv:
//   seed,epoch,step,lr,loss,task_loss,deml_loss,iou_vehicle,iou_drivable,iou_lane,mean_iou,diversity
void write_metrics_csv(const std::filesystem::path& path, const MetricsRecord& m);
// step,lr,loss,task_loss,deml_loss
void write_loss_curve_csv(const std::filesystem::path& path, const MetricsRecord& m);
// epoch,seconds
void write_timing_csv(const std::filesystem::path& path, const MetricsRecord& m);
// One JSON object per epoch followed by one for the final evaluation.
void write_metrics_jsonl(const std::filesystem::path& path, const MetricsRecord& m);
// Single evaluation: split,iou_vehicle,iou_drivable,iou_lane,mean_iou,diversity,loss,scenes
void write_eval_csv(const std::filesystem::path& path, const EvalRecord& e);

std::string format_number(double v);
std::string format_optional(const std::optional<double>& v);

}  // namespace cobev
