// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace cobev {

using nlohmann::json;

void ConfusionMatrix::add(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(predicted.size()) +
                                " predictions for " + std::to_string(truth.size()) + " labels");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || t >= static_cast<int>(kSize) || p < 0 || p >= static_cast<int>(kSize)) {
      throw std::out_of_range("confusion: label out of range at pixel " + std::to_string(i));
    }
    ++counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
}

std::optional<double> ConfusionMatrix::iou(int label) const {
  const auto c = static_cast<std::size_t>(label);
  const std::uint64_t tp = counts[c][c];
  std::uint64_t fp = 0, fn = 0;
  for (std::size_t o = 0; o < kSize; ++o) {
    if (o == c) continue;
    fp += counts[o][c];
    fn += counts[c][o];
  }
  const std::uint64_t denom = tp + fp + fn;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<int> predict_labels(std::span<const double> logits, std::size_t batch,
                                std::size_t classes, std::size_t pixels) {
  if (logits.size() != batch * classes * pixels) {
    throw std::invalid_argument("predict_labels: logits size does not match B*K*HW");
  }
  std::vector<int> out(batch * pixels);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = logits.data() + b * classes * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < classes; ++k) {
        if (base[k * pixels + p] > base[best * pixels + p]) best = k;
      }
      out[b * pixels + p] = static_cast<int>(best);
    }
  }
  return out;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) {
  return v ? format_number(*v) : std::string();
}

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

void eval_cells(std::ostream& out, const std::optional<EvalRecord>& e) {
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    out << ',' << (e ? format_optional(e->iou[c]) : std::string());
  }
  out << ',' << (e ? format_optional(e->mean_iou) : std::string());
  out << ',' << (e ? format_optional(e->diversity) : std::string());
}

}  // namespace

json EvalRecord::to_json() const {
  return json{{"iou_vehicle", opt_json(iou[0])},
              {"iou_drivable", opt_json(iou[1])},
              {"iou_lane", opt_json(iou[2])},
              {"mean_iou", opt_json(mean_iou)},
              {"diversity", opt_json(diversity)},
              {"loss", loss},
              {"scenes", scenes}};
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsRecord& m) {
  auto out = open_out(path);
  out << "seed,epoch,step,lr,loss,task_loss,deml_loss,iou_vehicle,iou_drivable,iou_lane,mean_iou,"
         "diversity\n";
  for (const auto& e : m.epochs) {
    out << m.seed << ',' << e.epoch << ',' << e.step << ',' << format_number(e.lr) << ','
        << format_number(e.loss) << ',' << format_number(e.task_loss) << ','
        << format_number(e.deml_loss);
    eval_cells(out, e.eval);
    out << '\n';
  }
}

void write_loss_curve_csv(const std::filesystem::path& path, const MetricsRecord& m) {
  auto out = open_out(path);
  out << "step,lr,loss,task_loss,deml_loss\n";
  for (const auto& s : m.steps) {
    out << s.step << ',' << format_number(s.lr) << ',' << format_number(s.loss) << ','
        << format_number(s.task_loss) << ',' << format_number(s.deml_loss) << '\n';
  }
}

void write_timing_csv(const std::filesystem::path& path, const MetricsRecord& m) {
  auto out = open_out(path);
  out << "epoch,seconds\n";
  for (const auto& e : m.epochs) out << e.epoch << ',' << format_number(e.seconds) << '\n';
}

void write_metrics_jsonl(const std::filesystem::path& path, const MetricsRecord& m) {
  auto out = open_out(path);
  for (const auto& e : m.epochs) {
    json row{{"kind", "epoch"},
             {"seed", m.seed},
             {"epoch", e.epoch},
             {"step", e.step},
             {"lr", e.lr},
             {"loss", e.loss},
             {"task_loss", e.task_loss},
             {"deml_loss", e.deml_loss},
             {"eval", e.eval ? e.eval->to_json() : json(nullptr)}};
    out << row.dump() << '\n';
  }
  if (m.final_eval) {
    out << json{{"kind", "final"}, {"seed", m.seed}, {"eval", m.final_eval->to_json()}}.dump()
        << '\n';
  }
}

void write_eval_csv(const std::filesystem::path& path, const EvalRecord& e) {
  auto out = open_out(path);
  out << "split,iou_vehicle,iou_drivable,iou_lane,mean_iou,diversity,loss,scenes\n";
  out << "eval";
  eval_cells(out, e);
  out << ',' << format_number(e.loss) << ',' << e.scenes << '\n';
}

}  // namespace cobev
