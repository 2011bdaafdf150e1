// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "cobev/rng.hpp"

namespace cobev {

using nlohmann::json;

double cosine_lr(std::size_t step, std::size_t total_steps, const ScheduleConfig& s) {
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return s.final_lr + 0.5 * (s.initial_lr - s.final_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

Adam::Adam(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw std::invalid_argument("Adam: parameters must be requires_grad leaves");
    }
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    auto w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::uint64_t scene_seed(std::uint64_t data_seed, Split split, std::size_t index) {
  const std::uint64_t stream = split == Split::kTrain ? index : (index | (1ULL << 62));
  return derive_seed(data_seed, stream);
}

Sample make_sample(const Scene& scene) {
  const std::size_t n = scene.agents.size();
  const std::size_t ego = 0;
  const auto mask = comm_filter(scene, ego, scene.config.comm_radius);
  std::vector<AgentObservation> obs(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (mask[k]) obs[k] = observe(scene, scene.agents[k], derive_seed(scene.seed, 1000 + k));
  }
  Sample s;
  s.scene_seed = scene.seed;
  s.attempt = scene.attempt;
  s.batch = assemble(obs, ego, mask);
  s.labels = ego_label_map(scene, scene.agents[ego]);
  return s;
}

std::vector<Sample> build_dataset(const SceneConfig& cfg, std::uint64_t data_seed, Split split,
                                  std::size_t count) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(make_sample(generate_scene(scene_seed(data_seed, split, i), cfg)));
  }
  return out;
}

AlignedBatch batch_of(const std::vector<Sample>& samples, std::span<const std::size_t> order,
                      std::vector<int>& labels_out) {
  std::vector<const AlignedBatch*> items;
  labels_out.clear();
  for (std::size_t i : order) {
    items.push_back(&samples.at(i).batch);
    labels_out.insert(labels_out.end(), samples[i].labels.begin(), samples[i].labels.end());
  }
  return collate(items);
}

namespace {

json tensor_stats(const Tensor& t) {
  if (!t.defined()) return nullptr;
  std::size_t bad = 0;
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      ++bad;
      continue;
    }
    if (first || v < lo) lo = v;
    if (first || v > hi) hi = v;
    first = false;
  }
  return json{{"shape", t.shape()}, {"non_finite", bad}, {"min", lo}, {"max", hi}};
}

json batch_dump(const std::vector<Sample>& samples, std::span<const std::size_t> order,
                const AlignedBatch& batch, const Model& model, std::size_t epoch,
                std::size_t step) {
  json scenes = json::array();
  for (std::size_t i : order) {
    scenes.push_back({{"index", i}, {"seed", samples[i].scene_seed}, {"attempt", samples[i].attempt}});
  }
  json params = json::object();
  for (const auto& [name, t] : model.named()) params[name] = tensor_stats(t);
  return json{{"epoch", epoch},
              {"step", step},
              {"scenes", scenes},
              {"mask", batch.mask.bits},
              {"ego", batch.ego},
              {"features", tensor_stats(batch.x)},
              {"parameters", params}};
}

double item_diversity(const Tensor& experts, const AgentMask& mask, std::size_t b,
                      bool& counted) {
  const Shape& s = experts.shape();
  const Tensor one = reshape(select(experts, {b}), {1, s[1], s[2], s[3], s[4]});
  AgentMask m(1, s[1], 0);
  for (std::size_t k = 0; k < s[1]; ++k) m.set(0, k, mask(b, k));
  counted = m.count_row(0) >= 2;
  return expert_diversity(one, m);
}

}  // namespace

EvalRecord evaluate(const Model& model, const std::vector<Sample>& scenes, std::size_t batch_size,
                    const DemlConfig& deml_cfg) {
  if (scenes.empty()) throw std::invalid_argument("evaluate: empty scene set");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  NoGradGuard no_grad;
  ConfusionMatrix cm;
  double loss_sum = 0.0, div_sum = 0.0;
  std::size_t batches = 0, div_items = 0;
  std::vector<std::size_t> idx(scenes.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> labels;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    const std::span<const std::size_t> part(idx.data() + start, end - start);
    const AlignedBatch batch = batch_of(scenes, part, labels);
    const LossBreakdown l = compute_loss(model, batch, labels, deml_cfg);
    loss_sum += l.task.item();
    ++batches;
    const Tensor& logits = l.forward.logits;
    const std::size_t pixels = logits.dim(2) * logits.dim(3);
    cm.add(predict_labels(logits.data(), logits.dim(0), logits.dim(1), pixels), labels);
    if (l.forward.moe) {
      for (std::size_t b = 0; b < logits.dim(0); ++b) {
        bool counted = false;
        const double d = item_diversity(l.forward.moe->experts, batch.mask, b, counted);
        if (counted) {
          div_sum += d;
          ++div_items;
        }
      }
    }
  }
  EvalRecord r;
  r.scenes = scenes.size();
  r.loss = loss_sum / static_cast<double>(batches);
  double iou_sum = 0.0;
  std::size_t present = 0;
  for (int c = 1; c <= kNumClasses; ++c) {
    r.iou[static_cast<std::size_t>(c - 1)] = cm.iou(c);
    if (auto v = cm.iou(c)) {
      iou_sum += *v;
      ++present;
    }
  }
  if (present) r.mean_iou = iou_sum / static_cast<double>(present);
  if (model.has_experts()) r.diversity = div_items ? div_sum / static_cast<double>(div_items) : 0.0;
  return r;
}

TrainResult train(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const auto train_set = build_dataset(cfg.scene, cfg.data_seed, Split::kTrain, cfg.train_scenes);
  const auto eval_set = build_dataset(cfg.scene, cfg.data_seed, Split::kEval, cfg.eval_scenes);
  return train(cfg, train_set, eval_set, progress);
}

TrainResult train(const ExperimentConfig& cfg, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& eval_set, const ProgressFn& progress) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  TrainResult result{Model::init(cfg), {}};
  Model& model = result.model;
  MetricsRecord& metrics = result.metrics;
  metrics.seed = cfg.seed;

  Adam opt(model.parameters(), cfg.optimizer);
  const std::size_t total = cfg.resolved_total_steps();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(cfg.seed, 103));
  std::vector<int> labels;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<int>(i)));
      std::swap(order[i], order[j]);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> part(order.data() + start, end - start);
      const AlignedBatch batch = batch_of(train_set, part, labels);
      const double lr = cosine_lr(step, total, cfg.schedule);
      opt.zero_grad();
      LossBreakdown l;
      try {
        l = compute_loss(model, batch, labels, cfg.deml);
        if (!std::isfinite(l.total.item())) throw NumericError("loss is not finite");
        l.total.backward();
      } catch (const NumericError& e) {
        throw TrainingError("train: non-finite value at epoch " + std::to_string(epoch) +
                                ", step " + std::to_string(step) + ": " + e.what(),
                            batch_dump(train_set, part, batch, model, epoch, step));
      }
      opt.step(lr);
      ++step;
      StepRecord s{step, lr, l.total.item(), l.task.item(), l.deml.defined() ? l.deml.item() : 0.0};
      metrics.steps.push_back(s);
      rec.loss += s.loss;
      rec.task_loss += s.task_loss;
      rec.deml_loss += s.deml_loss;
      rec.lr = lr;
      ++batches;
    }
    rec.step = step;
    rec.loss /= static_cast<double>(batches);
    rec.task_loss /= static_cast<double>(batches);
    rec.deml_loss /= static_cast<double>(batches);
    const bool last = epoch == cfg.epochs;
    if (!eval_set.empty() && (last || (cfg.eval_every && epoch % cfg.eval_every == 0))) {
      rec.eval = evaluate(model, eval_set, cfg.batch_size, cfg.deml);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.epochs.push_back(rec);
    if (progress) progress(rec);
  }
  if (!eval_set.empty()) {
    if (!metrics.epochs.empty() && metrics.epochs.back().eval) {
      metrics.final_eval = metrics.epochs.back().eval;
    } else {
      metrics.final_eval = evaluate(model, eval_set, cfg.batch_size, cfg.deml);
    }
  }
  return result;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double median_absolute_deviation(const std::vector<double>& v) {
  const double m = median(v);
  std::vector<double> dev;
  for (double x : v) dev.push_back(std::abs(x - m));
  return median(dev);
}

namespace {

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::optional<double> median_of(const std::vector<std::optional<double>>& values) {
  std::vector<double> v;
  for (const auto& x : values)
    if (x) v.push_back(*x);
  if (v.empty()) return std::nullopt;
  return median(v);
}

}  // namespace

std::array<std::optional<double>, kNumClasses> AblationCell::median_iou() const {
  std::array<std::optional<double>, kNumClasses> out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::vector<std::optional<double>> v;
    for (const auto& r : runs) v.push_back(r.iou[c]);
    out[c] = median_of(v);
  }
  return out;
}

std::optional<double> AblationCell::median_mean_iou() const {
  std::vector<std::optional<double>> v;
  for (const auto& r : runs) v.push_back(r.mean_iou);
  return median_of(v);
}

std::optional<double> AblationCell::median_diversity() const {
  std::vector<std::optional<double>> v;
  for (const auto& r : runs) v.push_back(r.diversity);
  return median_of(v);
}

double AblationCell::vehicle_mad() const {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.vehicle_iou());
  return v.empty() ? 0.0 : median_absolute_deviation(v);
}

AblationResult ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                      const RunFn& on_run) {
  base.validate();
  if (seeds.empty()) throw std::invalid_argument("ablate: no seeds");
  const auto train_set = build_dataset(base.scene, base.data_seed, Split::kTrain, base.train_scenes);
  const auto eval_set = build_dataset(base.scene, base.data_seed, Split::kEval, base.eval_scenes);

  AblationResult out;
  std::map<std::string, EvalRecord> cache;
  auto run_cell = [&](const std::string& label, FusionKind fusion, double lambda) {
    AblationCell cell;
    cell.label = label;
    cell.fusion = fusion;
    cell.lambda = lambda;
    cell.seeds = seeds;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.fusion = fusion;
      cfg.deml.lambda = lambda;
      cfg.seed = seed;
      const std::string key = config_hash(cfg.to_json());
      auto it = cache.find(key);
      if (it == cache.end()) {
        TrainResult r = train(cfg, train_set, eval_set);
        it = cache.emplace(key, *r.metrics.final_eval).first;
        ++out.unique_runs;
      }
      cell.runs.push_back(it->second);
      if (on_run) on_run(label, seed, it->second);
    }
    return cell;
  };

  out.components.push_back(run_cell("attention", FusionKind::kAttention, 0.0));
  out.components.push_back(run_cell("+vanilla MoE", FusionKind::kVanillaMoe, 0.0));
  out.components.push_back(run_cell("+DMoE", FusionKind::kDmoe, 0.0));
  out.components.push_back(run_cell("+DMoE +DEML", FusionKind::kDmoe, base.deml.lambda));
  for (double lambda : lambda_grid()) {
    out.lambda_sweep.push_back(run_cell("lambda=" + short_number(lambda), FusionKind::kDmoe, lambda));
  }
  return out;
}

void write_ablation_csv(const std::filesystem::path& path, const AblationResult& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "table,label,fusion,lambda,seed,iou_vehicle,iou_drivable,iou_lane,mean_iou,diversity\n";
  auto emit = [&](const char* table, const AblationCell& c) {
    const std::string head = std::string(table) + ',' + c.label + ',' + fusion_kind_name(c.fusion) +
                             ',' + format_number(c.lambda) + ',';
    for (std::size_t i = 0; i < c.runs.size(); ++i) {
      const auto& e = c.runs[i];
      out << head << c.seeds[i] << ',' << format_optional(e.iou[0]) << ','
          << format_optional(e.iou[1]) << ',' << format_optional(e.iou[2]) << ','
          << format_optional(e.mean_iou) << ',' << format_optional(e.diversity) << '\n';
    }
    const auto m = c.median_iou();
    out << head << "median," << format_optional(m[0]) << ',' << format_optional(m[1]) << ','
        << format_optional(m[2]) << ',' << format_optional(c.median_mean_iou()) << ','
        << format_optional(c.median_diversity()) << '\n';
  };
  for (const auto& c : r.components) emit("components", c);
  for (const auto& c : r.lambda_sweep) emit("lambda", c);
}

}  // namespace cobev
