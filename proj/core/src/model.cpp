// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/model.hpp"

#include <cmath>
#include <stdexcept>

#include "cobev/rng.hpp"

namespace cobev {

namespace {

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = sd * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

void load_into(Tensor& dst, const Checkpoint& ck, const std::string& name) {
  const Tensor& src = ck.at(name);
  if (src.shape() != dst.shape()) {
    throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_str(src.shape()) +
                          ", model expects " + shape_str(dst.shape()));
  }
  auto out = dst.mutable_data();
  auto in = src.data();
  std::copy(in.begin(), in.end(), out.begin());
}

}  // namespace

SegHeadParams SegHeadParams::init(std::size_t channels, std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  SegHeadParams h;
  h.w1 = he_normal(rng, {hidden, channels, 3, 3}, channels * 9);
  h.b1 = Tensor::zeros({hidden}, true);
  h.w2 = he_normal(rng, {kNumLabels, hidden, 3, 3}, hidden * 9);
  h.b2 = Tensor::zeros({kNumLabels}, true);
  return h;
}

SegHeadParams SegHeadParams::zeros(std::size_t channels, std::size_t hidden) {
  SegHeadParams h;
  h.w1 = Tensor::zeros({hidden, channels, 3, 3}, true);
  h.b1 = Tensor::zeros({hidden}, true);
  h.w2 = Tensor::zeros({kNumLabels, hidden, 3, 3}, true);
  h.b2 = Tensor::zeros({kNumLabels}, true);
  return h;
}

NamedTensors SegHeadParams::named() const {
  return {{"head.w1", w1}, {"head.b1", b1}, {"head.w2", w2}, {"head.b2", b2}};
}

Tensor seg_head(const Tensor& features, const SegHeadParams& head) {
  if (features.rank() != 4 || features.dim(1) != head.w1.dim(1)) {
    throw ShapeError("seg_head: features " + shape_str(features.shape()) + " vs first layer " +
                     shape_str(head.w1.shape()));
  }
  const Tensor h = relu(add_channel_bias(conv2d_3x3(features, head.w1), head.b1));
  return add_channel_bias(conv2d_3x3(h, head.w2), head.b2);
}

Tensor task_loss(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy_2d(logits, labels);
}

Model Model::init(const ExperimentConfig& cfg) {
  cfg.validate();
  Model m;
  m.fusion = cfg.fusion;
  m.dmoe = cfg.dmoe;
  m.params = DmoeParams::init(cfg.dmoe, derive_seed(cfg.seed, 101));
  m.head = SegHeadParams::init(cfg.dmoe.channels, cfg.head_hidden, derive_seed(cfg.seed, 102));
  return m;
}

Model Model::from_checkpoint(const ExperimentConfig& cfg, const Checkpoint& ck) {
  Model m = init(cfg);
  for (auto& [name, t] : m.named()) load_into(t, ck, name);
  return m;
}

NamedTensors Model::named() const {
  NamedTensors all = params.named();
  for (auto& e : head.named()) all.push_back(e);
  return all;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& e : named()) out.push_back(e.second);
  return out;
}

ForwardResult forward(const Model& model, const AlignedBatch& batch) {
  ForwardResult r;
  switch (model.fusion) {
    case FusionKind::kDmoe:
      r.moe = dmoe_fuse(batch.x, batch.mask, batch.ego, model.params, model.dmoe);
      r.features = r.moe->residual;
      break;
    case FusionKind::kVanillaMoe:
      r.moe = vanilla_moe_fuse(batch.x, batch.mask, batch.ego, model.params, model.dmoe);
      r.features = r.moe->residual;
      break;
    case FusionKind::kAttention:
      r.features = baseline_fuse(batch.x, batch.mask, batch.ego, BaselineKind::kAttention,
                                 model.params, model.dmoe);
      break;
    case FusionKind::kMean:
      r.features = baseline_fuse(batch.x, batch.mask, batch.ego, BaselineKind::kMean, model.params,
                                 model.dmoe);
      break;
    case FusionKind::kMax:
      r.features = baseline_fuse(batch.x, batch.mask, batch.ego, BaselineKind::kMax, model.params,
                                 model.dmoe);
      break;
  }
  r.logits = seg_head(r.features, model.head);
  return r;
}

LossBreakdown compute_loss(const Model& model, const AlignedBatch& batch,
                           std::span<const int> labels, const DemlConfig& deml_cfg) {
  LossBreakdown out;
  out.forward = forward(model, batch);
  out.task = task_loss(out.forward.logits, labels);
  if (out.forward.moe) {
    DemlResult d = deml(out.forward.moe->fused, out.forward.moe->experts, batch.mask, deml_cfg);
    out.deml = d.loss;
    out.report = std::move(d.report);
    out.total = total_loss(out.task, out.deml, deml_cfg.lambda);
  } else {
    out.total = out.task;
  }
  return out;
}

}  // namespace cobev
