// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/deml.hpp"

#include <stdexcept>
#include <string>

#include "cobev/errors.hpp"
#include "json_util.hpp"

namespace cobev {

using nlohmann::json;

void DemlConfig::validate() const {
  if (!(margin >= 0.0)) throw ConfigError("deml.margin: must be non-negative");
  if (!(beta >= 0.0)) throw ConfigError("deml.beta: must be non-negative");
  if (!(lambda >= 0.0)) throw ConfigError("deml.lambda: must be non-negative");
}

json DemlConfig::to_json() const {
  return json{{"margin", margin}, {"beta", beta}, {"lambda", lambda}};
}

DemlConfig DemlConfig::from_json(const json& j) {
  DemlConfig c;
  detail::FieldReader r(j, "deml");
  r.read("margin", c.margin);
  r.read("beta", c.beta);
  r.read("lambda", c.lambda);
  r.finish();
  c.validate();
  return c;
}

json TripletReport::to_json() const {
  json rows = json::array();
  for (const auto& e : experts) {
    rows.push_back({{"batch", e.batch},
                    {"expert", e.expert},
                    {"d_pos", e.d_pos},
                    {"d_neg", e.d_neg ? json(*e.d_neg) : json(nullptr)},
                    {"hardest_negative",
                     e.hardest_negative ? json(*e.hardest_negative) : json(nullptr)},
                    {"triplet_loss", e.triplet_loss}});
  }
  return json{{"n_valid", n_valid}, {"loss", loss}, {"experts", rows}};
}

namespace {

double map_mse(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace

DemlResult deml(const Tensor& fused, const Tensor& experts, const AgentMask& mask,
                const DemlConfig& cfg) {
  if (fused.rank() != 4 || experts.rank() != 5 || experts.dim(0) != fused.dim(0) ||
      experts.dim(2) != fused.dim(1) || experts.dim(3) != fused.dim(2) ||
      experts.dim(4) != fused.dim(3)) {
    throw ShapeError("deml: fused " + shape_str(fused.shape()) + " vs experts " +
                     shape_str(experts.shape()));
  }
  const std::size_t batch = experts.dim(0), n = experts.dim(1);
  if (mask.rows != batch || mask.cols != n) throw ShapeError("deml: mask does not match experts");

  DemlResult out;
  Tensor total;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> valid;
    for (std::size_t k = 0; k < n; ++k)
      if (mask(b, k)) valid.push_back(k);
    if (valid.empty()) {
      throw std::invalid_argument("deml: batch item " + std::to_string(b) + " has no valid expert");
    }
    const Tensor anchor = select(fused, {b});
    std::vector<Tensor> slices(n);
    for (std::size_t k : valid) slices[k] = select(experts, {b, k});

    Tensor item;
    for (std::size_t k : valid) {
      ExpertTriplet rec;
      rec.batch = b;
      rec.expert = k;
      const Tensor d_pos = mse(slices[k], anchor);
      rec.d_pos = d_pos.item();
      Tensor term = d_pos;
      if (valid.size() >= 2) {
        std::size_t best = n;
        double best_d = 0.0;
        for (std::size_t j : valid) {
          if (j == k) continue;
          const double d = map_mse(slices[k].data(), slices[j].data());
          if (best == n || d < best_d) {
            best = j;
            best_d = d;
          }
        }
        const Tensor d_neg = mse(slices[k], slices[best]);
        const Tensor hinge = relu(add(sub(d_pos, d_neg), cfg.margin));
        rec.d_neg = d_neg.item();
        rec.hardest_negative = best;
        rec.triplet_loss = hinge.item();
        term = add(term, mul(hinge, cfg.beta));
      }
      item = item.defined() ? add(item, term) : term;
      out.report.experts.push_back(rec);
    }
    out.report.n_valid += valid.size();
    item = mul(item, 1.0 / static_cast<double>(valid.size()));
    total = total.defined() ? add(total, item) : item;
  }
  out.loss = mul(total, 1.0 / static_cast<double>(batch));
  out.report.loss = out.loss.item();
  return out;
}

Tensor total_loss(const Tensor& task_loss, const Tensor& deml_loss, double lambda) {
  if (task_loss.numel() != 1 || deml_loss.numel() != 1) {
    throw ShapeError("total_loss: both losses must be scalars");
  }
  return add(task_loss, mul(deml_loss, lambda));
}

}  // namespace cobev
