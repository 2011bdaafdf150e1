// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cobev/tensor.hpp"

namespace cobev {

// Row-major {0,1} matrix, one row per batch item and one column per agent.
struct AgentMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  AgentMask() = default;
  AgentMask(std::size_t r, std::size_t c, std::uint8_t fill = 1)
      : rows(r), cols(c), bits(r * c, fill) {}

  bool operator()(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits[r * cols + c] = v ? 1 : 0; }
  std::size_t count_row(std::size_t r) const;
};

// --- convolution / pooling / affine -------------------------------------

// Stride-1 cross-correlation with a zero border of one cell.
// input [B,Cin,H,W], kernel [Cout,Cin,3,3] -> [B,Cout,H,W].
Tensor conv2d_3x3(const Tensor& input, const Tensor& kernel);

// Same as conv2d_3x3 but every batch item g uses its own kernel.
// input [G,Cin,H,W], kernels [G,Cout,Cin,3,3] -> [G,Cout,H,W].
Tensor conv2d_3x3_per_sample(const Tensor& input, const Tensor& kernels);

// [B,C,H,W] -> [B,C], spatial mean per channel.
Tensor global_avg_pool(const Tensor& input);

// input [B,Din], weight [Dout,Din], bias [Dout] -> [B,Dout].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Adds bias[c] to every pixel of channel c. x [B,C,H,W], bias [C].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// --- normalisation --------------------------------------------------------

Tensor softmax_lastdim(const Tensor& logits);

// Softmax over the entries of each row whose mask bit is set. Masked
// entries come out exactly zero. logits [R,K], mask R x K. A row with no
// valid entry is an error.
Tensor masked_softmax_lastdim(const Tensor& logits, const AgentMask& mask);

// --- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor relu(const Tensor& a);

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// --- layout ---------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);

// Fixes the leading indices: t[i0, i1, ...] with the remaining axes kept.
Tensor select(const Tensor& t, std::span<const std::size_t> leading);
Tensor select(const Tensor& t, std::initializer_list<std::size_t> leading);

// [n, ...t.shape], each slice a copy of t.
Tensor repeat_leading(const Tensor& t, std::size_t n);

// t [B, ...] -> [B, n, ...], inserting a repeated axis after the first.
Tensor expand_dim1(const Tensor& t, std::size_t n);

// --- cross-agent operators over X [B,N,C,H,W] -----------------------------

// Per location, scaled dot-product attention across agents with the ego's
// vector as query; keys and values are the agents' vectors. Masked agents
// are excluded from keys and values. -> [B,C,H,W]
Tensor agent_attention(const Tensor& x, const AgentMask& mask,
                       std::span<const std::size_t> ego);

// Mean / max over the valid agents at every location. -> [B,C,H,W]
Tensor agent_mean(const Tensor& x, const AgentMask& mask);
Tensor agent_max(const Tensor& x, const AgentMask& mask);

// sum_k w[b,k] * e[b,k,...]. e [B,N,...], w [B,N] -> [B,...]
Tensor weighted_agent_sum(const Tensor& e, const Tensor& w);

// --- losses ---------------------------------------------------------------

// Mean per-pixel cross-entropy. logits [B,K,H,W], labels B*H*W in [0,K).
Tensor cross_entropy_2d(const Tensor& logits, std::span<const int> labels);

}  // namespace cobev
