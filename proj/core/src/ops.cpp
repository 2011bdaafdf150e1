// Copyright 2026 The cobev Authors.
// SPDX-License-Identifier: Apache-2.0

#include "cobev/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "node.hpp"

namespace cobev {

using detail::make_result;
using detail::Node;

std::size_t AgentMask::count_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += bits[r * cols + c] != 0;
  return n;
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& what, const Shape& a,
                             const Shape& b) {
  std::ostringstream os;
  os << op << ": " << what << " (got " << shape_str(a) << " and " << shape_str(b) << ")";
  throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(const char* op, const std::string& what, const Shape& a) {
  std::ostringstream os;
  os << op << ": " << what << " (got " << shape_str(a) << ")";
  throw ShapeError(os.str());
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank), t.shape());
  }
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shapes must match", a.shape(), b.shape());
}

void check_mask(const char* op, const AgentMask& mask, std::size_t rows, std::size_t cols) {
  if (mask.rows != rows || mask.cols != cols || mask.bits.size() != rows * cols) {
    std::ostringstream os;
    os << op << ": mask is " << mask.rows << "x" << mask.cols << ", expected " << rows
       << "x" << cols;
    throw ShapeError(os.str());
  }
}

Node& input_node(Node& self, std::size_t i) { return *self.inputs[i]; }

// out[g,co] += sum_{ci,ky,kx} k[co,ci,ky,kx] * in[g,ci] shifted by (ky-1,kx-1).
// kernel_stride is 0 for a shared kernel or Cout*Cin*9 for per-sample kernels.
void conv_forward(const double* in, const double* k, double* out, std::size_t groups,
                  std::size_t cin, std::size_t cout, std::size_t h, std::size_t w,
                  std::size_t kernel_stride) {
  const std::size_t hw = h * w;
  for (std::size_t g = 0; g < groups; ++g) {
    const double* kg = k + g * kernel_stride;
    for (std::size_t co = 0; co < cout; ++co) {
      double* o = out + (g * cout + co) * hw;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = in + (g * cin + ci) * hw;
        const double* tap = kg + (co * cin + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
          const int dy = ky - 1;
          const std::size_t y0 = dy < 0 ? 1 : 0;
          const std::size_t y1 = dy > 0 ? h - 1 : h;
          for (int kx = 0; kx < 3; ++kx) {
            const int dx = kx - 1;
            const std::size_t x0 = dx < 0 ? 1 : 0;
            const std::size_t x1 = dx > 0 ? w - 1 : w;
            const double wt = tap[ky * 3 + kx];
            for (std::size_t y = y0; y < y1; ++y) {
              double* orow = o + y * w;
              const double* irow = src + (y + dy) * w + dx;
              for (std::size_t x = x0; x < x1; ++x) orow[x] += wt * irow[x];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const double* in, const double* k, const double* gout, double* gin,
                   double* gk, std::size_t groups, std::size_t cin, std::size_t cout,
                   std::size_t h, std::size_t w, std::size_t kernel_stride) {
  const std::size_t hw = h * w;
  for (std::size_t g = 0; g < groups; ++g) {
    const double* kg = k + g * kernel_stride;
    double* gkg = gk ? gk + g * kernel_stride : nullptr;
    for (std::size_t co = 0; co < cout; ++co) {
      const double* go = gout + (g * cout + co) * hw;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = in + (g * cin + ci) * hw;
        double* gsrc = gin ? gin + (g * cin + ci) * hw : nullptr;
        const double* tap = kg + (co * cin + ci) * 9;
        for (int ky = 0; ky < 3; ++ky) {
          const int dy = ky - 1;
          const std::size_t y0 = dy < 0 ? 1 : 0;
          const std::size_t y1 = dy > 0 ? h - 1 : h;
          for (int kx = 0; kx < 3; ++kx) {
            const int dx = kx - 1;
            const std::size_t x0 = dx < 0 ? 1 : 0;
            const std::size_t x1 = dx > 0 ? w - 1 : w;
            const double wt = tap[ky * 3 + kx];
            double acc = 0.0;
            for (std::size_t y = y0; y < y1; ++y) {
              const double* grow = go + y * w;
              const double* irow = src + (y + dy) * w + dx;
              if (gsrc) {
                double* girow = gsrc + (y + dy) * w + dx;
                for (std::size_t x = x0; x < x1; ++x) girow[x] += wt * grow[x];
              }
              for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            }
            if (gkg) gkg[(co * cin + ci) * 9 + ky * 3 + kx] += acc;
          }
        }
      }
    }
  }
}

Tensor conv_impl(const char* op, const Tensor& input, const Tensor& kernel, bool per_sample) {
  require_rank(op, input, 4);
  const std::size_t groups = input.dim(0), cin = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t koff = per_sample ? 1 : 0;
  if (kernel.rank() != 4 + koff || kernel.dim(koff + 2) != 3 || kernel.dim(koff + 3) != 3 ||
      kernel.dim(koff + 1) != cin || (per_sample && kernel.dim(0) != groups)) {
    shape_fail(op, "kernel does not match input", input.shape(), kernel.shape());
  }
  const std::size_t cout = kernel.dim(koff);
  const std::size_t kstride = per_sample ? cout * cin * 9 : 0;
  std::vector<double> out(groups * cout * h * w, 0.0);
  conv_forward(input.data().data(), kernel.data().data(), out.data(), groups, cin, cout, h,
               w, kstride);
  return make_result(op, {groups, cout, h, w}, std::move(out), {input, kernel},
                     [=](Node& self) {
                       Node& in = input_node(self, 0);
                       Node& kn = input_node(self, 1);
                       double* gin = in.requires_grad ? in.grad_buffer().data() : nullptr;
                       double* gk = kn.requires_grad ? kn.grad_buffer().data() : nullptr;
                       conv_backward(in.data.data(), kn.data.data(), self.grad.data(), gin,
                                     gk, groups, cin, cout, h, w, kstride);
                     });
}

template <typename Fwd, typename Bwd>
Tensor binary_same_shape(const char* op, const Tensor& a, const Tensor& b, Fwd fwd,
                         Bwd bwd) {
  require_same(op, a, b);
  std::vector<double> out(a.numel());
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
  return make_result(op, a.shape(), std::move(out), {a, b}, [bwd](Node& self) {
    Node& na = input_node(self, 0);
    Node& nb = input_node(self, 1);
    double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
    double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      bwd(self.grad[i], na.data[i], nb.data[i], ga ? &ga[i] : nullptr,
          gb ? &gb[i] : nullptr);
    }
  });
}

}  // namespace

Tensor conv2d_3x3(const Tensor& input, const Tensor& kernel) {
  return conv_impl("conv2d_3x3", input, kernel, false);
}

Tensor conv2d_3x3_per_sample(const Tensor& input, const Tensor& kernels) {
  return conv_impl("conv2d_3x3_per_sample", input, kernels, true);
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank("global_avg_pool", input, 4);
  const std::size_t rows = input.dim(0) * input.dim(1);
  const std::size_t hw = input.dim(2) * input.dim(3);
  std::vector<double> out(rows, 0.0);
  const auto d = input.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += d[r * hw + p];
    out[r] = acc / static_cast<double>(hw);
  }
  return make_result("global_avg_pool", {input.dim(0), input.dim(1)}, std::move(out),
                     {input}, [rows, hw](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       const double inv = 1.0 / static_cast<double>(hw);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double v = self.grad[r] * inv;
                         for (std::size_t p = 0; p < hw; ++p) g[r * hw + p] += v;
                       }
                     });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank("dense", input, 2);
  require_rank("dense", weight, 2);
  require_rank("dense", bias, 1);
  const std::size_t batch = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    shape_fail("dense", "weight columns must equal input width", input.shape(),
               weight.shape());
  }
  if (bias.dim(0) != dout) {
    shape_fail("dense", "bias length must equal weight rows", weight.shape(), bias.shape());
  }
  std::vector<double> out(batch * dout);
  const auto x = input.data();
  const auto wt = weight.data();
  const auto bs = bias.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = bs[o];
      for (std::size_t i = 0; i < din; ++i) acc += wt[o * din + i] * x[b * din + i];
      out[b * dout + o] = acc;
    }
  }
  return make_result("dense", {batch, dout}, std::move(out), {input, weight, bias},
                     [=](Node& self) {
                       Node& nx = input_node(self, 0);
                       Node& nw = input_node(self, 1);
                       Node& nb = input_node(self, 2);
                       const auto& g = self.grad;
                       if (nx.requires_grad) {
                         auto& gx = nx.grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t o = 0; o < dout; ++o) {
                             const double go = g[b * dout + o];
                             for (std::size_t i = 0; i < din; ++i)
                               gx[b * din + i] += go * nw.data[o * din + i];
                           }
                       }
                       if (nw.requires_grad) {
                         auto& gw = nw.grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t o = 0; o < dout; ++o) {
                             const double go = g[b * dout + o];
                             for (std::size_t i = 0; i < din; ++i)
                               gw[o * din + i] += go * nx.data[b * din + i];
                           }
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t o = 0; o < dout; ++o) gb[o] += g[b * dout + o];
                       }
                     });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_channel_bias", x, 4);
  require_rank("add_channel_bias", bias, 1);
  const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.dim(0) != ch) {
    shape_fail("add_channel_bias", "bias length must equal channels", x.shape(),
               bias.shape());
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bs = bias.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < hw; ++p) out[(b * ch + c) * hw + p] += bs[c];
  return make_result("add_channel_bias", x.shape(), std::move(out), {x, bias},
                     [=](Node& self) {
                       Node& nx = input_node(self, 0);
                       Node& nb = input_node(self, 1);
                       if (nx.requires_grad) {
                         auto& gx = nx.grad_buffer();
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.grad_buffer();
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t c = 0; c < ch; ++c) {
                             double acc = 0.0;
                             for (std::size_t p = 0; p < hw; ++p)
                               acc += self.grad[(b * ch + c) * hw + p];
                             gb[c] += acc;
                           }
                       }
                     });
}

Tensor softmax_lastdim(const Tensor& logits) {
  if (logits.rank() == 0) shape_fail("softmax_lastdim", "need at least one axis", logits.shape());
  const std::size_t k = logits.shape().back();
  const std::size_t rows = logits.numel() / k;
  std::vector<double> out(logits.numel());
  const auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = std::exp(x[r * k + j] - mx);
      z += out[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
  }
  return make_result("softmax_lastdim", logits.shape(), out, {logits},
                     [rows, k, y = out](Node& self) {
                       auto& gx = input_node(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < k; ++j)
                           dot += self.grad[r * k + j] * y[r * k + j];
                         for (std::size_t j = 0; j < k; ++j)
                           gx[r * k + j] += y[r * k + j] * (self.grad[r * k + j] - dot);
                       }
                     });
}

Tensor masked_softmax_lastdim(const Tensor& logits, const AgentMask& mask) {
  require_rank("masked_softmax_lastdim", logits, 2);
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  check_mask("masked_softmax_lastdim", mask, rows, k);
  std::vector<double> out(logits.numel(), 0.0);
  const auto x = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask.count_row(r) == 0) {
      throw std::invalid_argument("masked_softmax_lastdim: row " + std::to_string(r) +
                                  " has no valid entry");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (mask(r, j)) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!mask(r, j)) continue;
      out[r * k + j] = std::exp(x[r * k + j] - mx);
      z += out[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
  }
  // Masked outputs are zero, so the usual softmax VJP already gives them
  // zero gradient.
  return make_result("masked_softmax_lastdim", logits.shape(), out, {logits},
                     [rows, k, y = out](Node& self) {
                       auto& gx = input_node(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < k; ++j)
                           dot += self.grad[r * k + j] * y[r * k + j];
                         for (std::size_t j = 0; j < k; ++j)
                           gx[r * k + j] += y[r * k + j] * (self.grad[r * k + j] - dot);
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor add(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return make_result("add_scalar", a.shape(), std::move(out), {a}, [](Node& self) {
    auto& g = input_node(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor mul(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return make_result("mul_scalar", a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = input_node(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result("relu", a.shape(), std::move(out), {a}, [](Node& self) {
    Node& in = input_node(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (in.data[i] > 0.0) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result("sum", {1}, {acc}, {a}, [](Node& self) {
    auto& g = input_node(self, 0).grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same("mse", a, b);
  const auto da = a.data();
  const auto db = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da[i] - db[i];
    acc += d * d;
  }
  const double n = static_cast<double>(da.size());
  return make_result("mse", {1}, {acc / n}, {a, b}, [n](Node& self) {
    Node& na = input_node(self, 0);
    Node& nb = input_node(self, 1);
    const double scale = 2.0 * self.grad[0] / n;
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (na.data[i] - nb.data[i]);
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (na.data[i] - nb.data[i]);
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_fail("reshape", "element counts differ", a.shape(), shape);
  }
  return make_result("reshape", std::move(shape),
                     std::vector<double>(a.data().begin(), a.data().end()), {a},
                     [](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor select(const Tensor& t, std::span<const std::size_t> leading) {
  if (leading.size() >= t.rank()) {
    shape_fail("select", "too many leading indices", t.shape());
  }
  std::size_t offset = 0;
  for (std::size_t i = 0; i < leading.size(); ++i) {
    if (leading[i] >= t.dim(i)) shape_fail("select", "index out of range", t.shape());
    offset = offset * t.dim(i) + leading[i];
  }
  Shape rest(t.shape().begin() + static_cast<std::ptrdiff_t>(leading.size()), t.shape().end());
  const std::size_t block = shape_numel(rest);
  offset *= block;
  const auto d = t.data();
  std::vector<double> out(d.begin() + static_cast<std::ptrdiff_t>(offset),
                          d.begin() + static_cast<std::ptrdiff_t>(offset + block));
  return make_result("select", std::move(rest), std::move(out), {t},
                     [offset, block](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < block; ++i) g[offset + i] += self.grad[i];
                     });
}

Tensor select(const Tensor& t, std::initializer_list<std::size_t> leading) {
  return select(t, std::span<const std::size_t>(leading.begin(), leading.size()));
}

Tensor repeat_leading(const Tensor& t, std::size_t n) {
  Shape shape{n};
  shape.insert(shape.end(), t.shape().begin(), t.shape().end());
  const std::size_t block = t.numel();
  std::vector<double> out;
  out.reserve(n * block);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), t.data().begin(), t.data().end());
  return make_result("repeat_leading", std::move(shape), std::move(out), {t},
                     [n, block](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < block; ++j) g[j] += self.grad[i * block + j];
                     });
}

Tensor expand_dim1(const Tensor& t, std::size_t n) {
  if (t.rank() < 1) shape_fail("expand_dim1", "need at least one axis", t.shape());
  const std::size_t batch = t.dim(0);
  const std::size_t block = t.numel() / batch;
  Shape shape{batch, n};
  shape.insert(shape.end(), t.shape().begin() + 1, t.shape().end());
  std::vector<double> out(batch * n * block);
  const auto d = t.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(b * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>((b * n + k) * block));
  return make_result("expand_dim1", std::move(shape), std::move(out), {t},
                     [batch, n, block](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t k = 0; k < n; ++k)
                           for (std::size_t j = 0; j < block; ++j)
                             g[b * block + j] += self.grad[(b * n + k) * block + j];
                     });
}

Tensor agent_attention(const Tensor& x, const AgentMask& mask,
                       std::span<const std::size_t> ego) {
  require_rank("agent_attention", x, 5);
  const std::size_t batch = x.dim(0), n = x.dim(1), ch = x.dim(2),
                    hw = x.dim(3) * x.dim(4);
  check_mask("agent_attention", mask, batch, n);
  if (ego.size() != batch) {
    throw ShapeError("agent_attention: need one ego index per batch item");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (mask.count_row(b) == 0) {
      throw std::invalid_argument("agent_attention: every agent is masked in batch item " +
                                  std::to_string(b));
    }
    if (ego[b] >= n || !mask(b, ego[b])) {
      throw std::invalid_argument("agent_attention: ego agent of batch item " +
                                  std::to_string(b) + " is missing or masked");
    }
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(ch));
  const auto d = x.data();
  auto at = [=](std::size_t b, std::size_t k, std::size_t c, std::size_t p) {
    return ((b * n + k) * ch + c) * hw + p;
  };
  std::vector<double> weights(batch * hw * n, 0.0);
  std::vector<double> out(batch * ch * hw, 0.0);
  std::vector<double> score(n);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) {
        if (!mask(b, k)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < ch; ++c) s += d[at(b, ego[b], c, p)] * d[at(b, k, c, p)];
        score[k] = s * scale;
        mx = std::max(mx, score[k]);
      }
      double z = 0.0;
      double* a = &weights[(b * hw + p) * n];
      for (std::size_t k = 0; k < n; ++k) {
        if (!mask(b, k)) continue;
        a[k] = std::exp(score[k] - mx);
        z += a[k];
      }
      for (std::size_t k = 0; k < n; ++k) a[k] /= z;
      for (std::size_t k = 0; k < n; ++k) {
        if (!mask(b, k)) continue;
        for (std::size_t c = 0; c < ch; ++c) out[(b * ch + c) * hw + p] += a[k] * d[at(b, k, c, p)];
      }
    }
  }
  std::vector<std::size_t> ego_copy(ego.begin(), ego.end());
  return make_result(
      "agent_attention", {batch, ch, x.dim(3), x.dim(4)}, std::move(out), {x},
      [=, weights = std::move(weights)](Node& self) {
        Node& in = input_node(self, 0);
        auto& gx = in.grad_buffer();
        const auto& v = in.data;
        std::vector<double> ga(n), gs(n);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t e = ego_copy[b];
          for (std::size_t p = 0; p < hw; ++p) {
            const double* a = &weights[(b * hw + p) * n];
            double mean_ga = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
              ga[k] = 0.0;
              if (!mask(b, k)) continue;
              for (std::size_t c = 0; c < ch; ++c)
                ga[k] += self.grad[(b * ch + c) * hw + p] * v[at(b, k, c, p)];
              mean_ga += a[k] * ga[k];
            }
            for (std::size_t k = 0; k < n; ++k) gs[k] = mask(b, k) ? a[k] * (ga[k] - mean_ga) : 0.0;
            for (std::size_t k = 0; k < n; ++k) {
              if (!mask(b, k)) continue;
              for (std::size_t c = 0; c < ch; ++c) {
                const double go = self.grad[(b * ch + c) * hw + p];
                // value role, key role, query role
                gx[at(b, k, c, p)] += a[k] * go + gs[k] * scale * v[at(b, e, c, p)];
                gx[at(b, e, c, p)] += gs[k] * scale * v[at(b, k, c, p)];
              }
            }
          }
        }
      });
}

Tensor agent_mean(const Tensor& x, const AgentMask& mask) {
  require_rank("agent_mean", x, 5);
  const std::size_t batch = x.dim(0), n = x.dim(1), block = x.numel() / (batch * n);
  check_mask("agent_mean", mask, batch, n);
  std::vector<double> inv(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t valid = mask.count_row(b);
    if (valid == 0) throw std::invalid_argument("agent_mean: every agent is masked");
    inv[b] = 1.0 / static_cast<double>(valid);
  }
  std::vector<double> out(batch * block, 0.0);
  const auto d = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < n; ++k) {
      if (!mask(b, k)) continue;
      for (std::size_t j = 0; j < block; ++j) out[b * block + j] += d[(b * n + k) * block + j];
    }
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < block; ++j) out[b * block + j] *= inv[b];
  return make_result("agent_mean", {batch, x.dim(2), x.dim(3), x.dim(4)}, std::move(out), {x},
                     [=](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t k = 0; k < n; ++k) {
                           if (!mask(b, k)) continue;
                           for (std::size_t j = 0; j < block; ++j)
                             g[(b * n + k) * block + j] += inv[b] * self.grad[b * block + j];
                         }
                     });
}

Tensor agent_max(const Tensor& x, const AgentMask& mask) {
  require_rank("agent_max", x, 5);
  const std::size_t batch = x.dim(0), n = x.dim(1), block = x.numel() / (batch * n);
  check_mask("agent_max", mask, batch, n);
  std::vector<double> out(batch * block);
  std::vector<std::size_t> arg(batch * block, 0);
  const auto d = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (mask.count_row(b) == 0) throw std::invalid_argument("agent_max: every agent is masked");
    for (std::size_t j = 0; j < block; ++j) {
      bool first = true;
      for (std::size_t k = 0; k < n; ++k) {
        if (!mask(b, k)) continue;
        const double v = d[(b * n + k) * block + j];
        if (first || v > out[b * block + j]) {
          out[b * block + j] = v;
          arg[b * block + j] = k;
          first = false;
        }
      }
    }
  }
  return make_result("agent_max", {batch, x.dim(2), x.dim(3), x.dim(4)}, std::move(out), {x},
                     [=, arg = std::move(arg)](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t j = 0; j < block; ++j)
                           g[(b * n + arg[b * block + j]) * block + j] += self.grad[b * block + j];
                     });
}

Tensor weighted_agent_sum(const Tensor& e, const Tensor& w) {
  if (e.rank() < 2) shape_fail("weighted_agent_sum", "experts need rank >= 2", e.shape());
  require_rank("weighted_agent_sum", w, 2);
  const std::size_t batch = e.dim(0), n = e.dim(1);
  if (w.dim(0) != batch || w.dim(1) != n) {
    shape_fail("weighted_agent_sum", "weights must be [B,N] of the experts", e.shape(),
               w.shape());
  }
  const std::size_t block = e.numel() / (batch * n);
  Shape shape{batch};
  shape.insert(shape.end(), e.shape().begin() + 2, e.shape().end());
  std::vector<double> out(batch * block, 0.0);
  const auto de = e.data();
  const auto dw = w.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < n; ++k) {
      const double wk = dw[b * n + k];
      for (std::size_t j = 0; j < block; ++j)
        out[b * block + j] += wk * de[(b * n + k) * block + j];
    }
  return make_result("weighted_agent_sum", std::move(shape), std::move(out), {e, w},
                     [=](Node& self) {
                       Node& ne = input_node(self, 0);
                       Node& nw = input_node(self, 1);
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t k = 0; k < n; ++k) {
                           const std::size_t base = (b * n + k) * block;
                           if (ne.requires_grad) {
                             auto& ge = ne.grad_buffer();
                             const double wk = nw.data[b * n + k];
                             for (std::size_t j = 0; j < block; ++j)
                               ge[base + j] += wk * self.grad[b * block + j];
                           }
                           if (nw.requires_grad) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < block; ++j)
                               acc += self.grad[b * block + j] * ne.data[base + j];
                             nw.grad_buffer()[b * n + k] += acc;
                           }
                         }
                     });
}

Tensor cross_entropy_2d(const Tensor& logits, std::span<const int> labels) {
  require_rank("cross_entropy_2d", logits, 4);
  const std::size_t batch = logits.dim(0), k = logits.dim(1),
                    hw = logits.dim(2) * logits.dim(3);
  if (labels.size() != batch * hw) {
    throw ShapeError("cross_entropy_2d: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_str(logits.shape()));
  }
  for (int lab : labels) {
    if (lab < 0 || static_cast<std::size_t>(lab) >= k) {
      throw std::out_of_range("cross_entropy_2d: label " + std::to_string(lab) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
  const auto x = logits.data();
  std::vector<double> prob(logits.numel());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      auto idx = [&](std::size_t c) { return (b * k + c) * hw + p; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, x[idx(c)]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        prob[idx(c)] = std::exp(x[idx(c)] - mx);
        z += prob[idx(c)];
      }
      for (std::size_t c = 0; c < k; ++c) prob[idx(c)] /= z;
      const int lab = labels[b * hw + p];
      total -= (x[idx(static_cast<std::size_t>(lab))] - mx) - std::log(z);
    }
  const double count = static_cast<double>(batch * hw);
  std::vector<int> lab_copy(labels.begin(), labels.end());
  return make_result("cross_entropy_2d", {1}, {total / count}, {logits},
                     [=, prob = std::move(prob), lab_copy = std::move(lab_copy)](Node& self) {
                       auto& g = input_node(self, 0).grad_buffer();
                       const double scale = self.grad[0] / count;
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t p = 0; p < hw; ++p) {
                           const auto lab = static_cast<std::size_t>(lab_copy[b * hw + p]);
                           for (std::size_t c = 0; c < k; ++c) {
                             const std::size_t i = (b * k + c) * hw + p;
                             g[i] += scale * (prob[i] - (c == lab ? 1.0 : 0.0));
                           }
                         }
                     });
}

}  // namespace cobev
