// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. Matrices are row-major [rows x cols];
// entity matrices keep one entity per column. Every op records a backward
// rule on the active tape when any input requires a gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cmr/tensor.hpp"

namespace cmr {

using Mask = std::vector<std::uint8_t>;

namespace detail {

template <typename T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
Tape<T>* recording(const std::vector<Tensor<T>>& inputs) {
  auto* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " tensor, got " +
                         shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  Tensor<T> c({m, n}, std::move(out));
  if (auto* tape = detail::recording({&a, &b})) {
    c.set_requires_grad(true);
    tape->record("matmul", {&a, &b}, c, [a, b, c, m, k, n] {
      if (!c.has_grad()) return;
      const T* g = c.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad_buffer().data();
        const T* pb = b.values().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T acc{0};
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        T* gb = b.grad_buffer().data();
        const T* pa = a.values().data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = pa[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    });
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const T* pa = a.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  Tensor<T> t({n, m}, std::move(out));
  if (auto* tape = detail::recording({&a})) {
    t.set_requires_grad(true);
    tape->record("transpose", {&a}, t, [a, t, m, n] {
      if (!t.has_grad()) return;
      const T* g = t.grad().data();
      T* ga = a.grad_buffer().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return t;
}

/// a ⊗ b for vectors a[m], b[n] -> [m x n].
template <typename T>
Tensor<T> outer_product(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 1, "outer_product");
  detail::require_rank(b, 1, "outer_product");
  const std::size_t m = a.numel(), n = b.numel();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i] * b[j];
  Tensor<T> c({m, n}, std::move(out));
  if (auto* tape = detail::recording({&a, &b})) {
    c.set_requires_grad(true);
    tape->record("outer_product", {&a, &b}, c, [a, b, c, m, n] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i] += g[i * n + j] * b[j];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j] * a[i];
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> c(a.shape(), std::move(out));
  if (auto* tape = detail::recording({&a, &b})) {
    c.set_requires_grad(true);
    tape->record("add", {&a, &b}, c, [a, b, c] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      for (const auto* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto gt = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  Tensor<T> c(a.shape(), std::move(out));
  if (auto* tape = detail::recording({&a})) {
    c.set_requires_grad(true);
    tape->record("scale", {&a}, c, [a, c, factor] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return c;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  Tensor<T> c(a.shape(), std::move(out));
  if (auto* tape = detail::recording({&a})) {
    c.set_requires_grad(true);
    tape->record("relu", {&a}, c, [a, c] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (a[i] > T{0}) ga[i] += g[i];
    });
  }
  return c;
}

/// x[r x c] + b[r], the bias broadcast along columns.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t r = x.rows(), cols = x.cols();
  if (bias.numel() != r) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[i * cols + j] + bias[i];
  Tensor<T> c(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x, &bias})) {
    c.set_requires_grad(true);
    tape->record("add_bias", {&x, &bias}, c, [x, bias, c, r, cols] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < r; ++i) {
          T acc{0};
          for (std::size_t j = 0; j < cols; ++j) acc += g[i * cols + j];
          gb[i] += acc;
        }
      }
    });
  }
  return c;
}

/// x[r x c] with column j multiplied by s[j].
template <typename T>
Tensor<T> scale_columns(const Tensor<T>& x, const Tensor<T>& s) {
  detail::require_rank(x, 2, "scale_columns");
  const std::size_t r = x.rows(), cols = x.cols();
  if (s.numel() != cols) {
    throw DimensionError("scale_columns: scales " + shape_str(s.shape()) +
                         " do not match columns of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[i * cols + j] * s[j];
  Tensor<T> c(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x, &s})) {
    c.set_requires_grad(true);
    tape->record("scale_columns", {&x, &s}, c, [x, s, c, r, cols] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[i * cols + j] * s[j];
      }
      if (s.requires_grad()) {
        auto gs = s.grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cols; ++j) gs[j] += g[i * cols + j] * x[i * cols + j];
      }
    });
  }
  return c;
}

/// Zeroes rows i with !row_mask[i] and columns j with !col_mask[j].
template <typename T>
Tensor<T> mask_zero(const Tensor<T>& x, const Mask& row_mask, const Mask& col_mask) {
  detail::require_rank(x, 2, "mask_zero");
  const std::size_t r = x.rows(), cols = x.cols();
  if (row_mask.size() != r || col_mask.size() != cols) {
    throw DimensionError("mask_zero: masks do not match " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = (row_mask[i] && col_mask[j]) ? x[i * cols + j] : T{0};
  Tensor<T> c(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x})) {
    c.set_requires_grad(true);
    tape->record("mask_zero", {&x}, c, [x, c, row_mask, col_mask, r, cols] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        if (!row_mask[i]) continue;
        for (std::size_t j = 0; j < cols; ++j)
          if (col_mask[j]) gx[i * cols + j] += g[i * cols + j];
      }
    });
  }
  return c;
}

/// Sets every row i with !mask[i] to `fill`; those entries pass no gradient.
template <typename T>
Tensor<T> masked_fill_rows(const Tensor<T>& x, const Mask& mask, T fill) {
  detail::require_rank(x, 2, "masked_fill_rows");
  const std::size_t r = x.rows(), cols = x.cols();
  if (mask.size() != r) {
    throw DimensionError("masked_fill_rows: mask length " +
                         std::to_string(mask.size()) + " vs " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data());
  for (std::size_t i = 0; i < r; ++i)
    if (!mask[i]) std::fill_n(out.begin() + i * cols, cols, fill);
  Tensor<T> c(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x})) {
    c.set_requires_grad(true);
    tape->record("masked_fill_rows", {&x}, c, [x, c, mask, r, cols] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[i * cols + j];
      }
    });
  }
  return c;
}

// ---------------------------------------------------------------------------
// Normalization

/// Each column sums to one. Max-subtracted for stability.
template <typename T>
Tensor<T> softmax_columns(const Tensor<T>& x) {
  detail::require_rank(x, 2, "softmax_columns");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(x.numel());
  for (std::size_t j = 0; j < n; ++j) {
    T hi = x[j];
    for (std::size_t i = 1; i < m; ++i) hi = std::max(hi, x[i * n + j]);
    T total{0};
    for (std::size_t i = 0; i < m; ++i) {
      const T e = std::exp(x[i * n + j] - hi);
      out[i * n + j] = e;
      total += e;
    }
    for (std::size_t i = 0; i < m; ++i) out[i * n + j] /= total;
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("softmax_columns", {&x}, y, [x, y, m, n] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t j = 0; j < n; ++j) {
        T dot{0};
        for (std::size_t i = 0; i < m; ++i) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t i = 0; i < m; ++i)
          gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return y;
}

/// Per-column layer normalization over the d rows of x[d x N], then
/// gain/bias. Variance is the population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t d = x.rows(), n = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) +
                         " entries for input " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  std::vector<T> normed(x.numel());
  std::vector<T> inv_std(n);
  for (std::size_t j = 0; j < n; ++j) {
    T mean{0};
    for (std::size_t i = 0; i < d; ++i) mean += x[i * n + j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t i = 0; i < d; ++i) {
      const T c = x[i * n + j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    inv_std[j] = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      normed[i * n + j] = (x[i * n + j] - mean) * inv_std[j];
      out[i * n + j] = normed[i * n + j] * gain[i] + bias[i];
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (auto* tape = detail::recording({&x, &gain, &bias})) {
    y.set_requires_grad(true);
    tape->record("layer_norm", {&x, &gain, &bias}, y,
                 [x, gain, bias, y, normed = std::move(normed),
                  inv_std = std::move(inv_std), d, n] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad_buffer();
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[i] += g[i * n + j] * normed[i * n + j];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[i] += g[i * n + j];
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t j = 0; j < n; ++j) {
          T mean_g{0}, mean_gx{0};
          for (std::size_t i = 0; i < d; ++i) {
            const T gn = g[i * n + j] * gain[i];
            mean_g += gn;
            mean_gx += gn * normed[i * n + j];
          }
          mean_g /= static_cast<T>(d);
          mean_gx /= static_cast<T>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const T gn = g[i * n + j] * gain[i];
            gx[i * n + j] += inv_std[j] * (gn - mean_g - normed[i * n + j] * mean_gx);
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// Valid cross-correlation, stride 1: input[c_in x h x w],
/// kernels[c_out x c_in x kh x kw], bias[c_out] -> [c_out x h-kh+1 x w-kw+1].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  detail::require_rank(input, 3, "conv2d");
  detail::require_rank(kernels, 4, "conv2d");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " expects different channel count than input " +
                         shape_str(input.shape()));
  }
  if (kh > h || kw > w) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than input " + shape_str(input.shape()));
  }
  if (bias.numel() != cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs " +
                         std::to_string(cout) + " output channels");
  }
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  std::vector<T> out(cout * oh * ow);
  const T* in = input.values().data();
  const T* k = kernels.values().data();
  for (std::size_t o = 0; o < cout; ++o) {
    T* plane = out.data() + o * oh * ow;
    std::fill_n(plane, oh * ow, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t p = 0; p < kh; ++p) {
        for (std::size_t q = 0; q < kw; ++q) {
          const T kv = k[((o * cin + c) * kh + p) * kw + q];
          for (std::size_t y = 0; y < oh; ++y) {
            const T* src = in + (c * h + y + p) * w + q;
            T* dst = plane + y * ow;
            for (std::size_t x = 0; x < ow; ++x) dst[x] += kv * src[x];
          }
        }
      }
    }
  }
  Tensor<T> result({cout, oh, ow}, std::move(out));
  if (auto* tape = detail::recording({&input, &kernels, &bias})) {
    result.set_requires_grad(true);
    tape->record("conv2d", {&input, &kernels, &bias}, result,
                 [input, kernels, bias, result, cin, h, w, cout, kh, kw, oh, ow] {
      if (!result.has_grad()) return;
      const T* g = result.grad().data();
      const T* in = input.values().data();
      const T* k = kernels.values().data();
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t o = 0; o < cout; ++o) {
          T acc{0};
          for (std::size_t i = 0; i < oh * ow; ++i) acc += g[o * oh * ow + i];
          gb[o] += acc;
        }
      }
      T* gk = kernels.requires_grad() ? kernels.grad_buffer().data() : nullptr;
      T* gi = input.requires_grad() ? input.grad_buffer().data() : nullptr;
      for (std::size_t o = 0; o < cout; ++o) {
        const T* plane = g + o * oh * ow;
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t p = 0; p < kh; ++p) {
            for (std::size_t q = 0; q < kw; ++q) {
              const std::size_t kidx = ((o * cin + c) * kh + p) * kw + q;
              T acc{0};
              for (std::size_t y = 0; y < oh; ++y) {
                const T* src = in + (c * h + y + p) * w + q;
                const T* gy = plane + y * ow;
                if (gk)
                  for (std::size_t x = 0; x < ow; ++x) acc += gy[x] * src[x];
                if (gi) {
                  T* dst = gi + (c * h + y + p) * w + q;
                  const T kv = k[kidx];
                  for (std::size_t x = 0; x < ow; ++x) dst[x] += gy[x] * kv;
                }
              }
              if (gk) gk[kidx] += acc;
            }
          }
        }
      }
    });
  }
  return result;
}

/// 2x2 max pooling with stride 2; ragged edge windows shrink. Ties go to the
/// first element in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
  detail::require_rank(input, 3, "maxpool2d");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<T> out(c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2 && 2 * y + dy < h; ++dy) {
          for (std::size_t dx = 0; dx < 2 && 2 * x + dx < w; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + y) * ow + x;
        out[o] = input[best];
        argmax[o] = best;
      }
    }
  }
  Tensor<T> result({c, oh, ow}, std::move(out));
  if (auto* tape = detail::recording({&input})) {
    result.set_requires_grad(true);
    tape->record("maxpool2d", {&input}, result,
                 [input, result, argmax = std::move(argmax)] {
      if (!result.has_grad()) return;
      const auto g = result.grad();
      auto gi = input.grad_buffer();
      for (std::size_t o = 0; o < g.size(); ++o) gi[argmax[o]] += g[o];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor<T> y(std::move(shape), x.data());
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("reshape", {&x}, y, [x, y] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

/// Flattens every part and joins them into one vector.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<T> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  const std::size_t total = out.size();
  Tensor<T> y({total}, std::move(out));
  if (auto* tape = detail::recording(parts)) {
    y.set_requires_grad(true);
    tape->record("concat", parts, y, [parts, offsets, y] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = parts[k].grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
      }
    });
  }
  return y;
}

/// Joins matrices with equal row counts side by side.
template <typename T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_columns: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_columns");
    if (p.rows() != r) {
      throw DimensionError("concat_columns: row mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.cols();
  }
  std::vector<T> out(r * total);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.values().begin() + i * c, c, out.begin() + i * total + offset);
    offset += c;
  }
  Tensor<T> y({r, total}, std::move(out));
  if (auto* tape = detail::recording(parts)) {
    y.set_requires_grad(true);
    tape->record("concat_columns", parts, y, [parts, offsets, y, r, total] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = parts[k].grad_buffer();
        const std::size_t c = parts[k].cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offsets[k] + j];
      }
    });
  }
  return y;
}

/// Stacks matrices with equal column counts on top of each other.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.cols() != c) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    }
    total += p.rows();
  }
  std::vector<T> out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Tensor<T> y({total, c}, std::move(out));
  if (auto* tape = detail::recording(parts)) {
    y.set_requires_grad(true);
    tape->record("concat_rows", parts, y, [parts, offsets, y] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = parts[k].grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offsets[k] + i];
      }
    });
  }
  return y;
}

/// Columns [begin, end) of a matrix.
template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_columns");
  if (begin >= end || end > x.cols()) {
    throw DimensionError("slice_columns: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols(), n = end - begin;
  std::vector<T> out(r * n);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.values().begin() + i * c + begin, n, out.begin() + i * n);
  Tensor<T> y({r, n}, std::move(out));
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("slice_columns", {&x}, y, [x, y, r, c, n, begin] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * c + begin + j] += g[i * n + j];
    });
  }
  return y;
}

/// Picks columns of x by index; a negative index yields a zero column.
template <typename T>
Tensor<T> gather_columns(const Tensor<T>& x, const std::vector<long>& index) {
  detail::require_rank(x, 2, "gather_columns");
  if (index.empty()) throw DimensionError("gather_columns: empty index");
  const std::size_t r = x.rows(), c = x.cols(), n = index.size();
  for (long k : index) {
    if (k >= static_cast<long>(c)) {
      throw DimensionError("gather_columns: index " + std::to_string(k) +
                           " outside " + shape_str(x.shape()));
    }
  }
  std::vector<T> out(r * n, T{0});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (index[j] >= 0) out[i * n + j] = x[i * c + static_cast<std::size_t>(index[j])];
  Tensor<T> y({r, n}, std::move(out));
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("gather_columns", {&x}, y, [x, y, index, r, c, n] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (index[j] >= 0) gx[i * c + static_cast<std::size_t>(index[j])] += g[i * n + j];
    });
  }
  return y;
}

/// Picks rows of a table by index (embedding lookup).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<long>& index) {
  detail::require_rank(table, 2, "gather_rows");
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  const std::size_t r = table.rows(), c = table.cols(), n = index.size();
  std::vector<T> out(n * c);
  for (std::size_t k = 0; k < n; ++k) {
    if (index[k] < 0 || index[k] >= static_cast<long>(r)) {
      throw DimensionError("gather_rows: index " + std::to_string(index[k]) +
                           " outside " + shape_str(table.shape()));
    }
    std::copy_n(table.values().begin() + index[k] * c, c, out.begin() + k * c);
  }
  Tensor<T> y({n, c}, std::move(out));
  if (auto* tape = detail::recording({&table})) {
    y.set_requires_grad(true);
    tape->record("gather_rows", {&table}, y, [table, y, index, c, n] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gt = table.grad_buffer();
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < c; ++j) gt[index[k] * c + j] += g[k * c + j];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and losses

/// Row-wise maximum over the columns j with col_mask[j] (all columns when the
/// mask is empty). Rows whose mask admits nothing yield 0. Ties: first index.
template <typename T>
Tensor<T> row_max(const Tensor<T>& x, const Mask& col_mask = {}) {
  detail::require_rank(x, 2, "row_max");
  const std::size_t m = x.rows(), n = x.cols();
  if (!col_mask.empty() && col_mask.size() != n) {
    throw DimensionError("row_max: column mask length " + std::to_string(col_mask.size()) +
                         " vs " + shape_str(x.shape()));
  }
  std::vector<T> out(m, T{0});
  std::vector<long> arg(m, -1);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!col_mask.empty() && !col_mask[j]) continue;
      if (arg[i] < 0 || x[i * n + j] > out[i]) {
        out[i] = x[i * n + j];
        arg[i] = static_cast<long>(j);
      }
    }
  }
  Tensor<T> y({m}, std::move(out));
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("row_max", {&x}, y, [x, y, arg = std::move(arg), n] {
      if (!y.has_grad()) return;
      const auto g = y.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (arg[i] >= 0) gx[i * n + static_cast<std::size_t>(arg[i])] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.values()) total += v;
  Tensor<T> y = Tensor<T>::scalar(total);
  if (auto* tape = detail::recording({&x})) {
    y.set_requires_grad(true);
    tape->record("sum", {&x}, y, [x, y] {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      for (auto& v : x.grad_buffer()) v += g;
    });
  }
  return y;
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> c(a.shape(), std::move(out));
  if (auto* tape = detail::recording({&a, &b})) {
    c.set_requires_grad(true);
    tape->record("mul", {&a, &b}, c, [a, b, c] {
      if (!c.has_grad()) return;
      const auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return c;
}

/// Softmax cross-entropy of logits[C] against an integer class label.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int label) {
  const std::size_t n = logits.numel();
  if (label < 0 || static_cast<std::size_t>(label) >= n) {
    throw InputError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(n) + ")");
  }
  T hi = logits[0];
  for (std::size_t i = 1; i < n; ++i) hi = std::max(hi, logits[i]);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) total += std::exp(logits[i] - hi);
  const T lse = hi + std::log(total);
  Tensor<T> y = Tensor<T>::scalar(lse - logits[static_cast<std::size_t>(label)]);
  if (auto* tape = detail::recording({&logits})) {
    y.set_requires_grad(true);
    tape->record("cross_entropy", {&logits}, y, [logits, y, label, lse, n] {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      auto gl = logits.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T p = std::exp(logits[i] - lse);
        gl[i] += g * (p - (static_cast<int>(i) == label ? T{1} : T{0}));
      }
    });
  }
  return y;
}

/// Logistic loss of one logit against a binary label.
template <typename T>
Tensor<T> sigmoid_bce(const Tensor<T>& logit, int label) {
  if (logit.numel() != 1) {
    throw DimensionError("sigmoid_bce: expects one logit, got " + shape_str(logit.shape()));
  }
  if (label != 0 && label != 1) {
    throw InputError("sigmoid_bce: label must be 0 or 1, got " + std::to_string(label));
  }
  const T z = logit[0];
  const T y_t = static_cast<T>(label);
  const T loss = std::max(z, T{0}) - y_t * z + std::log1p(std::exp(-std::abs(z)));
  Tensor<T> y = Tensor<T>::scalar(loss);
  if (auto* tape = detail::recording({&logit})) {
    y.set_requires_grad(true);
    tape->record("sigmoid_bce", {&logit}, y, [logit, y, z, y_t] {
      if (!y.has_grad()) return;
      const T sig = T{1} / (T{1} + std::exp(-z));
      logit.grad_buffer()[0] += y.grad()[0] * (sig - y_t);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Composites

/// weight[out x in] * x[in x N] + bias[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_bias(matmul(weight, x), bias);
}

}  // namespace cmr
