// SPDX-License-Identifier: Apache-2.0
//
// Parameter groups shared by the encoders, the alignment stack and the
// relevance heads.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cmr/ops.hpp"
#include "cmr/params.hpp"

namespace cmr {

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out]; undefined for a bias-free map

  Tensor<T> operator()(const Tensor<T>& x) const {
    return bias.defined() ? linear(x, weight, bias) : matmul(weight, x);
  }
};

/// Biases start as small seeded noise rather than zero, so ReLU inputs do not
/// sit exactly on the kink when a layer sees an all-zero input.
inline constexpr double kBiasInitScale = 0.01;

template <typename T>
Linear<T> make_linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in,
                      std::size_t out, bool with_bias = true, Init init = Init::xavier) {
  Linear<T> l;
  l.weight = store.add(prefix + ".weight", {out, in}, init, ParamKind::weight);
  if (with_bias) {
    l.bias = store.add(prefix + ".bias", {out}, Init::normal, ParamKind::bias, kBiasInitScale);
  }
  return l;
}

/// Fully connected layers with ReLU between them (none after the last).
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Tensor<T> operator()(Tensor<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

template <typename T>
Mlp<T> make_mlp(ParameterStore<T>& store, const std::string& prefix,
                const std::vector<std::size_t>& widths) {
  Mlp<T> m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    m.layers.push_back(
        make_linear(store, prefix + ".l" + std::to_string(i), widths[i], widths[i + 1], true,
                    i == 0 ? Init::xavier : Init::he));
  }
  return m;
}

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

template <typename T>
LayerNorm<T> make_layer_norm(ParameterStore<T>& store, const std::string& prefix,
                             std::size_t d) {
  return {store.add(prefix + ".gain", {d}, Init::ones, ParamKind::norm),
          store.add(prefix + ".bias", {d}, Init::zeros, ParamKind::norm)};
}

/// One post-norm transformer layer with single-head self-attention:
/// attention, residual + norm, feed-forward, residual + norm.
template <typename T>
struct TransformerLayer {
  Linear<T> query, key, value, output;
  LayerNorm<T> norm1, norm2;
  Linear<T> ff1, ff2;
};

template <typename T>
TransformerLayer<T> make_transformer_layer(ParameterStore<T>& store, const std::string& prefix,
                                           std::size_t d, std::size_t ffn_multiplier) {
  TransformerLayer<T> l;
  l.query = make_linear(store, prefix + ".attn.query", d, d);
  // A key bias shifts every logit of a query by the same amount, which the
  // softmax cancels, so keys are bias-free.
  l.key = make_linear(store, prefix + ".attn.key", d, d, false);
  l.value = make_linear(store, prefix + ".attn.value", d, d);
  l.output = make_linear(store, prefix + ".attn.output", d, d);
  l.norm1 = make_layer_norm(store, prefix + ".norm1", d);
  l.ff1 = make_linear(store, prefix + ".ff1", d, ffn_multiplier * d);
  l.ff2 = make_linear(store, prefix + ".ff2", ffn_multiplier * d, d);
  l.norm2 = make_layer_norm(store, prefix + ".norm2", d);
  return l;
}

template <typename T>
std::vector<TransformerLayer<T>> make_transformer_stack(ParameterStore<T>& store,
                                                        const std::string& prefix,
                                                        int n_layers, std::size_t d,
                                                        std::size_t ffn_multiplier) {
  std::vector<TransformerLayer<T>> stack;
  for (int i = 0; i < n_layers; ++i) {
    stack.push_back(
        make_transformer_layer(store, prefix + ".layer" + std::to_string(i), d, ffn_multiplier));
  }
  return stack;
}

/// Attention internals captured for inspection.
template <typename T>
struct AttentionProbe {
  Tensor<T> weights;  // [N x N]; column j is query j's distribution over keys
  Tensor<T> context;  // [d x N]; values mixed by the weights
};

/// Logit assigned to masked keys before the softmax.
inline constexpr double kMaskedLogit = -1e9;

/// x is [d x N], one entity per column. Attention logits are K^T Q / sqrt(d)
/// with keys along rows and queries along columns, normalized per column.
/// Masked entities are never attended to and their own outputs skip the
/// attention update.
template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& x, const Mask& mask,
                            const TransformerLayer<T>& layer,
                            AttentionProbe<T>* probe = nullptr) {
  const std::size_t d = x.rows(), n = x.cols();
  if (mask.size() != n) {
    throw DimensionError("transformer_layer: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(n) + " entities");
  }
  const Tensor<T> q = layer.query(x);
  const Tensor<T> k = layer.key(x);
  const Tensor<T> v = layer.value(x);
  Tensor<T> logits = scale(matmul(transpose(k), q), T(1) / std::sqrt(static_cast<T>(d)));
  logits = masked_fill_rows(logits, mask, static_cast<T>(kMaskedLogit));
  const Tensor<T> weights = softmax_columns(logits);
  const Tensor<T> context = matmul(v, weights);
  if (probe) {
    probe->weights = weights;
    probe->context = context;
  }
  const Mask all_rows(d, 1);
  const Tensor<T> attended = mask_zero(layer.output(context), all_rows, mask);
  const Tensor<T> h = layer.norm1(add(x, attended));
  const Tensor<T> ff = layer.ff2(relu(layer.ff1(h)));
  return layer.norm2(add(h, ff));
}

template <typename T>
Tensor<T> transformer_stack(Tensor<T> x, const Mask& mask,
                            const std::vector<TransformerLayer<T>>& stack) {
  for (const auto& layer : stack) x = transformer_layer(x, mask, layer);
  return x;
}

/// Relevance CNN over a 2-D score grid: conv -> relu -> pool -> conv -> relu
/// -> pool -> flatten -> hidden FC -> relu -> FC to the output width.
/// Kernel extents clamp to the grid they slide over, so small grids
/// (e.g. a K x K relational grid) stay valid.
template <typename T>
struct RelevanceCnn {
  std::size_t height = 0, width = 0;
  Tensor<T> conv1_kernel, conv1_bias;
  Tensor<T> conv2_kernel, conv2_bias;
  Linear<T> hidden, output;

  Tensor<T> operator()(const Tensor<T>& grid) const {
    if (grid.rank() != 2 || grid.rows() != height || grid.cols() != width) {
      throw DimensionError("relevance CNN expects a " + std::to_string(height) + "x" +
                           std::to_string(width) + " grid, got " + shape_str(grid.shape()));
    }
    Tensor<T> x = reshape(grid, {1, height, width});
    x = maxpool2d(relu(conv2d(x, conv1_kernel, conv1_bias)));
    x = maxpool2d(relu(conv2d(x, conv2_kernel, conv2_bias)));
    x = reshape(x, {x.numel(), 1});
    x = output(relu(hidden(x)));
    return reshape(x, {x.numel()});
  }
};

template <typename T>
RelevanceCnn<T> make_relevance_cnn(ParameterStore<T>& store, const std::string& prefix,
                                   std::size_t height, std::size_t width,
                                   std::size_t channels1, std::size_t channels2,
                                   std::size_t kernel, std::size_t hidden, std::size_t out) {
  RelevanceCnn<T> cnn;
  cnn.height = height;
  cnn.width = width;
  std::size_t h = height, w = width;
  auto conv_shape = [&](std::size_t cin, std::size_t cout) {
    const std::size_t kh = std::min(kernel, h), kw = std::min(kernel, w);
    h = (h - kh + 1 + 1) / 2;
    w = (w - kw + 1 + 1) / 2;
    return Shape{cout, cin, kh, kw};
  };
  cnn.conv1_kernel =
      store.add(prefix + ".conv1.kernel", conv_shape(1, channels1), Init::he, ParamKind::weight);
  cnn.conv1_bias = store.add(prefix + ".conv1.bias", {channels1}, Init::normal,
                               ParamKind::bias, kBiasInitScale);
  cnn.conv2_kernel = store.add(prefix + ".conv2.kernel", conv_shape(channels1, channels2),
                               Init::he, ParamKind::weight);
  cnn.conv2_bias = store.add(prefix + ".conv2.bias", {channels2}, Init::normal,
                               ParamKind::bias, kBiasInitScale);
  cnn.hidden = make_linear(store, prefix + ".fc1", channels2 * h * w, hidden, true, Init::he);
  cnn.output = make_linear(store, prefix + ".fc2", hidden, out, true, Init::he);
  return cnn;
}

}  // namespace cmr
