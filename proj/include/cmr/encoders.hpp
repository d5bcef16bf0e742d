// SPDX-License-Identifier: Apache-2.0
//
// Single-modality encoders. Raw inputs go through frozen lookup tables (text)
// or arrive as stub ROI features (visual), are projected to width d, and are
// contextualized by a trainable per-modality transformer stack.
#pragma once

#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/errors.hpp"
#include "cmr/nn.hpp"

namespace cmr {

enum class Modality { text, visual };

inline std::string_view to_string(Modality m) { return m == Modality::text ? "text" : "visual"; }

/// Source ids: the text is source 0, images are 1 and 2.
inline constexpr int kTextSource = 0;
inline constexpr int kSegmentCount = 3;

inline std::string source_name(int source_id) {
  return source_id == kTextSource ? "text" : "img" + std::to_string(source_id);
}

template <typename T>
struct EntitySet {
  Modality modality = Modality::text;
  int source_id = kTextSource;
  Tensor<T> representations;  // [d x N]
  Mask mask;                  // 1 = real entity

  std::size_t size() const { return mask.size(); }
  std::size_t active() const {
    std::size_t n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
  }
};

template <typename T>
struct TextEncoder {
  Tensor<T> embedding;  // frozen [vocab x d_raw_text]
  Tensor<T> position;   // frozen [n_text x d_raw_text]
  Tensor<T> segment;    // frozen [segments x d]
  Linear<T> projection;
  std::vector<TransformerLayer<T>> stack;
};

template <typename T>
struct VisualEncoder {
  Tensor<T> segment;   // frozen, shared with the text encoder
  Linear<T> projection;
  Tensor<T> position;  // [d x n_visual], learned
  std::vector<TransformerLayer<T>> stack;
};

template <typename T>
TextEncoder<T> make_text_encoder(ParameterStore<T>& store, const RunConfig& c, bool with_stack) {
  TextEncoder<T> enc;
  const auto d = static_cast<std::size_t>(c.d);
  const auto raw = static_cast<std::size_t>(c.d_raw_text);
  enc.embedding = store.add("frozen.text_embedding", {static_cast<std::size_t>(c.vocab_size), raw},
                            Init::normal, ParamKind::frozen);
  enc.position = store.add("frozen.text_position", {static_cast<std::size_t>(c.n_text), raw},
                           Init::normal, ParamKind::frozen, 0.5);
  enc.segment = store.contains("frozen.segment")
                    ? store.at("frozen.segment")
                    : store.add("frozen.segment", {kSegmentCount, d}, Init::normal,
                                ParamKind::frozen, 0.5);
  enc.projection = make_linear(store, "text.projection", raw, d);
  if (with_stack) {
    enc.stack = make_transformer_stack(store, "text.stack", c.text_layers, d,
                                       static_cast<std::size_t>(c.ffn_multiplier));
  }
  return enc;
}

template <typename T>
VisualEncoder<T> make_visual_encoder(ParameterStore<T>& store, const RunConfig& c,
                                     bool with_stack) {
  VisualEncoder<T> enc;
  const auto d = static_cast<std::size_t>(c.d);
  enc.segment = store.contains("frozen.segment")
                    ? store.at("frozen.segment")
                    : store.add("frozen.segment", {kSegmentCount, d}, Init::normal,
                                ParamKind::frozen, 0.5);
  enc.projection = make_linear(store, "visual.projection", static_cast<std::size_t>(c.d_raw_visual), d);
  enc.position = store.add("visual.position", {d, static_cast<std::size_t>(c.n_visual)},
                           Init::normal, ParamKind::weight, 0.1);
  if (with_stack) {
    enc.stack = make_transformer_stack(store, "visual.stack", c.visual_layers, d,
                                       static_cast<std::size_t>(c.ffn_multiplier));
  }
  return enc;
}

namespace detail {

template <typename T>
Tensor<T> segment_row(const Tensor<T>& segment, int source_id) {
  const std::size_t d = segment.cols();
  const auto v = segment.values();
  return Tensor<T>({d}, std::vector<T>(v.begin() + source_id * d, v.begin() + (source_id + 1) * d));
}

}  // namespace detail

/// Tokens past n_text are dropped. Padded slots carry only their position
/// embedding and are masked out of attention.
template <typename T>
EntitySet<T> encode_text(const std::vector<int>& tokens, const TextEncoder<T>& enc) {
  const std::size_t n = enc.position.rows();
  const std::size_t raw = enc.position.cols();
  const std::size_t vocab = enc.embedding.rows();
  const std::size_t len = std::min(tokens.size(), n);
  // Frozen tables: the raw matrix is a constant, built directly as [raw x n].
  std::vector<T> x(raw * n);
  const auto emb = enc.embedding.values();
  const auto pos = enc.position.values();
  Mask mask(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    long tok = -1;
    if (i < len) {
      tok = tokens[i];
      if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
        throw InputError("token id " + std::to_string(tok) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
      mask[i] = 1;
    }
    for (std::size_t k = 0; k < raw; ++k) {
      T v = pos[i * raw + k];
      if (tok >= 0) v += emb[static_cast<std::size_t>(tok) * raw + k];
      x[k * n + i] = v;
    }
  }
  Tensor<T> h = enc.projection(Tensor<T>({raw, n}, std::move(x)));
  h = add_bias(h, detail::segment_row(enc.segment, kTextSource));
  h = transformer_stack(h, mask, enc.stack);
  return {Modality::text, kTextSource, h, mask};
}

/// roi_features is [n_visual x d_raw_visual], one ROI per row.
template <typename T>
EntitySet<T> encode_visual(const Tensor<T>& roi_features, int source_id,
                           const VisualEncoder<T>& enc) {
  const std::size_t n = enc.position.cols();
  const std::size_t raw = enc.projection.weight.cols();
  if (roi_features.rank() != 2 || roi_features.rows() != n || roi_features.cols() != raw) {
    throw DimensionError("encode_visual: expected ROI features [" + std::to_string(n) + "x" +
                         std::to_string(raw) + "], got " + shape_str(roi_features.shape()));
  }
  if (source_id <= kTextSource || source_id >= kSegmentCount) {
    throw InputError("encode_visual: image source id must be 1 or 2, got " +
                     std::to_string(source_id));
  }
  Tensor<T> h = enc.projection(transpose(roi_features));
  h = add_bias(h, detail::segment_row(enc.segment, source_id));
  h = add(h, enc.position);
  const Mask mask(n, 1);
  h = transformer_stack(h, mask, enc.stack);
  return {Modality::visual, source_id, h, mask};
}

}  // namespace cmr
