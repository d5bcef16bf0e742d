// SPDX-License-Identifier: Apache-2.0
//
// Joint self-attention over the entities of every source at once.
#pragma once

#include <vector>

#include "cmr/encoders.hpp"

namespace cmr {

/// All entities side by side: text columns first, then each image in
/// source order.
template <typename T>
struct JointEntityMatrix {
  Tensor<T> S;                     // [d x total]
  std::vector<Modality> modality;  // per column
  std::vector<int> source;         // per column
  Mask mask;
  std::vector<std::size_t> offsets;  // first column of each input set
  std::vector<std::size_t> counts;
};

template <typename T>
JointEntityMatrix<T> join(const std::vector<EntitySet<T>>& sets) {
  if (sets.empty()) throw DimensionError("join: no entity sets");
  JointEntityMatrix<T> joint;
  std::vector<Tensor<T>> parts;
  const std::size_t d = sets.front().representations.rows();
  for (const auto& s : sets) {
    if (s.representations.rows() != d) {
      throw DimensionError("join: entity width " + std::to_string(s.representations.rows()) +
                           " vs " + std::to_string(d));
    }
    joint.offsets.push_back(joint.mask.size());
    joint.counts.push_back(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      joint.modality.push_back(s.modality);
      joint.source.push_back(s.source_id);
      joint.mask.push_back(s.mask[i]);
    }
    parts.push_back(s.representations);
  }
  joint.S = parts.size() == 1 ? parts.front() : concat_columns(parts);
  return joint;
}

template <typename T>
JointEntityMatrix<T> cross_attention_layer(const JointEntityMatrix<T>& in,
                                           const TransformerLayer<T>& layer,
                                           AttentionProbe<T>* probe = nullptr) {
  JointEntityMatrix<T> out = in;
  out.S = transformer_layer(in.S, in.mask, layer, probe);
  return out;
}

/// Runs the cross stack over the joined sets and splits the result back
/// into one set per source, preserving sizes and masks.
template <typename T>
std::vector<EntitySet<T>> align(const std::vector<EntitySet<T>>& sets,
                                const std::vector<TransformerLayer<T>>& stack,
                                std::vector<AttentionProbe<T>>* probes = nullptr) {
  if (sets.size() < 2) throw DimensionError("align: needs at least two entity sets");
  auto joint = join(sets);
  if (stack.empty()) return sets;
  for (const auto& layer : stack) {
    AttentionProbe<T> probe;
    joint = cross_attention_layer(joint, layer, probes ? &probe : nullptr);
    if (probes) probes->push_back(probe);
  }
  std::vector<EntitySet<T>> out;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    EntitySet<T> s = sets[k];
    s.representations =
        slice_columns(joint.S, joint.offsets[k], joint.offsets[k] + joint.counts[k]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cmr
