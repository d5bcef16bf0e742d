// SPDX-License-Identifier: Apache-2.0
//
// Affinity between two aligned entity sets and the CNN feature read off it.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/encoders.hpp"

namespace cmr {

struct SourcePair {
  int mu = 0;
  int nu = 1;

  std::string label() const { return source_name(mu) + "-" + source_name(nu); }
  bool operator==(const SourcePair&) const = default;
};

/// Entity pairs in Phi order: the text against each image, then image
/// against image.
inline std::vector<SourcePair> enumerate_entity_pairs(TaskKind task) {
  switch (task) {
    case TaskKind::vqa_like: return {{0, 1}};
    case TaskKind::nlvr_like: return {{0, 1}, {0, 2}, {1, 2}};
  }
  throw ConfigError("unknown task");
}

template <typename T>
struct AffinityMatrix {
  SourcePair pair;
  Tensor<T> A;  // [N_mu x N_nu]
  Mask row_mask;
  Mask col_mask;
  std::size_t width = 1;  // entity representation width d
};

enum class FeatureKind { entity, relational };

inline std::string_view to_string(FeatureKind k) {
  return k == FeatureKind::entity ? "entity" : "relational";
}

template <typename T>
struct RelevanceFeature {
  SourcePair pair;
  FeatureKind kind = FeatureKind::entity;
  Tensor<T> phi;  // [d]

  std::string label() const { return std::string(to_string(kind)) + ":" + pair.label(); }
};

/// A[i][j] = <s'_mu_i, s'_nu_j>.
template <typename T>
AffinityMatrix<T> affinity(const EntitySet<T>& a, const EntitySet<T>& b) {
  if (a.representations.rows() != b.representations.rows()) {
    throw DimensionError("affinity: entity widths " + shape_str(a.representations.shape()) +
                         " and " + shape_str(b.representations.shape()) + " differ");
  }
  return {{a.source_id, b.source_id},
          matmul(transpose(a.representations), b.representations),
          a.mask,
          b.mask,
          a.representations.rows()};
}

/// Masked rows and columns are zeroed and the grid is divided by sqrt(d)
/// before the CNN sees it. Layer-normed entities put raw dot products at O(d).
template <typename T>
RelevanceFeature<T> entity_relevance_feature(const AffinityMatrix<T>& A,
                                             const RelevanceCnn<T>& cnn) {
  const T s = T{1} / std::sqrt(static_cast<T>(A.width));
  return {A.pair, FeatureKind::entity, cnn(scale(mask_zero(A.A, A.row_mask, A.col_mask), s))};
}

inline std::string entity_cnn_prefix(const SourcePair& p) { return "entity." + p.label(); }

}  // namespace cmr
