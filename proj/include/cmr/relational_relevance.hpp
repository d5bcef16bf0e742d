// SPDX-License-Identifier: Apache-2.0
//
// Relational relevance. Every unordered pair of unmasked entities within one
// source becomes a relation candidate with representation r. Candidates are
// scored within the source (u, a softmax over candidates) and weighted by how
// strongly both endpoints are grounded in the counterpart source (V). The
// top-K by w = u * V feed a K x K relational affinity grid.
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cmr/entity_relevance.hpp"

namespace cmr {

struct RelationCandidate {
  std::size_t i = 0, j = 0;  // i < j
  std::vector<double> r;     // copy of the representation, for inspection
  double u = 0;
  double v_importance = 0;
  double w = 0;
  std::optional<int> rank;
};

/// Candidates of one source with their batched, differentiable tensors.
template <typename T>
struct CandidateSet {
  int source_id = 0;
  std::vector<RelationCandidate> items;
  Tensor<T> r;       // [d x P]; undefined when P == 0
  Tensor<T> scores;  // [P x 1], u as a tensor
  std::size_t d = 0;

  std::size_t size() const { return items.size(); }
};

template <typename T>
struct Importance {
  Tensor<T> v;  // [N]
  Tensor<T> V;  // [N x N] = v (x) v
};

template <typename T>
struct TopKRelationSet {
  int source_id = 0;
  std::size_t K = 0;
  std::size_t effective_k = 0;       // min(K, candidates)
  std::vector<RelationCandidate> relations;  // descending w
  std::vector<long> selected;        // candidate index per column, -1 = zero padding
  Tensor<T> R;                       // [d x K]
  Tensor<T> gate;                    // [K] = P * u of the selected candidates
};

/// Relation MLPs are per modality; both images share the visual pair.
template <typename T>
struct RelationMlps {
  Mlp<T> represent;  // 2d -> hidden -> d
  Mlp<T> score;      // d -> hidden -> 1
};

template <typename T>
RelationMlps<T> make_relation_mlps(ParameterStore<T>& store, Modality m, std::size_t d,
                                   std::size_t hidden) {
  const std::string prefix = "relation." + std::string(to_string(m));
  return {make_mlp(store, prefix + ".mlp1", {2 * d, hidden, d}),
          make_mlp(store, prefix + ".mlp2", {d, hidden, 1})};
}

/// r = MLP1([s'_i; s'_j]) for every unmasked pair i < j, in lexicographic order.
/// With `symmetric`, r is the mean of MLP1 over both concatenation orders.
template <typename T>
CandidateSet<T> relation_representations(const EntitySet<T>& s, const Mlp<T>& mlp1,
                                         bool symmetric = false) {
  CandidateSet<T> set;
  set.source_id = s.source_id;
  set.d = s.representations.rows();
  std::vector<long> left, right;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!s.mask[i]) continue;
    for (std::size_t j = i + 1; j < s.size(); ++j) {
      if (!s.mask[j]) continue;
      left.push_back(static_cast<long>(i));
      right.push_back(static_cast<long>(j));
      set.items.push_back({i, j, {}, 0, 0, 0, std::nullopt});
    }
  }
  if (set.items.empty()) return set;
  const auto lhs = gather_columns(s.representations, left);
  const auto rhs = gather_columns(s.representations, right);
  set.r = mlp1(concat_rows<T>({lhs, rhs}));
  if (symmetric) set.r = scale(add(set.r, mlp1(concat_rows<T>({rhs, lhs}))), T{0.5});
  const std::size_t P = set.items.size();
  const auto rv = set.r.values();
  for (std::size_t p = 0; p < P; ++p) {
    auto& r = set.items[p].r;
    r.resize(set.d);
    for (std::size_t k = 0; k < set.d; ++k) r[k] = static_cast<double>(rv[k * P + p]);
  }
  return set;
}

/// u = softmax over all candidates of MLP2(r).
template <typename T>
void intra_modality_scores(CandidateSet<T>& set, const Mlp<T>& mlp2) {
  if (set.items.empty()) return;
  set.scores = softmax_columns(transpose(mlp2(set.r)));
  for (std::size_t p = 0; p < set.items.size(); ++p)
    set.items[p].u = static_cast<double>(set.scores[p]);
}

/// v_i = max over unmasked counterpart entities of A[i][.], for the mu side;
/// the nu side reads A transposed.
template <typename T>
Importance<T> inter_modality_importance(const AffinityMatrix<T>& A, bool mu_side) {
  Importance<T> imp;
  imp.v = mu_side ? row_max(A.A, A.col_mask) : row_max(transpose(A.A), A.row_mask);
  imp.V = outer_product(imp.v, imp.v);
  return imp;
}

/// w = u * V[i][j] with i < j only; descending w, ties by (i, j). Fewer
/// candidates than K leaves zero columns at the end of R.
template <typename T>
TopKRelationSet<T> rank_and_select(const CandidateSet<T>& set, const Importance<T>& imp,
                                   std::size_t K) {
  if (K == 0) throw ConfigError("rank_and_select: K must be positive");
  TopKRelationSet<T> top;
  top.source_id = set.source_id;
  top.K = K;
  const std::size_t n = imp.v.numel();
  std::vector<RelationCandidate> items = set.items;
  for (auto& c : items) {
    if (c.i >= c.j || c.j >= n) throw ContractError("rank_and_select: bad candidate index");
    c.v_importance = static_cast<double>(imp.V[c.i * n + c.j]);
    c.w = c.u * c.v_importance;
  }
  std::vector<std::size_t> order(items.size());
  for (std::size_t p = 0; p < order.size(); ++p) order[p] = p;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].w != items[b].w) return items[a].w > items[b].w;
    if (items[a].i != items[b].i) return items[a].i < items[b].i;
    return items[a].j < items[b].j;
  });
  top.effective_k = std::min(K, items.size());
  for (std::size_t k = 0; k < top.effective_k; ++k) {
    auto c = items[order[k]];
    c.rank = static_cast<int>(k);
    top.relations.push_back(std::move(c));
    top.selected.push_back(static_cast<long>(order[k]));
  }
  top.selected.resize(K, -1);
  if (items.empty()) {
    top.R = Tensor<T>({set.d, K});
    top.gate = Tensor<T>({K});
    return top;
  }
  top.R = gather_columns(set.r, top.selected);
  const T P = static_cast<T>(items.size());
  top.gate = scale(reshape(gather_columns(transpose(set.scores), top.selected), {K}), P);
  return top;
}

/// Candidates of `set` annotated with V, w and rank (for dumps).
template <typename T>
std::vector<RelationCandidate> ranked_candidates(const CandidateSet<T>& set,
                                                 const TopKRelationSet<T>& top,
                                                 const Importance<T>& imp) {
  const std::size_t n = imp.v.numel();
  std::vector<RelationCandidate> out = set.items;
  for (std::size_t p = 0; p < out.size(); ++p) {
    out[p].v_importance = static_cast<double>(imp.V[out[p].i * n + out[p].j]);
    out[p].w = out[p].u * out[p].v_importance;
    for (std::size_t k = 0; k < top.effective_k; ++k)
      if (top.selected[k] == static_cast<long>(p)) out[p].rank = static_cast<int>(k);
  }
  return out;
}

/// Relational affinity of the two selections. Each selected column is scaled
/// by its gate, so the grid equals (R_mu)^T R_nu when scores are uniform and
/// the softmax scores of every candidate stay on the gradient path.
template <typename T>
Tensor<T> relational_affinity(const TopKRelationSet<T>& a, const TopKRelationSet<T>& b) {
  return matmul(transpose(scale_columns(a.R, a.gate)), scale_columns(b.R, b.gate));
}

template <typename T>
RelevanceFeature<T> relational_relevance_feature(const TopKRelationSet<T>& a,
                                                 const TopKRelationSet<T>& b,
                                                 const RelevanceCnn<T>& cnn) {
  return {{a.source_id, b.source_id}, FeatureKind::relational, cnn(relational_affinity(a, b))};
}

inline std::vector<SourcePair> enumerate_relational_pairs(TaskKind task) {
  return enumerate_entity_pairs(task);
}

inline std::string relational_cnn_prefix(const SourcePair& p) { return "relational." + p.label(); }

}  // namespace cmr
