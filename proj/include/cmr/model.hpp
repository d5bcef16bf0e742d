// SPDX-License-Identifier: Apache-2.0
//
// The end-to-end relevance model: encoders, alignment, entity and relational
// relevance per source pair, the concatenated feature Phi and the task head.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/cross_modality.hpp"
#include "cmr/entity_relevance.hpp"
#include "cmr/relational_relevance.hpp"
#include "cmr/synth_data.hpp"

namespace cmr {

/// Intermediate values of one forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<EntitySet<T>> encoded;
  std::vector<EntitySet<T>> aligned;
  std::vector<AttentionProbe<T>> cross_attention;
  std::vector<AffinityMatrix<T>> affinities;  // one per entity pair
  std::map<int, CandidateSet<T>> candidates;  // by source id
  struct Ranking {
    SourcePair pair;
    Importance<T> importance_mu, importance_nu;
    TopKRelationSet<T> top_mu, top_nu;
    Tensor<T> grid;
  };
  std::vector<Ranking> rankings;  // one per relational pair
  std::vector<RelevanceFeature<T>> blocks;
  Tensor<T> phi;
  Tensor<T> logits;
};

template <typename T>
class CmrModel {
 public:
  CmrModel(RunConfig config, TaskKind task, Variant variant = Variant::full)
      : config_(std::move(config)), task_(task), variant_(variant), store_(config_.seed) {
    validate(config_);
    const auto& c = config_;
    const auto d = static_cast<std::size_t>(c.d);
    const bool stacks = variant_ != Variant::no_smod;
    text_ = make_text_encoder(store_, c, stacks);
    visual_ = make_visual_encoder(store_, c, stacks);
    if (variant_ != Variant::no_xmod) {
      cross_ = make_transformer_stack(store_, "cross.stack", c.cross_layers, d,
                                      static_cast<std::size_t>(c.ffn_multiplier));
    }
    auto extent = [&](int source) {
      return static_cast<std::size_t>(source == kTextSource ? c.n_text : c.n_visual);
    };
    auto cnn = [&](const std::string& prefix, std::size_t h, std::size_t w) {
      return make_relevance_cnn(store_, prefix, h, w, static_cast<std::size_t>(c.cnn_channels1),
                                static_cast<std::size_t>(c.cnn_channels2),
                                static_cast<std::size_t>(c.cnn_kernel),
                                static_cast<std::size_t>(c.cnn_hidden), d);
    };
    if (uses_entity()) {
      for (const auto& p : enumerate_entity_pairs(task_))
        entity_cnns_.push_back(cnn(entity_cnn_prefix(p), extent(p.mu), extent(p.nu)));
    }
    if (uses_relational()) {
      const auto hidden = static_cast<std::size_t>(c.relation_hidden);
      text_relations_ = make_relation_mlps(store_, Modality::text, d, hidden);
      visual_relations_ = make_relation_mlps(store_, Modality::visual, d, hidden);
      const auto k = static_cast<std::size_t>(c.top_k);
      for (const auto& p : enumerate_relational_pairs(task_))
        relational_cnns_.push_back(cnn(relational_cnn_prefix(p), k, k));
    }
    const auto h = static_cast<std::size_t>(c.head_hidden);
    head_ = make_mlp(store_, "head", {block_count() * d, h, h, h, output_width()});
  }

  const RunConfig& config() const noexcept { return config_; }
  TaskKind task() const noexcept { return task_; }
  Variant variant() const noexcept { return variant_; }
  ParameterStore<T>& params() noexcept { return store_; }
  const ParameterStore<T>& params() const noexcept { return store_; }

  bool uses_entity() const { return variant_ != Variant::no_entity; }
  bool uses_relational() const { return variant_ != Variant::no_rel; }

  std::size_t output_width() const {
    return task_ == TaskKind::vqa_like ? static_cast<std::size_t>(config_.n_classes) : 1;
  }

  /// Phi block labels in order: entity blocks, then relational blocks.
  std::vector<std::string> block_labels() const {
    std::vector<std::string> labels;
    if (uses_entity())
      for (const auto& p : enumerate_entity_pairs(task_)) labels.push_back("entity:" + p.label());
    if (uses_relational())
      for (const auto& p : enumerate_relational_pairs(task_))
        labels.push_back("relational:" + p.label());
    return labels;
  }
  std::size_t block_count() const { return block_labels().size(); }
  std::size_t phi_length() const { return block_count() * static_cast<std::size_t>(config_.d); }

  /// Names of the task head parameters, the only ones a transfer reinitializes.
  std::vector<std::string> head_parameter_names() const {
    std::vector<std::string> out;
    for (const auto& name : store_.names())
      if (name.rfind("head.", 0) == 0) out.push_back(name);
    return out;
  }

  /// Checks that an example fits this model's task and sizes.
  void check_example(const SyntheticExample& ex) const {
    if (ex.task != task_) {
      throw ConfigError("example '" + ex.id + "' is " + std::string(to_string(ex.task)) +
                        " but the model is configured for " + std::string(to_string(task_)));
    }
    const auto want = static_cast<std::size_t>(config_.n_visual * config_.d_raw_visual);
    if (ex.visual.size() != static_cast<std::size_t>(image_count(task_))) {
      throw DimensionError("example '" + ex.id + "' carries " + std::to_string(ex.visual.size()) +
                           " images");
    }
    for (const auto& image : ex.visual) {
      if (image.size() != want) {
        throw DimensionError("example '" + ex.id + "' has " + std::to_string(image.size()) +
                             " visual values per image, expected " + std::to_string(want) +
                             " (n_visual x d_raw_visual)");
      }
    }
    if (task_ == TaskKind::vqa_like &&
        (ex.label < 0 || ex.label >= config_.n_classes)) {
      throw InputError("example '" + ex.id + "' label " + std::to_string(ex.label) +
                       " outside [0, " + std::to_string(config_.n_classes) + ")");
    }
  }

  Tensor<T> forward(const SyntheticExample& ex, ForwardTrace<T>* trace = nullptr) const {
    check_example(ex);
    const auto& c = config_;
    std::vector<EntitySet<T>> sets;
    sets.push_back(encode_text(ex.tokens, text_));
    for (std::size_t img = 0; img < ex.visual.size(); ++img) {
      std::vector<T> feats(ex.visual[img].begin(), ex.visual[img].end());
      Tensor<T> roi({static_cast<std::size_t>(c.n_visual), static_cast<std::size_t>(c.d_raw_visual)},
                    std::move(feats));
      sets.push_back(encode_visual(roi, static_cast<int>(img) + 1, visual_));
    }
    std::vector<AttentionProbe<T>> probes;
    auto aligned = cross_.empty() ? sets : align(sets, cross_, trace ? &probes : nullptr);

    const auto pairs = enumerate_entity_pairs(task_);
    std::vector<AffinityMatrix<T>> affinities;
    for (const auto& p : pairs) affinities.push_back(affinity(aligned[p.mu], aligned[p.nu]));

    std::vector<RelevanceFeature<T>> blocks;
    if (uses_entity()) {
      for (std::size_t k = 0; k < pairs.size(); ++k)
        blocks.push_back(entity_relevance_feature(affinities[k], entity_cnns_[k]));
    }
    std::map<int, CandidateSet<T>> candidates;
    std::vector<typename ForwardTrace<T>::Ranking> rankings;
    if (uses_relational()) {
      for (const auto& s : aligned) {
        const auto& mlps = s.modality == Modality::text ? text_relations_ : visual_relations_;
        auto set = relation_representations(s, mlps.represent, c.symmetric_relations);
        intra_modality_scores(set, mlps.score);
        candidates.emplace(s.source_id, std::move(set));
      }
      const auto k = static_cast<std::size_t>(c.top_k);
      const auto rel_pairs = enumerate_relational_pairs(task_);
      for (std::size_t q = 0; q < rel_pairs.size(); ++q) {
        const auto& p = rel_pairs[q];
        const auto& A = affinities[q];
        typename ForwardTrace<T>::Ranking rk;
        rk.pair = p;
        rk.importance_mu = inter_modality_importance(A, true);
        rk.importance_nu = inter_modality_importance(A, false);
        rk.top_mu = rank_and_select(candidates.at(p.mu), rk.importance_mu, k);
        rk.top_nu = rank_and_select(candidates.at(p.nu), rk.importance_nu, k);
        rk.grid = relational_affinity(rk.top_mu, rk.top_nu);
        blocks.push_back({p, FeatureKind::relational, relational_cnns_[q](rk.grid)});
        rankings.push_back(std::move(rk));
      }
    }
    std::vector<Tensor<T>> parts;
    for (const auto& b : blocks) parts.push_back(b.phi);
    const Tensor<T> phi = concat(parts);
    Tensor<T> logits = head_(reshape(phi, {phi.numel(), 1}));
    logits = reshape(logits, {logits.numel()});
    if (trace) {
      trace->encoded = sets;
      trace->aligned = aligned;
      trace->cross_attention = std::move(probes);
      trace->affinities = std::move(affinities);
      trace->candidates = std::move(candidates);
      trace->rankings = std::move(rankings);
      trace->blocks = std::move(blocks);
      trace->phi = phi;
      trace->logits = logits;
    }
    return logits;
  }

  Tensor<T> loss(const Tensor<T>& logits, int label) const {
    return task_ == TaskKind::vqa_like ? cross_entropy(logits, label) : sigmoid_bce(logits, label);
  }

  int predict(const Tensor<T>& logits) const {
    if (task_ == TaskKind::nlvr_like) return logits[0] > T{0} ? 1 : 0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.numel(); ++i)
      if (logits[i] > logits[best]) best = i;
    return static_cast<int>(best);
  }

 private:
  RunConfig config_;
  TaskKind task_;
  Variant variant_;
  ParameterStore<T> store_;
  TextEncoder<T> text_;
  VisualEncoder<T> visual_;
  std::vector<TransformerLayer<T>> cross_;
  std::vector<RelevanceCnn<T>> entity_cnns_;
  RelationMlps<T> text_relations_, visual_relations_;
  std::vector<RelevanceCnn<T>> relational_cnns_;
  Mlp<T> head_;
};

}  // namespace cmr
