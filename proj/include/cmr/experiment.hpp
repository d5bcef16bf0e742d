// SPDX-License-Identifier: Apache-2.0
//
// Glue shared by the command-line tool and the acceptance runs: data that
// fits a run configuration, and one training run of a model variant.
#pragma once

#include <optional>
#include <string>

#include "cmr/checkpoint.hpp"
#include "cmr/config.hpp"
#include "cmr/model.hpp"
#include "cmr/synth_data.hpp"
#include "cmr/trainer.hpp"

namespace cmr {

/// Generator settings whose extents agree with `config`.
inline GeneratorSpec generator_spec_for(const RunConfig& config, TaskKind task,
                                        std::uint64_t data_seed) {
  GeneratorSpec spec;
  spec.seed = data_seed;
  spec.task = task;
  spec.n_text = config.n_text;
  spec.n_visual = config.n_visual;
  spec.d_raw_visual = config.d_raw_visual;
  spec.vocab_size = config.vocab_size;
  if (task == TaskKind::vqa_like) {
    spec.n_choices = config.n_classes;
    spec.n_concepts = std::max(spec.n_concepts, config.n_classes);
  }
  return spec;
}

struct RunOutcome {
  TrainResult result;
  double final_train_accuracy = 0;
  double final_heldout_accuracy = 0;
  LoadReport init;  // empty unless started from a checkpoint
};

/// Trains a fresh model (optionally initialized from `init` as a transfer)
/// and returns the metrics trace. `model_out`, when given, receives the model.
template <typename T = float>
RunOutcome train_run(const RunConfig& config, TaskKind task, Variant variant,
                     const Dataset& train, const Dataset& heldout,
                     const Checkpoint* init = nullptr,
                     std::optional<CmrModel<T>>* model_out = nullptr,
                     const EpochCallback& on_epoch = {}) {
  CmrModel<T> model(config, task, variant);
  RunOutcome out;
  if (init) out.init = load_into(model, *init, true);
  Trainer<T> trainer(model, config);
  out.result = trainer.fit(train, heldout, on_epoch);
  if (!out.result.trace.empty()) {
    out.final_train_accuracy = out.result.trace.back().train_acc;
    out.final_heldout_accuracy = out.result.trace.back().heldout_acc;
  }
  if (model_out) model_out->emplace(std::move(model));
  return out;
}

}  // namespace cmr
