// SPDX-License-Identifier: Apache-2.0
//
// Minibatch training, evaluation and the epochs-to-threshold measure.
#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmr/checkpoint.hpp"
#include "cmr/model.hpp"
#include "cmr/optimizer.hpp"
#include "cmr/rng.hpp"
#include "json.hpp"

namespace cmr {

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;  // accumulated during the epoch, before each step
  double heldout_acc = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> trace;
  std::optional<int> epochs_to_threshold;
};

/// First epoch e such that heldout accuracy >= threshold at epochs
/// e, e+1, ..., e+sustain-1.
inline std::optional<int> epochs_to_threshold(const std::vector<EpochMetrics>& trace,
                                              double threshold, int sustain) {
  int run = 0;
  for (const auto& m : trace) {
    run = m.heldout_acc >= threshold ? run + 1 : 0;
    if (run >= sustain) return m.epoch - sustain + 1;
  }
  return std::nullopt;
}

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"train_loss", m.train_loss},
          {"train_acc", m.train_acc},
          {"heldout_acc", m.heldout_acc}};
}

inline void write_metrics_jsonl(const std::string& path, const std::vector<EpochMetrics>& trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write metrics file " + path);
  for (const auto& m : trace) out << to_json(m).dump() << '\n';
}

inline std::vector<EpochMetrics> read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open metrics file " + path);
  std::vector<EpochMetrics> trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    trace.push_back({j.at("epoch").get<int>(), j.at("train_loss").get<double>(),
                     j.at("train_acc").get<double>(), j.at("heldout_acc").get<double>()});
  }
  return trace;
}

/// Dataset shape must agree with the model configuration.
template <typename T>
void check_dataset(const CmrModel<T>& model, const Dataset& data) {
  if (data.examples.empty()) return;
  if (data.task != model.task()) {
    throw ConfigError("dataset task " + std::string(to_string(data.task)) +
                      " does not match model task " + std::string(to_string(model.task())));
  }
  const auto& c = model.config();
  if (data.n_visual != c.n_visual || data.d_raw_visual != c.d_raw_visual) {
    throw ConfigError("dataset has " + std::to_string(data.n_visual) + " ROIs of width " +
                      std::to_string(data.d_raw_visual) + " but the config expects n_visual=" +
                      std::to_string(c.n_visual) + ", d_raw_visual=" +
                      std::to_string(c.d_raw_visual));
  }
}

template <typename T>
double evaluate(const CmrModel<T>& model, const Dataset& data) {
  check_dataset(model, data);
  if (data.examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data.examples)
    if (model.predict(model.forward(ex)) == ex.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Returns false to stop training after the given epoch.
using EpochCallback = std::function<bool(const EpochMetrics&)>;

template <typename T>
class Trainer {
 public:
  Trainer(CmrModel<T>& model, const RunConfig& config)
      : model_(model), config_(config), adam_(AdamOptions::from(config)),
        shuffle_rng_(derive_seed(config.seed, "trainer.shuffle")) {}

  Adam<T>& optimizer() noexcept { return adam_; }

  /// One optimizer step on the given examples; returns summed loss and the
  /// number of correct predictions made before the step.
  std::pair<double, std::size_t> step(const std::vector<const SyntheticExample*>& batch) {
    auto& store = model_.params();
    store.zero_grad();
    double total = 0;
    std::size_t correct = 0;
    const T inv = T{1} / static_cast<T>(batch.size());
    for (const auto* ex : batch) {
      Tape<T> tape;
      TapeScope<T> scope(tape);
      const auto logits = model_.forward(*ex);
      const auto loss = model_.loss(logits, ex->label);
      if (model_.predict(logits) == ex->label) ++correct;
      total += static_cast<double>(loss.item());
      tape.backward(loss, inv);
    }
    adam_.step(store);
    return {total, correct};
  }

  TrainResult fit(const Dataset& train, const Dataset& heldout, const EpochCallback& on_epoch = {}) {
    check_dataset(model_, train);
    check_dataset(model_, heldout);
    if (train.examples.empty()) throw InputError("training set is empty");
    TrainResult result;
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto batch_size = static_cast<std::size_t>(config_.batch_size);
    for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
      shuffle_rng_.shuffle(order);
      double loss_sum = 0;
      std::size_t correct = 0;
      for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<const SyntheticExample*> batch;
        for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k)
          batch.push_back(&train.examples[order[k]]);
        const auto [l, c] = step(batch);
        loss_sum += l;
        correct += c;
      }
      EpochMetrics m;
      m.epoch = epoch;
      m.train_loss = loss_sum / static_cast<double>(train.size());
      m.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
      m.heldout_acc = evaluate(model_, heldout);
      result.trace.push_back(m);
      bool keep_going = !on_epoch || on_epoch(m);
      result.epochs_to_threshold = epochs_to_threshold(
          result.trace, config_.convergence_threshold, config_.sustain_epochs);
      if (config_.stop_at_threshold && result.epochs_to_threshold) keep_going = false;
      if (!keep_going) break;
    }
    return result;
  }

 private:
  CmrModel<T>& model_;
  RunConfig config_;
  Adam<T> adam_;
  Rng shuffle_rng_;
};

}  // namespace cmr
