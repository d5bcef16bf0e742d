// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: model sizes, optimizer constants, seeds and training
// schedule. Serialized as one JSON object; unknown keys are rejected.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cmr/errors.hpp"
#include "json.hpp"

namespace cmr {

enum class TaskKind { nlvr_like, vqa_like };

inline std::string_view to_string(TaskKind task) {
  return task == TaskKind::nlvr_like ? "nlvr_like" : "vqa_like";
}

inline TaskKind parse_task(std::string_view name) {
  if (name == "nlvr_like" || name == "nlvr") return TaskKind::nlvr_like;
  if (name == "vqa_like" || name == "vqa") return TaskKind::vqa_like;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

/// Number of images one example carries.
inline int image_count(TaskKind task) { return task == TaskKind::nlvr_like ? 2 : 1; }

/// Architectural ablations; `full` is the unmodified model.
enum class Variant { full, no_smod, no_xmod, no_entity, no_rel };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_smod: return "no_smod";
    case Variant::no_xmod: return "no_xmod";
    case Variant::no_entity: return "no_entity";
    case Variant::no_rel: return "no_rel";
  }
  return "full";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::full, Variant::no_smod, Variant::no_xmod, Variant::no_entity,
                    Variant::no_rel}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

struct RunConfig {
  // Model sizes. Entity counts, top-K and layer counts default to the
  // published setting; widths are desk-scale.
  int d = 32;
  int d_raw_text = 32;
  int d_raw_visual = 32;
  int n_text = 20;
  int n_visual = 36;
  int vocab_size = 32;
  int text_layers = 2;
  int visual_layers = 5;
  int cross_layers = 5;
  int ffn_multiplier = 4;
  int top_k = 10;
  int cnn_channels1 = 8;
  int cnn_channels2 = 16;
  int cnn_kernel = 3;
  int cnn_hidden = 32;
  int relation_hidden = 32;
  bool symmetric_relations = false;  // r averages both concatenation orders
  int head_hidden = 64;
  int n_classes = 8;

  // Adam.
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  int batch_size = 32;
  bool decoupled_weight_decay = true;
  bool decay_norm_params = false;

  // Schedule.
  std::uint64_t seed = 1;
  int epochs = 20;
  double convergence_threshold = 0.8;
  int sustain_epochs = 2;
  bool stop_at_threshold = false;

  std::string task = "nlvr_like";
  std::string data;
  std::string out;

  /// Small setting used for the synthetic experiments.
  static RunConfig desk() {
    RunConfig c;
    c.d = 16;
    c.d_raw_text = 16;
    c.n_text = 8;
    c.n_visual = 6;
    c.text_layers = 1;
    c.visual_layers = 1;
    c.cross_layers = 2;
    c.top_k = 4;
    c.cnn_channels1 = 4;
    c.cnn_channels2 = 8;
    c.cnn_hidden = 16;
    c.relation_hidden = 16;
    c.head_hidden = 32;
    c.n_classes = 4;
    c.learning_rate = 2e-3;
    c.weight_decay = 0.3;
    return c;
  }

  /// Gradient-check setting: d=8, four entities per source, K=3, one layer
  /// per stack, two CNN channels.
  static RunConfig tiny() {
    RunConfig c;
    c.d = 8;
    c.d_raw_text = 6;
    c.d_raw_visual = 5;
    c.n_text = 4;
    c.n_visual = 4;
    c.vocab_size = 12;
    c.text_layers = 1;
    c.visual_layers = 1;
    c.cross_layers = 1;
    c.ffn_multiplier = 2;
    c.top_k = 3;
    c.cnn_channels1 = 2;
    c.cnn_channels2 = 2;
    c.cnn_hidden = 6;
    c.relation_hidden = 6;
    c.head_hidden = 6;
    c.n_classes = 3;
    return c;
  }
};

namespace detail {

/// Visits (name, member) for every serialized field.
template <typename Config, typename Visitor>
void visit_fields(Config& c, Visitor&& v) {
  v("d", c.d);
  v("d_raw_text", c.d_raw_text);
  v("d_raw_visual", c.d_raw_visual);
  v("n_text", c.n_text);
  v("n_visual", c.n_visual);
  v("vocab_size", c.vocab_size);
  v("text_layers", c.text_layers);
  v("visual_layers", c.visual_layers);
  v("cross_layers", c.cross_layers);
  v("ffn_multiplier", c.ffn_multiplier);
  v("top_k", c.top_k);
  v("cnn_channels1", c.cnn_channels1);
  v("cnn_channels2", c.cnn_channels2);
  v("cnn_kernel", c.cnn_kernel);
  v("cnn_hidden", c.cnn_hidden);
  v("relation_hidden", c.relation_hidden);
  v("symmetric_relations", c.symmetric_relations);
  v("head_hidden", c.head_hidden);
  v("n_classes", c.n_classes);
  v("learning_rate", c.learning_rate);
  v("beta1", c.beta1);
  v("beta2", c.beta2);
  v("epsilon", c.epsilon);
  v("weight_decay", c.weight_decay);
  v("max_grad_norm", c.max_grad_norm);
  v("batch_size", c.batch_size);
  v("decoupled_weight_decay", c.decoupled_weight_decay);
  v("decay_norm_params", c.decay_norm_params);
  v("seed", c.seed);
  v("epochs", c.epochs);
  v("convergence_threshold", c.convergence_threshold);
  v("sustain_epochs", c.sustain_epochs);
  v("stop_at_threshold", c.stop_at_threshold);
  v("task", c.task);
  v("data", c.data);
  v("out", c.out);
}

// Fields that shape the shared trunk. The task head (n_classes,
// head_hidden) may differ between a checkpoint and the model loading it.
inline constexpr std::string_view kArchitectureFields[] = {
    "d",         "d_raw_text",    "d_raw_visual",  "n_text",     "n_visual",
    "vocab_size", "text_layers",  "visual_layers", "cross_layers", "ffn_multiplier",
    "top_k",     "cnn_channels1", "cnn_channels2", "cnn_kernel", "cnn_hidden",
    "relation_hidden", "symmetric_relations"};

inline long long pair_count(long long n) { return n * (n - 1) / 2; }

}  // namespace detail

inline void validate(const RunConfig& c) {
  auto positive = [](const char* name, double v) {
    if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive("d", c.d);
  positive("d_raw_text", c.d_raw_text);
  positive("d_raw_visual", c.d_raw_visual);
  positive("n_text", c.n_text);
  positive("n_visual", c.n_visual);
  positive("vocab_size", c.vocab_size);
  positive("ffn_multiplier", c.ffn_multiplier);
  positive("top_k", c.top_k);
  positive("cnn_channels1", c.cnn_channels1);
  positive("cnn_channels2", c.cnn_channels2);
  positive("cnn_kernel", c.cnn_kernel);
  positive("cnn_hidden", c.cnn_hidden);
  positive("relation_hidden", c.relation_hidden);
  positive("head_hidden", c.head_hidden);
  positive("n_classes", c.n_classes);
  positive("learning_rate", c.learning_rate);
  positive("epsilon", c.epsilon);
  positive("max_grad_norm", c.max_grad_norm);
  positive("batch_size", c.batch_size);
  positive("epochs", c.epochs);
  positive("sustain_epochs", c.sustain_epochs);
  positive("convergence_threshold", c.convergence_threshold);
  if (c.text_layers < 0 || c.visual_layers < 0 || c.cross_layers < 0) {
    throw ConfigError("layer counts must be non-negative");
  }
  if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1) {
    throw ConfigError("beta1/beta2 must lie in [0, 1)");
  }
  if (c.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (c.convergence_threshold > 1) throw ConfigError("convergence_threshold must be <= 1");
  if (c.top_k > detail::pair_count(c.n_text) || c.top_k > detail::pair_count(c.n_visual)) {
    throw ConfigError("top_k=" + std::to_string(c.top_k) +
                      " exceeds the number of entity pairs (n_text=" +
                      std::to_string(c.n_text) + ", n_visual=" + std::to_string(c.n_visual) +
                      ")");
  }
  parse_task(c.task);
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  detail::visit_fields(c, [&](const char* name, const auto& value) { j[name] = value; });
  return j;
}

inline RunConfig config_from_json(const nlohmann::json& j, RunConfig base = RunConfig{}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::string> known;
  detail::visit_fields(base, [&](const char* name, auto&) { known.emplace_back(name); });
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  detail::visit_fields(base, [&](const char* name, auto& member) {
    if (!j.contains(name)) return;
    using M = std::decay_t<decltype(member)>;
    const auto& value = j.at(name);
    try {
      if constexpr (std::is_same_v<M, bool>) {
        member = value.get<bool>();
      } else if constexpr (std::is_same_v<M, std::string>) {
        member = value.get<std::string>();
      } else if constexpr (std::is_integral_v<M>) {
        if (!value.is_number_integer()) throw ConfigError("expected an integer");
        member = value.get<M>();
      } else {
        if (!value.is_number()) throw ConfigError("expected a number");
        member = value.get<M>();
      }
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config key '") + name + "': " + e.what());
    }
  });
  validate(base);
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig{}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, base);
}

/// Architecture fields on which two configs disagree, as "name: a != b".
inline std::vector<std::string> architecture_diff(const RunConfig& a, const RunConfig& b) {
  const auto ja = to_json(a);
  const auto jb = to_json(b);
  std::vector<std::string> diff;
  for (auto field : detail::kArchitectureFields) {
    const std::string key(field);
    if (ja.at(key) != jb.at(key)) {
      diff.push_back(key + ": " + ja.at(key).dump() + " != " + jb.at(key).dump());
    }
  }
  return diff;
}

}  // namespace cmr
