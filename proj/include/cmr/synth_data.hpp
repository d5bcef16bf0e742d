// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic multimodal tasks and their .jsonl file format.
//
// Both tasks share one latent world, fixed by world_seed: a few concepts,
// each with a token id and a visual prototype, plus clutter kinds that have a
// prototype but no word. An ROI's raw feature is its prototype plus a
// horizontal-position component plus noise. ROIs are listed left to right
// by default, the way a detector's boxes might be read off in order.
//
//   nlvr_like  statement "a LEFT b" (optionally also RIGHT) over two images; label 1 iff in
//              both images a and b appear and the stated order holds.
//              Distractors keep both entities but break the order in at
//              least one image.
//   vqa_like   question "LEFTMOST|RIGHTMOST c_0 .. c_{m-1}" over one image;
//              label is the index k of the listed concept that is extreme.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmr/config.hpp"
#include "cmr/errors.hpp"
#include "cmr/rng.hpp"
#include "json.hpp"

namespace cmr {

/// Fixed token ids. Concept tokens start at kFirstConcept; ids past the
/// concept block are filler words.
struct Vocabulary {
  static constexpr int kThe = 0;
  static constexpr int kIs = 1;
  static constexpr int kOf = 2;
  static constexpr int kAnd = 3;
  static constexpr int kLeft = 4;
  static constexpr int kRight = 5;
  static constexpr int kLeftmost = 6;
  static constexpr int kRightmost = 7;
  static constexpr int kFirstConcept = 8;

  static int concept_token(int concept_id) { return kFirstConcept + concept_id; }
};

struct RoiGeometry {
  float x = 0, y = 0, w = 0, h = 0;
  bool operator==(const RoiGeometry&) const = default;
};

struct SyntheticExample {
  std::string id;
  TaskKind task = TaskKind::nlvr_like;
  std::vector<int> tokens;
  /// One row-major [n_visual x d_raw_visual] block per image.
  std::vector<std::vector<float>> visual;
  /// Optional per-ROI boxes, one list per image; empty when absent.
  std::vector<std::vector<RoiGeometry>> geometry;
  int label = 0;

  bool operator==(const SyntheticExample&) const = default;
};

struct Dataset {
  TaskKind task = TaskKind::nlvr_like;
  int n_visual = 0;
  int d_raw_visual = 0;
  std::vector<SyntheticExample> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool operator==(const Dataset&) const = default;
};

/// Generation-time facts from which every label can be recomputed.
struct LatentTrace {
  struct Roi {
    int concept_id;
    float x;
  };
  enum class Kind { positive, distractor, missing, answer };

  TaskKind task = TaskKind::nlvr_like;
  Kind kind = Kind::positive;
  int concept_a = -1, concept_b = -1;
  int relation_token = Vocabulary::kLeft;    // nlvr_like
  int query_token = Vocabulary::kLeftmost;   // vqa_like
  std::vector<int> listed;                   // vqa_like
  std::vector<std::vector<Roi>> images;
};

struct GeneratorSpec {
  std::uint64_t seed = 7;
  TaskKind task = TaskKind::nlvr_like;
  int n_examples = 2500;          // split 80/20 into train/heldout
  double heldout_fraction = 0.2;
  int vocab_size = 32;
  std::uint64_t world_seed = 7;   // prototypes; shared across tasks
  int n_concepts = 4;
  int n_clutter_kinds = 8;
  int concepts_per_image = 3;     // the remaining ROIs are clutter
  bool relation_dependence = true;
  bool both_directions = false;  // nlvr_like: sentences may also assert "right of"
  int n_text = 8;
  int n_visual = 6;
  int d_raw_visual = 32;
  int n_choices = 4;              // vqa_like answer classes
  double positive_rate = 0.5;     // nlvr_like class-balance target
  double distractor_rate = 0.3;   // share of all nlvr_like examples
  double position_strength = 0.2;  // weight of the horizontal-position component
  double noise = 0.05;
  bool rois_left_to_right = true;  // false: ROIs listed in random order

  int n_images() const { return image_count(task); }
};

struct GeneratedData {
  Dataset train;
  Dataset heldout;
  std::vector<LatentTrace> train_trace;
  std::vector<LatentTrace> heldout_trace;
};

inline void validate(const GeneratorSpec& spec) {
  auto fail = [](const std::string& msg) { throw ConfigError("generator spec: " + msg); };
  if (spec.n_concepts < 2) fail("concept count must be at least 2");
  if (spec.n_examples < 1) fail("n_examples must be positive");
  if (spec.n_visual < 2) fail("n_visual must be at least 2");
  if (spec.d_raw_visual < 1) fail("d_raw_visual must be positive");
  if (spec.n_clutter_kinds < 1) fail("n_clutter_kinds must be positive");
  if (spec.concepts_per_image > spec.n_visual) fail("concepts_per_image exceeds n_visual");
  if (spec.heldout_fraction <= 0 || spec.heldout_fraction >= 1)
    fail("heldout_fraction must lie in (0, 1)");
  if (Vocabulary::kFirstConcept + spec.n_concepts > spec.vocab_size)
    fail("vocab_size too small for " + std::to_string(spec.n_concepts) + " concepts");
  if (spec.task == TaskKind::nlvr_like) {
    if (spec.n_text < 3) fail("n_text must be at least 3");
    if (spec.concepts_per_image < 2) fail("concepts_per_image must be at least 2");
    if (spec.n_concepts < 3) fail("n_concepts must be at least 3 so a concept can be absent");
    if (spec.positive_rate <= 0 || spec.positive_rate >= 1)
      fail("positive_rate must lie in (0, 1)");
    if (spec.distractor_rate < 0 || spec.distractor_rate > 1 - spec.positive_rate)
      fail("distractor_rate must lie in [0, 1 - positive_rate]");
  } else {
    if (spec.n_choices < 2) fail("n_choices must be at least 2");
    if (spec.n_choices > spec.n_visual) fail("n_choices exceeds n_visual");
    if (spec.n_choices > spec.n_concepts) fail("n_choices exceeds n_concepts");
    if (spec.n_choices + 1 > spec.n_text) fail("question does not fit in n_text tokens");
  }
}

/// Recomputes a label from the latent trace by direct search.
inline int brute_force_label(const LatentTrace& trace, bool relation_dependence = true) {
  auto find_x = [](const std::vector<LatentTrace::Roi>& image,
                   int concept_id) -> std::optional<float> {
    for (const auto& roi : image)
      if (roi.concept_id == concept_id) return roi.x;
    return std::nullopt;
  };
  if (trace.task == TaskKind::nlvr_like) {
    for (const auto& image : trace.images) {
      const auto xa = find_x(image, trace.concept_a);
      const auto xb = find_x(image, trace.concept_b);
      if (!xa || !xb) return 0;
      if (!relation_dependence) continue;
      const bool holds = trace.relation_token == Vocabulary::kLeft ? *xa < *xb : *xa > *xb;
      if (!holds) return 0;
    }
    return 1;
  }
  int best = -1;
  float best_x = 0;
  for (std::size_t k = 0; k < trace.listed.size(); ++k) {
    const auto x = find_x(trace.images.at(0), trace.listed[k]);
    if (!x) return -1;
    const bool better = trace.query_token == Vocabulary::kLeftmost ? *x < best_x : *x > best_x;
    if (best < 0 || better) {
      best = static_cast<int>(k);
      best_x = *x;
    }
  }
  return best;
}

namespace detail {

class WorldGenerator {
 public:
  explicit WorldGenerator(const GeneratorSpec& spec)
      : spec_(spec), rng_(derive_seed(spec.seed, "synth.examples")) {
    Rng world(derive_seed(spec.world_seed, "synth.world"));
    prototypes_.resize(
        static_cast<std::size_t>((spec.n_concepts + spec.n_clutter_kinds) * spec.d_raw_visual));
    for (auto& v : prototypes_) v = world.normal();
    position_axis_.resize(static_cast<std::size_t>(spec.d_raw_visual));
    for (auto& v : position_axis_) v = world.normal();
  }

  Rng& rng() { return rng_; }

  /// n_visual prototype ids: every concept in `must`, distinct extra concepts
  /// (never from `banned`) up to concepts_per_image, then clutter kinds.
  std::vector<int> pick_concepts(const std::vector<int>& must, const std::vector<int>& banned) {
    std::vector<int> pool;
    for (int c = 0; c < spec_.n_concepts; ++c) {
      if (std::find(must.begin(), must.end(), c) != must.end()) continue;
      if (std::find(banned.begin(), banned.end(), c) != banned.end()) continue;
      pool.push_back(c);
    }
    rng_.shuffle(pool);
    std::vector<int> chosen = must;
    const int n_concepts = std::min(spec_.concepts_per_image, spec_.n_visual);
    for (int c : pool) {
      if (static_cast<int>(chosen.size()) >= n_concepts) break;
      chosen.push_back(c);
    }
    while (static_cast<int>(chosen.size()) < spec_.n_visual) {
      chosen.push_back(spec_.n_concepts +
                       static_cast<int>(rng_.below(static_cast<std::size_t>(spec_.n_clutter_kinds))));
    }
    rng_.shuffle(chosen);
    return chosen;
  }

  /// Places concepts at distinct horizontal slots, in random ROI order.
  /// generate() may relist them left to right before rendering.
  std::vector<LatentTrace::Roi> layout(const std::vector<int>& concepts) {
    const int n = static_cast<int>(concepts.size());
    std::vector<int> slots(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) slots[static_cast<std::size_t>(i)] = i;
    rng_.shuffle(slots);
    std::vector<LatentTrace::Roi> rois;
    for (int i = 0; i < n; ++i) {
      const double jitter = rng_.uniform(-0.3, 0.3);
      const double x = (slots[static_cast<std::size_t>(i)] + 0.5 + jitter) / n;
      rois.push_back({concepts[static_cast<std::size_t>(i)], static_cast<float>(x)});
    }
    return rois;
  }

  static LatentTrace::Roi* find(std::vector<LatentTrace::Roi>& image, int concept_id) {
    for (auto& roi : image)
      if (roi.concept_id == concept_id) return &roi;
    return nullptr;
  }

  void render(const std::vector<LatentTrace::Roi>& image, std::vector<float>& features,
              std::vector<RoiGeometry>& boxes) {
    const auto d = static_cast<std::size_t>(spec_.d_raw_visual);
    features.assign(image.size() * d, 0.0f);
    boxes.clear();
    for (std::size_t r = 0; r < image.size(); ++r) {
      const auto c = static_cast<std::size_t>(image[r].concept_id);
      const double offset = spec_.position_strength * 2.0 * (image[r].x - 0.5);
      for (std::size_t k = 0; k < d; ++k) {
        const double v = prototypes_[c * d + k] + offset * position_axis_[k] +
                         spec_.noise * rng_.normal();
        features[r * d + k] = static_cast<float>(v);
      }
      const float width = 0.8f / static_cast<float>(image.size());
      boxes.push_back({image[r].x - width / 2, 0.5f, width, 0.5f});
    }
  }

  int filler() {
    const int first_noise = Vocabulary::kFirstConcept + spec_.n_concepts;
    const int n_noise = spec_.vocab_size - first_noise;
    if (n_noise <= 0) return Vocabulary::kAnd;
    return first_noise + static_cast<int>(rng_.below(static_cast<std::size_t>(n_noise)));
  }

  void pad_with_fillers(std::vector<int>& tokens) {
    const auto room = static_cast<std::size_t>(spec_.n_text) - tokens.size();
    const std::size_t extra = rng_.below(room + 1);
    for (std::size_t i = 0; i < extra; ++i) tokens.push_back(filler());
  }

 private:
  const GeneratorSpec& spec_;
  Rng rng_;
  std::vector<double> prototypes_;
  std::vector<double> position_axis_;
};

inline std::vector<LatentTrace::Kind> class_schedule(const GeneratorSpec& spec, int n, Rng& rng) {
  std::vector<LatentTrace::Kind> kinds;
  if (spec.task == TaskKind::vqa_like) {
    kinds.assign(static_cast<std::size_t>(n), LatentTrace::Kind::answer);
    return kinds;
  }
  const int n_pos = static_cast<int>(std::lround(spec.positive_rate * n));
  const int n_dis = spec.relation_dependence
                        ? std::min(n - n_pos, static_cast<int>(std::lround(spec.distractor_rate * n)))
                        : 0;
  for (int i = 0; i < n; ++i) {
    kinds.push_back(i < n_pos           ? LatentTrace::Kind::positive
                    : i < n_pos + n_dis ? LatentTrace::Kind::distractor
                                        : LatentTrace::Kind::missing);
  }
  rng.shuffle(kinds);
  return kinds;
}

inline std::vector<int> answer_schedule(const GeneratorSpec& spec, int n, Rng& rng) {
  std::vector<int> answers;
  for (int i = 0; i < n; ++i) answers.push_back(i % spec.n_choices);
  rng.shuffle(answers);
  return answers;
}

inline SyntheticExample make_nlvr(WorldGenerator& gen, const GeneratorSpec& spec,
                                  LatentTrace::Kind kind, LatentTrace& trace) {
  auto& rng = gen.rng();
  trace = LatentTrace{};
  trace.task = TaskKind::nlvr_like;
  trace.kind = kind;
  trace.concept_a = static_cast<int>(rng.below(static_cast<std::size_t>(spec.n_concepts)));
  do {
    trace.concept_b = static_cast<int>(rng.below(static_cast<std::size_t>(spec.n_concepts)));
  } while (trace.concept_b == trace.concept_a);
  if (spec.both_directions && rng.uniform() < 0.5) trace.relation_token = Vocabulary::kRight;

  const int n_images = spec.n_images();
  std::vector<bool> broken(static_cast<std::size_t>(n_images), false);
  int missing_image = -1, missing_concept = -1;
  if (kind == LatentTrace::Kind::distractor) {
    const auto pattern = rng.below(3);  // image 0, image 1, or both
    broken[0] = pattern != 1;
    broken[1] = pattern != 0;
  } else if (kind == LatentTrace::Kind::missing) {
    missing_image = static_cast<int>(rng.below(static_cast<std::size_t>(n_images)));
    missing_concept = rng.uniform() < 0.5 ? trace.concept_a : trace.concept_b;
  }

  const auto a = trace.concept_a, b = trace.concept_b;
  for (int img = 0; img < n_images; ++img) {
    std::vector<LatentTrace::Roi> rois;
    if (img == missing_image) {
      const int kept = missing_concept == a ? b : a;
      rois = gen.layout(gen.pick_concepts({kept}, {missing_concept}));
    } else {
      rois = gen.layout(gen.pick_concepts({a, b}, {}));
      auto* ra = WorldGenerator::find(rois, a);
      auto* rb = WorldGenerator::find(rois, b);
      const bool holds = trace.relation_token == Vocabulary::kLeft ? ra->x < rb->x : ra->x > rb->x;
      bool want = !broken[static_cast<std::size_t>(img)];
      if (kind == LatentTrace::Kind::missing || !spec.relation_dependence) want = holds;
      if (holds != want) std::swap(ra->x, rb->x);
    }
    trace.images.push_back(std::move(rois));
  }

  SyntheticExample ex;
  ex.task = TaskKind::nlvr_like;
  if (rng.uniform() < 0.5) ex.tokens.push_back(Vocabulary::kThe);
  ex.tokens.push_back(Vocabulary::concept_token(a));
  if (rng.uniform() < 0.5) ex.tokens.push_back(Vocabulary::kIs);
  ex.tokens.push_back(trace.relation_token);
  if (rng.uniform() < 0.5) ex.tokens.push_back(Vocabulary::kOf);
  ex.tokens.push_back(Vocabulary::concept_token(b));
  if (static_cast<int>(ex.tokens.size()) > spec.n_text) {
    ex.tokens = {Vocabulary::concept_token(a), trace.relation_token, Vocabulary::concept_token(b)};
  }
  gen.pad_with_fillers(ex.tokens);
  return ex;
}

inline SyntheticExample make_vqa(WorldGenerator& gen, const GeneratorSpec& spec, int answer,
                                 LatentTrace& trace) {
  auto& rng = gen.rng();
  trace = LatentTrace{};
  trace.task = TaskKind::vqa_like;
  trace.kind = LatentTrace::Kind::answer;
  trace.query_token = rng.uniform() < 0.5 ? Vocabulary::kLeftmost : Vocabulary::kRightmost;
  std::vector<int> pool(static_cast<std::size_t>(spec.n_concepts));
  for (int c = 0; c < spec.n_concepts; ++c) pool[static_cast<std::size_t>(c)] = c;
  rng.shuffle(pool);
  trace.listed.assign(pool.begin(), pool.begin() + spec.n_choices);

  auto rois = gen.layout(gen.pick_concepts(trace.listed, {}));
  // Move the answer concept to the extreme slot among the listed ones.
  LatentTrace::Roi* extreme = nullptr;
  for (int c : trace.listed) {
    auto* roi = WorldGenerator::find(rois, c);
    if (!extreme || (trace.query_token == Vocabulary::kLeftmost ? roi->x < extreme->x
                                                                : roi->x > extreme->x)) {
      extreme = roi;
    }
  }
  auto* target = WorldGenerator::find(rois, trace.listed[static_cast<std::size_t>(answer)]);
  std::swap(extreme->x, target->x);
  trace.images.push_back(std::move(rois));

  SyntheticExample ex;
  ex.task = TaskKind::vqa_like;
  ex.tokens.push_back(trace.query_token);
  for (int c : trace.listed) ex.tokens.push_back(Vocabulary::concept_token(c));
  gen.pad_with_fillers(ex.tokens);
  return ex;
}

}  // namespace detail

/// Deterministic in the spec: the same spec yields bitwise-identical data.
inline GeneratedData generate(const GeneratorSpec& spec) {
  validate(spec);
  detail::WorldGenerator gen(spec);
  const int n_heldout = std::max(
      1, static_cast<int>(std::lround(spec.heldout_fraction * spec.n_examples)));
  const int n_train = spec.n_examples - n_heldout;
  if (n_train < 1) throw ConfigError("generator spec: too few examples for a train split");

  GeneratedData out;
  const auto task_name = std::string(to_string(spec.task));
  auto build = [&](int n, const std::string& split, Dataset& data,
                   std::vector<LatentTrace>& traces) {
    data.task = spec.task;
    data.n_visual = spec.n_visual;
    data.d_raw_visual = spec.d_raw_visual;
    Rng schedule_rng(derive_seed(spec.seed, "synth.schedule." + split));
    const auto kinds = detail::class_schedule(spec, n, schedule_rng);
    const auto answers = detail::answer_schedule(spec, n, schedule_rng);
    for (int i = 0; i < n; ++i) {
      LatentTrace trace;
      SyntheticExample ex =
          spec.task == TaskKind::nlvr_like
              ? detail::make_nlvr(gen, spec, kinds[static_cast<std::size_t>(i)], trace)
              : detail::make_vqa(gen, spec, answers[static_cast<std::size_t>(i)], trace);
      char id[64];
      std::snprintf(id, sizeof(id), "%s-s%llu-%s-%05d", task_name.c_str(),
                    static_cast<unsigned long long>(spec.seed), split.c_str(), i);
      ex.id = id;
      for (auto& image : trace.images) {
        if (spec.rois_left_to_right) {
          std::stable_sort(image.begin(), image.end(),
                           [](const auto& p, const auto& q) { return p.x < q.x; });
        }
        std::vector<float> features;
        std::vector<RoiGeometry> boxes;
        gen.render(image, features, boxes);
        ex.visual.push_back(std::move(features));
        ex.geometry.push_back(std::move(boxes));
      }
      if (spec.task == TaskKind::nlvr_like) {
        ex.label = trace.kind == LatentTrace::Kind::positive ? 1 : 0;
      } else {
        ex.label = answers[static_cast<std::size_t>(i)];
      }
      data.examples.push_back(std::move(ex));
      traces.push_back(std::move(trace));
    }
  };
  build(n_train, "train", out.train, out.train_trace);
  build(n_heldout, "heldout", out.heldout, out.heldout_trace);
  return out;
}

struct DatasetSummary {
  std::size_t count = 0;
  std::map<int, std::size_t> label_counts;

  double fraction(int label) const {
    if (count == 0) return 0.0;
    auto it = label_counts.find(label);
    return it == label_counts.end() ? 0.0 : static_cast<double>(it->second) / count;
  }
  double majority_fraction() const {
    std::size_t best = 0;
    for (const auto& [label, n] : label_counts) best = std::max(best, n);
    return count ? static_cast<double>(best) / count : 0.0;
  }
};

inline DatasetSummary summarize(const Dataset& data) {
  DatasetSummary s;
  s.count = data.size();
  for (const auto& ex : data.examples) ++s.label_counts[ex.label];
  return s;
}

// ---------------------------------------------------------------------------
// .jsonl format: one record per line,
//   {"id": str, "task": "nlvr_like"|"vqa_like", "tokens": [int],
//    "visual": [[[float x d_raw_visual] x n_visual] x n_images],
//    "geometry": [[[x, y, w, h] x n_visual] x n_images]   (optional),
//    "label": int}
// Floats carry 9 significant digits, enough to round-trip 32-bit values.

namespace detail {

inline void append_float(std::string& out, float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  out += buf;
}

inline std::string quote(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace detail

inline std::string to_jsonl_line(const SyntheticExample& ex, int d_raw_visual) {
  std::string line;
  line.reserve(4096);
  line += "{\"id\":" + detail::quote(ex.id);
  line += ",\"task\":\"" + std::string(to_string(ex.task)) + "\"";
  line += ",\"tokens\":[";
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
    if (i) line += ',';
    line += std::to_string(ex.tokens[i]);
  }
  line += "],\"visual\":[";
  const auto d = static_cast<std::size_t>(d_raw_visual);
  for (std::size_t img = 0; img < ex.visual.size(); ++img) {
    if (img) line += ',';
    line += '[';
    const auto& feats = ex.visual[img];
    for (std::size_t r = 0; r * d < feats.size(); ++r) {
      if (r) line += ',';
      line += '[';
      for (std::size_t k = 0; k < d; ++k) {
        if (k) line += ',';
        detail::append_float(line, feats[r * d + k]);
      }
      line += ']';
    }
    line += ']';
  }
  line += ']';
  if (!ex.geometry.empty()) {
    line += ",\"geometry\":[";
    for (std::size_t img = 0; img < ex.geometry.size(); ++img) {
      if (img) line += ',';
      line += '[';
      for (std::size_t r = 0; r < ex.geometry[img].size(); ++r) {
        const auto& g = ex.geometry[img][r];
        if (r) line += ',';
        line += '[';
        detail::append_float(line, g.x);
        line += ',';
        detail::append_float(line, g.y);
        line += ',';
        detail::append_float(line, g.w);
        line += ',';
        detail::append_float(line, g.h);
        line += ']';
      }
      line += ']';
    }
    line += ']';
  }
  line += ",\"label\":" + std::to_string(ex.label) + "}";
  return line;
}

inline void write_jsonl(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write dataset file " + path);
  for (const auto& ex : data.examples) out << to_jsonl_line(ex, data.d_raw_visual) << '\n';
  if (!out) throw InputError("failed while writing " + path);
}

/// Expected per-image extents; zero fields are inferred from the first record.
struct DatasetShape {
  int n_visual = 0;
  int d_raw_visual = 0;
};

inline SyntheticExample parse_jsonl_record(const std::string& line, std::size_t line_no,
                                           DatasetShape& shape) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(where + ": malformed record: " + e.what());
  }
  if (!j.is_object()) throw SchemaError(where + ": record is not an object");
  for (const char* field : {"id", "task", "tokens", "visual", "label"}) {
    if (!j.contains(field)) {
      throw SchemaError(where + ": missing field '" + std::string(field) + "'");
    }
  }
  SyntheticExample ex;
  try {
    ex.id = j.at("id").get<std::string>();
    ex.task = parse_task(j.at("task").get<std::string>());
    ex.tokens = j.at("tokens").get<std::vector<int>>();
    ex.label = j.at("label").get<int>();
    const auto& visual = j.at("visual");
    if (!visual.is_array()) throw SchemaError("visual must be an array");
    for (const auto& image : visual) {
      if (!image.is_array()) throw SchemaError("image must be an array of rows");
      if (shape.n_visual == 0) shape.n_visual = static_cast<int>(image.size());
      if (static_cast<int>(image.size()) != shape.n_visual) {
        throw SchemaError("record '" + ex.id + "' has " + std::to_string(image.size()) +
                          " visual rows, expected " + std::to_string(shape.n_visual));
      }
      std::vector<float> feats;
      for (const auto& row : image) {
        if (!row.is_array()) throw SchemaError("visual row must be an array");
        if (shape.d_raw_visual == 0) shape.d_raw_visual = static_cast<int>(row.size());
        if (static_cast<int>(row.size()) != shape.d_raw_visual) {
          throw SchemaError("record '" + ex.id + "' has a visual row of width " +
                            std::to_string(row.size()) + ", expected " +
                            std::to_string(shape.d_raw_visual));
        }
        for (const auto& v : row) feats.push_back(static_cast<float>(v.get<double>()));
      }
      ex.visual.push_back(std::move(feats));
    }
    if (static_cast<int>(ex.visual.size()) != image_count(ex.task)) {
      throw SchemaError("record '" + ex.id + "' has " + std::to_string(ex.visual.size()) +
                        " images, expected " + std::to_string(image_count(ex.task)));
    }
    if (j.contains("geometry")) {
      for (const auto& image : j.at("geometry")) {
        std::vector<RoiGeometry> boxes;
        for (const auto& box : image) {
          const auto v = box.get<std::vector<double>>();
          if (v.size() != 4) throw SchemaError("geometry entries must have 4 numbers");
          boxes.push_back({static_cast<float>(v[0]), static_cast<float>(v[1]),
                           static_cast<float>(v[2]), static_cast<float>(v[3])});
        }
        if (static_cast<int>(boxes.size()) != shape.n_visual) {
          throw SchemaError("record '" + ex.id + "' geometry row count mismatch");
        }
        ex.geometry.push_back(std::move(boxes));
      }
    }
    if (ex.task == TaskKind::nlvr_like && ex.label != 0 && ex.label != 1) {
      throw SchemaError("record '" + ex.id + "' has non-binary label " +
                        std::to_string(ex.label));
    }
    if (ex.label < 0) throw SchemaError("record '" + ex.id + "' has a negative label");
  } catch (const SchemaError& e) {
    throw SchemaError(where + ": " + e.what());
  } catch (const std::exception& e) {
    throw SchemaError(where + ": bad field type: " + e.what());
  }
  return ex;
}

inline Dataset read_jsonl(const std::string& path, DatasetShape shape = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open dataset file " + path);
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto ex = parse_jsonl_record(line, line_no, shape);
    if (first) {
      data.task = ex.task;
      first = false;
    } else if (ex.task != data.task) {
      throw SchemaError("line " + std::to_string(line_no) + ": task differs from first record");
    }
    data.examples.push_back(std::move(ex));
  }
  data.n_visual = shape.n_visual;
  data.d_raw_visual = shape.d_raw_visual;
  return data;
}

// ---------------------------------------------------------------------------
// Entity-bag baseline: logistic regression on the mean token one-hot and the
// mean ROI feature of each image. It sees which entities occur but nothing
// about how they relate.

struct BaselineResult {
  double train_accuracy = 0;
  double heldout_accuracy = 0;
};

namespace detail {

inline std::vector<double> bag_features(const SyntheticExample& ex, int vocab_size,
                                        int d_raw_visual) {
  std::vector<double> f(static_cast<std::size_t>(vocab_size), 0.0);
  for (int t : ex.tokens) f[static_cast<std::size_t>(t)] += 1.0 / ex.tokens.size();
  const auto d = static_cast<std::size_t>(d_raw_visual);
  for (const auto& image : ex.visual) {
    std::vector<double> mean(d, 0.0);
    const std::size_t rows = image.size() / d;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < d; ++k) mean[k] += image[r * d + k] / rows;
    f.insert(f.end(), mean.begin(), mean.end());
  }
  f.push_back(1.0);
  return f;
}

}  // namespace detail

inline BaselineResult entity_bag_baseline(const Dataset& train, const Dataset& heldout,
                                          int vocab_size, int iterations = 400,
                                          double learning_rate = 0.5, double l2 = 1e-4) {
  if (train.task != TaskKind::nlvr_like) {
    throw ConfigError("entity-bag baseline is defined for binary nlvr_like data");
  }
  auto featurize = [&](const Dataset& data) {
    std::vector<std::vector<double>> xs;
    for (const auto& ex : data.examples)
      xs.push_back(detail::bag_features(ex, vocab_size, data.d_raw_visual));
    return xs;
  };
  auto xs = featurize(train);
  const auto xh = featurize(heldout);
  // Standardize with train statistics (bias column excluded).
  const std::size_t dim = xs.front().size();
  std::vector<double> mean(dim, 0.0), sd(dim, 1.0);
  for (std::size_t k = 0; k + 1 < dim; ++k) {
    double m = 0, v = 0;
    for (const auto& x : xs) m += x[k];
    m /= xs.size();
    for (const auto& x : xs) v += (x[k] - m) * (x[k] - m);
    mean[k] = m;
    sd[k] = std::sqrt(v / xs.size()) + 1e-9;
  }
  auto standardize = [&](std::vector<double> x) {
    for (std::size_t k = 0; k + 1 < dim; ++k) x[k] = (x[k] - mean[k]) / sd[k];
    return x;
  };
  for (auto& x : xs) x = standardize(x);

  std::vector<double> w(dim, 0.0);
  const double n = static_cast<double>(xs.size());
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> grad(dim, 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double z = 0;
      for (std::size_t k = 0; k < dim; ++k) z += w[k] * xs[i][k];
      const double err = 1.0 / (1.0 + std::exp(-z)) - train.examples[i].label;
      for (std::size_t k = 0; k < dim; ++k) grad[k] += err * xs[i][k] / n;
    }
    for (std::size_t k = 0; k < dim; ++k) w[k] -= learning_rate * (grad[k] + l2 * w[k]);
  }
  auto accuracy = [&](const std::vector<std::vector<double>>& x, const Dataset& data,
                      bool needs_standardize) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto xi = needs_standardize ? standardize(x[i]) : x[i];
      double z = 0;
      for (std::size_t k = 0; k < dim; ++k) z += w[k] * xi[k];
      if ((z > 0 ? 1 : 0) == data.examples[i].label) ++correct;
    }
    return x.empty() ? 0.0 : static_cast<double>(correct) / x.size();
  };
  return {accuracy(xs, train, false), accuracy(xh, heldout, true)};
}

}  // namespace cmr
