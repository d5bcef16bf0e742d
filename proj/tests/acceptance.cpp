// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, then a JSON report in
// acceptance_report.json. `--only 1,3,8` restricts the run.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmr/cmr.hpp"
#include "cmr/experiment.hpp"
#include "cmr/op_suite.hpp"
#include "json.hpp"

using namespace cmr;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int kSeeds = 5;
constexpr int kEpochs = 30;
constexpr int kTrain = 2000;
constexpr int kHeldout = 500;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
  nlohmann::json data = nlohmann::json::object();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

RunConfig nlvr_config(int seed) {
  RunConfig c = RunConfig::desk();
  c.task = "nlvr_like";
  c.seed = static_cast<std::uint64_t>(seed);
  c.epochs = kEpochs;
  return c;
}

GeneratedData nlvr_data(int seed) {
  auto spec = generator_spec_for(RunConfig::desk(), TaskKind::nlvr_like,
                                 static_cast<std::uint64_t>(6 + seed));
  spec.n_examples = kTrain + kHeldout;
  spec.heldout_fraction = static_cast<double>(kHeldout) / spec.n_examples;
  return generate(spec);
}

void log_epoch(const char* tag, int seed, const EpochMetrics& m) {
  std::printf("  [%s seed %d] epoch %2d loss %.4f train %.3f heldout %.3f\n", tag, seed, m.epoch,
              m.train_loss, m.train_acc, m.heldout_acc);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------

Outcome op_gradients() {
  const auto t0 = Clock::now();
  const auto reports = run_op_checks(10, kOpTolerance);
  const double secs = seconds_since(t0);
  Outcome o;
  double worst = 0;
  std::set<std::string> ops, failed;
  for (const auto& r : reports) {
    const auto op = r.op_name.substr(0, r.op_name.find('/'));
    ops.insert(op);
    worst = std::max(worst, r.max_relative_error);
    if (!r.passed) failed.insert(op);
  }
  o.pass = failed.empty() && secs < 60.0;
  o.detail = std::to_string(ops.size()) + " ops x 10 seeds, worst rel err " + fmt("%.2e", worst) +
             " (< 1e-4), " + fmt("%.1f", secs) + "s (< 60s)";
  for (const auto& f : failed) o.detail += ", failed " + f;
  o.data = {{"ops", ops.size()}, {"worst", worst}, {"seconds", secs}};
  return o;
}

Outcome model_gradient() {
  const auto t0 = Clock::now();
  const auto r = run_model_check(RunConfig::tiny(), TaskKind::nlvr_like, 1, kModelTolerance);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = r.passed && secs < 300.0;
  o.detail = std::to_string(r.per_element_errors.size()) + " parameters, max rel err " +
             fmt("%.2e", r.max_relative_error) + " (< 1e-3), " + fmt("%.1f", secs) + "s (< 300s)";
  o.data = {{"parameters", r.per_element_errors.size()},
            {"max_relative_error", r.max_relative_error},
            {"seconds", secs}};
  return o;
}

Outcome structure() {
  Outcome o;
  const RunConfig full_size;  // published sizes: 20 words, 36 ROIs, top-10
  CmrModel<float> nlvr(full_size, TaskKind::nlvr_like), vqa(full_size, TaskKind::vqa_like);
  int entity = 0, relational = 0;
  for (const auto& label : nlvr.block_labels()) (label.rfind("entity:", 0) == 0 ? entity : relational)++;

  SyntheticExample ex;
  ex.task = TaskKind::nlvr_like;
  ex.label = 1;
  Rng rng(3);
  for (int i = 0; i < full_size.n_text; ++i) ex.tokens.push_back(static_cast<int>(rng.below(32)));
  for (int img = 0; img < 2; ++img) {
    std::vector<float> f(static_cast<std::size_t>(full_size.n_visual * full_size.d_raw_visual));
    for (auto& v : f) v = static_cast<float>(rng.normal());
    ex.visual.push_back(f);
  }
  ForwardTrace<float> trace;
  nlvr.forward(ex, &trace);
  const auto candidates = trace.candidates.at(kTextSource).size();
  const auto selected = trace.rankings.front().top_mu.effective_k;
  const auto phi = trace.phi.numel();

  o.pass = entity == 3 && relational == 3 && vqa.block_count() == 2 && candidates == 190 &&
           full_size.top_k == 10 && selected == 10 &&
           phi == 6 * static_cast<std::size_t>(full_size.d);
  o.detail = "nlvr " + std::to_string(entity) + "+" + std::to_string(relational) + " blocks, vqa " +
             std::to_string(vqa.block_count()) + " blocks, " + std::to_string(candidates) +
             " candidates for 20 words, top-" + std::to_string(selected);
  o.data = {{"nlvr_entity", entity}, {"nlvr_relational", relational},
            {"vqa_blocks", vqa.block_count()}, {"candidates", candidates}, {"top_k", selected}};
  return o;
}

Outcome invariants() {
  std::vector<std::pair<std::string, bool>> checks;
  auto record = [&](const std::string& name, bool ok) { checks.emplace_back(name, ok); };
  using TD = Tensor<double>;
  auto random = [](std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    TD t({r, c});
    for (auto& v : t.mutable_values()) v = 3 * rng.normal();
    return t;
  };

  bool ok = true;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto p = softmax_columns(random(7, 5, s));
    for (std::size_t j = 0; j < 5; ++j) {
      double total = 0;
      for (std::size_t i = 0; i < 7; ++i) total += p.at(i, j);
      ok = ok && std::abs(total - 1) <= 1e-9;
    }
  }
  record("softmax columns sum to 1", ok);

  ok = true;
  bool v_sym = true, u_sum = true, rank_inv = true;
  ParameterStore<double> store(2);
  const auto mlps = make_relation_mlps(store, Modality::text, 6, 8);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const EntitySet<double> a{Modality::text, 0, random(6, 7, s), Mask(7, 1)};
    const EntitySet<double> b{Modality::visual, 1, random(6, 5, s + 50), Mask(5, 1)};
    auto A = affinity(a, b);
    ok = ok && affinity(b, a).A.data() == transpose(A.A).data();
    const auto imp = inter_modality_importance(A, true);
    v_sym = v_sym && imp.V.data() == transpose(imp.V).data();
    auto set = relation_representations(a, mlps.represent);
    intra_modality_scores(set, mlps.score);
    double total = 0;
    for (const auto& c : set.items) total += c.u;
    u_sum = u_sum && std::abs(total - 1) <= 1e-9;
    const auto top = rank_and_select(set, imp, 5);
    A.A = scale(A.A, 0.37 + static_cast<double>(s));
    rank_inv = rank_inv && rank_and_select(set, inter_modality_importance(A, true), 5).selected ==
                               top.selected;
  }
  record("affinity transpose symmetry", ok);
  record("V symmetric", v_sym);
  record("u sums to 1", u_sum);
  record("ranking invariant under rescaling", rank_inv);

  auto c = RunConfig::tiny();
  c.epochs = 3;
  c.batch_size = 8;
  auto spec = generator_spec_for(c, TaskKind::nlvr_like, 5);
  spec.n_examples = 40;
  const auto data = generate(spec);
  std::optional<CmrModel<double>> m1, m2;
  const CmrModel<double> fresh(c, TaskKind::nlvr_like);
  const auto r1 = train_run<double>(c, TaskKind::nlvr_like, Variant::full, data.train, data.heldout,
                                    nullptr, &m1);
  const auto r2 = train_run<double>(c, TaskKind::nlvr_like, Variant::full, data.train, data.heldout,
                                    nullptr, &m2);
  ok = true;
  for (const auto& [name, e] : fresh.params().entries())
    if (e.kind == ParamKind::frozen) ok = ok && m1->params().at(name).data() == e.tensor.data();
  record("frozen parameters bitwise stable", ok);
  ok = r1.result.trace.size() == r2.result.trace.size();
  for (std::size_t e = 0; ok && e < r1.result.trace.size(); ++e)
    ok = r1.result.trace[e].train_loss == r2.result.trace[e].train_loss &&
         r1.result.trace[e].heldout_acc == r2.result.trace[e].heldout_acc;
  record("same-seed trace identity", ok);

  const auto dir = fs::temp_directory_path() / "cmr_acceptance_ckpt";
  fs::remove_all(dir);
  save_checkpoint(snapshot(*m1), (dir / "a").string());
  save_checkpoint(load_checkpoint((dir / "a").string()), (dir / "b").string());
  auto bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  record("checkpoint round trip identity",
         bytes(dir / "a" / "params.bin") == bytes(dir / "b" / "params.bin") &&
             bytes(dir / "a" / "manifest.json") == bytes(dir / "b" / "manifest.json"));

  Outcome o;
  o.pass = true;
  std::vector<std::string> failed;
  for (const auto& [name, good] : checks) {
    o.data[name] = good;
    if (!good) failed.push_back(name);
  }
  o.pass = failed.empty();
  o.detail = std::to_string(checks.size() - failed.size()) + "/" + std::to_string(checks.size()) +
             " invariants hold";
  for (const auto& f : failed) o.detail += ", broken: " + f;
  return o;
}

// ---------------------------------------------------------------------------
// Learning, ablation and transfer share the nlvr_like runs.

struct NlvrRuns {
  std::map<Variant, std::vector<RunOutcome>> outcomes;
  std::map<Variant, std::vector<double>> seconds;
  std::vector<Checkpoint> full_checkpoints;
  std::vector<double> majority;
};

NlvrRuns& nlvr_runs(const std::vector<Variant>& variants) {
  static NlvrRuns runs;
  for (Variant v : variants) {
    if (runs.outcomes.count(v)) continue;
    for (int seed = 1; seed <= kSeeds; ++seed) {
      const auto data = nlvr_data(seed);
      if (v == Variant::full) runs.majority.push_back(summarize(data.heldout).majority_fraction());
      std::optional<CmrModel<float>> model;
      const std::string tag(to_string(v));
      const auto t0 = Clock::now();
      auto out = train_run<float>(nlvr_config(seed), TaskKind::nlvr_like, v, data.train,
                                  data.heldout, nullptr, &model, [&](const EpochMetrics& m) {
                                    log_epoch(tag.c_str(), seed, m);
                                    return true;
                                  });
      runs.seconds[v].push_back(seconds_since(t0));
      if (v == Variant::full) runs.full_checkpoints.push_back(snapshot(*model));
      runs.outcomes[v].push_back(std::move(out));
    }
  }
  return runs;
}

Outcome learning() {
  auto& runs = nlvr_runs({Variant::full});
  Outcome o;
  int good = 0;
  double slowest = 0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (int s = 0; s < kSeeds; ++s) {
    const auto& trace = runs.outcomes[Variant::full][static_cast<std::size_t>(s)].result.trace;
    std::optional<int> reached;
    for (const auto& m : trace)
      if (!reached && m.epoch <= kEpochs && m.train_acc >= 0.9 && m.heldout_acc >= 0.8) reached = m.epoch;
    const double secs = runs.seconds[Variant::full][static_cast<std::size_t>(s)];
    slowest = std::max(slowest, secs);
    if (reached && secs < 900.0) ++good;
    per_seed.push_back({{"seed", s + 1},
                        {"epoch_reached", reached ? nlohmann::json(*reached) : nlohmann::json()},
                        {"final_train", trace.back().train_acc},
                        {"final_heldout", trace.back().heldout_acc},
                        {"seconds", secs},
                        {"majority", runs.majority[static_cast<std::size_t>(s)]}});
  }
  double majority = 0;
  for (double m : runs.majority) majority += m / kSeeds;
  o.pass = good >= 4;
  o.detail = std::to_string(good) + "/5 seeds reach train >= 0.90 and heldout >= 0.80 within " +
             std::to_string(kEpochs) + " epochs; majority class " + fmt("%.3f", majority) +
             "; slowest run " + fmt("%.0f", slowest) + "s (< 900s)";
  o.data = {{"seeds", per_seed}};
  return o;
}

Outcome ablation() {
  const std::vector<Variant> variants{Variant::full, Variant::no_rel, Variant::no_entity,
                                      Variant::no_xmod, Variant::no_smod};
  auto& runs = nlvr_runs(variants);
  std::map<Variant, double> mean;
  Outcome o;
  for (Variant v : variants) {
    double total = 0;
    nlohmann::json finals = nlohmann::json::array();
    for (const auto& r : runs.outcomes[v]) {
      total += r.final_heldout_accuracy;
      finals.push_back(r.final_heldout_accuracy);
    }
    mean[v] = total / kSeeds;
    o.data[std::string(to_string(v))] = {{"mean_heldout", mean[v]}, {"per_seed", finals}};
  }
  const double full = mean[Variant::full], no_rel = mean[Variant::no_rel],
               no_entity = mean[Variant::no_entity], no_xmod = mean[Variant::no_xmod];
  o.pass = full > no_rel && no_rel >= no_entity && no_entity > no_xmod && full - no_xmod >= 0.10;
  o.detail = "heldout full " + fmt("%.3f", full) + ", no_rel " + fmt("%.3f", no_rel) +
             ", no_entity " + fmt("%.3f", no_entity) + ", no_xmod " + fmt("%.3f", no_xmod) +
             " (no_smod " + fmt("%.3f", mean[Variant::no_smod]) + ", unordered); gap " +
             fmt("%.1f", 100 * (full - no_xmod)) + " points (>= 10)";
  return o;
}

Outcome transfer() {
  auto& runs = nlvr_runs({Variant::full});
  Outcome o;
  double sum_random = 0, sum_transfer = 0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (int seed = 1; seed <= kSeeds; ++seed) {
    RunConfig c = RunConfig::desk();
    c.task = "vqa_like";
    c.seed = static_cast<std::uint64_t>(seed);
    c.epochs = kEpochs;
    c.stop_at_threshold = true;
    auto spec = generator_spec_for(c, TaskKind::vqa_like, static_cast<std::uint64_t>(100 + seed));
    spec.n_examples = kTrain + kHeldout;
    spec.heldout_fraction = static_cast<double>(kHeldout) / spec.n_examples;
    const auto data = generate(spec);
    // Runs that never reach the threshold count as kEpochs + 1.
    auto epochs = [&](const Checkpoint* init, const char* tag) {
      const auto r = train_run<float>(c, TaskKind::vqa_like, Variant::full, data.train,
                                      data.heldout, init, nullptr, [&](const EpochMetrics& m) {
                                        log_epoch(tag, seed, m);
                                        return true;
                                      });
      return r.result.epochs_to_threshold.value_or(kEpochs + 1);
    };
    const int random_init = epochs(nullptr, "vqa random");
    const int from_nlvr =
        epochs(&runs.full_checkpoints[static_cast<std::size_t>(seed - 1)], "vqa transfer");
    sum_random += random_init;
    sum_transfer += from_nlvr;
    per_seed.push_back({{"seed", seed}, {"random", random_init}, {"transfer", from_nlvr}});
  }
  const double random_mean = sum_random / kSeeds, transfer_mean = sum_transfer / kSeeds;
  o.pass = transfer_mean < random_mean;
  o.detail = "vqa_like epochs to 0.80 heldout (sustained 2): from nlvr_like checkpoint " +
             fmt("%.1f", transfer_mean) + " vs random init " + fmt("%.1f", random_mean) +
             " (mean of 5 seeds)";
  o.data = {{"seeds", per_seed}, {"random_mean", random_mean}, {"transfer_mean", transfer_mean}};
  return o;
}

Outcome dataset_oracle() {
  Outcome o;
  std::size_t total = 0, agree = 0;
  for (auto task : {TaskKind::nlvr_like, TaskKind::vqa_like}) {
    auto spec = generator_spec_for(RunConfig::desk(), task, 2024);
    spec.n_examples = 10000;
    const auto data = generate(spec);
    for (const auto* pair : {&data.train, &data.heldout}) {
      const auto& traces = pair == &data.train ? data.train_trace : data.heldout_trace;
      for (std::size_t i = 0; i < pair->size(); ++i) {
        ++total;
        if (brute_force_label(traces[i]) == pair->examples[i].label) ++agree;
      }
    }
  }
  o.pass = total == 20000 && agree == total;
  o.detail = std::to_string(agree) + "/" + std::to_string(total) +
             " labels match the brute-force checker (10,000 per task)";
  o.data = {{"total", total}, {"agree", agree}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) != "--only") continue;
    std::stringstream ss(argv[i + 1]);
    std::string item;
    while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"op gradient oracle", op_gradients},
      {"full-model gradient check", model_gradient},
      {"structural counts", structure},
      {"invariant suite", invariants},
      {"learning check", learning},
      {"ablation ordering", ablation},
      {"transfer check", transfer},
      {"dataset oracle", dataset_oracle},
  };
  std::vector<std::string> lines;
  nlohmann::json report = nlohmann::json::object();
  bool all = true;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    all = all && o.pass;
    const std::string line = "CRITERION " + std::to_string(id) + " " + (o.pass ? "PASS" : "FAIL") +
                             "  " + criteria[k].first + ": " + o.detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    lines.push_back(line);
    report[std::to_string(id)] = {{"name", criteria[k].first}, {"pass", o.pass},
                                  {"detail", o.detail}, {"data", o.data}};
  }
  std::printf("\n==== summary ====\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  std::ofstream("acceptance_report.json") << report.dump(2) << '\n';
  return all ? 0 : 1;
}
