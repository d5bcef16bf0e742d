// SPDX-License-Identifier: Apache-2.0
//
// cmr: generate synthetic data, train, evaluate, ablate, gradient-check and
// dump affinities. Exit codes: 0 success, 1 input or config error, 2 failed
// check.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cmr/cmr.hpp"
#include "cmr/experiment.hpp"
#include "cmr/op_suite.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace cmr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitCheck = 2;

struct CommonRun {
  std::string config_path;
  std::string data;
  std::string task;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

RunConfig resolve_config(const CommonRun& run) {
  RunConfig c = run.config_path.empty() ? RunConfig::desk() : load_config(run.config_path, RunConfig::desk());
  if (!run.task.empty()) c.task = std::string(to_string(parse_task(run.task)));
  if (run.seed) c.seed = *run.seed;
  if (run.epochs) c.epochs = *run.epochs;
  if (!run.data.empty()) c.data = run.data;
  validate(c);
  return c;
}

/// A dataset path is a .jsonl file or a directory holding train.jsonl and
/// heldout.jsonl.
std::pair<Dataset, Dataset> load_split(const std::string& path) {
  if (path.empty()) throw InputError("--data is required");
  if (!fs::is_directory(path)) throw InputError("data directory " + path + " does not exist");
  return {read_jsonl((fs::path(path) / "train.jsonl").string()),
          read_jsonl((fs::path(path) / "heldout.jsonl").string())};
}

Dataset load_eval_set(const std::string& path) {
  if (fs::is_directory(path)) return read_jsonl((fs::path(path) / "heldout.jsonl").string());
  return read_jsonl(path);
}

void print_epoch(const EpochMetrics& m) {
  std::printf("epoch %3d  loss %.4f  train %.3f  heldout %.3f\n", m.epoch, m.train_loss,
              m.train_acc, m.heldout_acc);
  std::fflush(stdout);
}

int cmd_gen_data(const std::string& task, std::uint64_t seed, int n, const std::string& out,
                 const std::string& config_path, std::optional<std::uint64_t> world_seed) {
  const RunConfig c = config_path.empty() ? RunConfig::desk() : load_config(config_path, RunConfig::desk());
  GeneratorSpec spec = generator_spec_for(c, parse_task(task), seed);
  spec.n_examples = n;
  if (world_seed) spec.world_seed = *world_seed;
  const auto data = generate(spec);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw InputError("cannot create " + out + ": " + ec.message());
  write_jsonl((fs::path(out) / "train.jsonl").string(), data.train);
  write_jsonl((fs::path(out) / "heldout.jsonl").string(), data.heldout);
  nlohmann::json summary;
  summary["task"] = std::string(to_string(spec.task));
  summary["seed"] = spec.seed;
  for (const auto& [name, set] : {std::pair{"train", &data.train}, std::pair{"heldout", &data.heldout}}) {
    const auto s = summarize(*set);
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [label, count] : s.label_counts) labels[std::to_string(label)] = count;
    summary[name] = {{"count", s.count}, {"labels", labels}, {"majority", s.majority_fraction()}};
  }
  std::cout << summary.dump(2) << '\n';
  return kExitOk;
}

int train_and_save(const RunConfig& c, Variant variant, const std::string& init,
                   const std::string& out) {
  const auto [train, heldout] = load_split(c.data);
  const TaskKind task = parse_task(c.task);
  std::optional<Checkpoint> ck;
  if (!init.empty()) ck = load_checkpoint(init);
  std::optional<CmrModel<float>> model;
  const auto t0 = std::chrono::steady_clock::now();
  auto outcome = train_run<float>(c, task, variant, train, heldout, ck ? &*ck : nullptr, &model,
                                  [](const EpochMetrics& m) {
                                    print_epoch(m);
                                    return true;
                                  });
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (ck) {
    std::printf("initialized from %s: %zu loaded, %zu head parameters reinitialized\n",
                init.c_str(), outcome.init.loaded.size(), outcome.init.reinitialized.size());
  }
  const auto ett = outcome.result.epochs_to_threshold;
  std::printf("variant %s  final train %.3f  heldout %.3f  epochs_to_threshold %s  %.1fs\n",
              std::string(to_string(variant)).c_str(), outcome.final_train_accuracy,
              outcome.final_heldout_accuracy, ett ? std::to_string(*ett).c_str() : "none", secs);
  if (!out.empty()) {
    nlohmann::json prov = {{"data", c.data}, {"init", init}};
    save_checkpoint(snapshot(*model, prov), (fs::path(out) / "checkpoint").string());
    write_metrics_jsonl((fs::path(out) / "metrics.jsonl").string(), outcome.result.trace);
    nlohmann::json summary = {{"variant", std::string(to_string(variant))},
                              {"final_train_acc", outcome.final_train_accuracy},
                              {"final_heldout_acc", outcome.final_heldout_accuracy},
                              {"epochs_to_threshold", ett ? nlohmann::json(*ett) : nlohmann::json()},
                              {"seconds", secs}};
    std::ofstream((fs::path(out) / "summary.json").string()) << summary.dump(2) << '\n';
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data) {
  const auto ck = load_checkpoint(ckpt);
  const auto model = model_from_checkpoint<float>(ck);
  const auto set = load_eval_set(data);
  const double acc = evaluate(model, set);
  std::printf("accuracy %.4f (%zu examples)\n", acc, set.size());
  return kExitOk;
}

int cmd_gradcheck(const std::string& level, int seeds) {
  if (level == "ops") {
    const auto reports = run_op_checks(seeds);
    int failed = 0;
    double worst = 0;
    for (const auto& r : reports) {
      worst = std::max(worst, r.max_relative_error);
      if (!r.passed) {
        ++failed;
        std::printf("FAIL %s  max relative error %.3g\n", r.op_name.c_str(), r.max_relative_error);
      }
    }
    std::printf("%zu op checks, %d failed, worst relative error %.3g (tolerance %.0e)\n",
                reports.size(), failed, worst, kOpTolerance);
    return failed ? kExitCheck : kExitOk;
  }
  if (level == "model") {
    int failed = 0;
    for (TaskKind task : {TaskKind::nlvr_like, TaskKind::vqa_like}) {
      const auto r = run_model_check(RunConfig::tiny(), task);
      std::printf("%s %s  %zu parameters  max relative error %.3g (tolerance %.0e)\n",
                  r.passed ? "PASS" : "FAIL", r.op_name.c_str(), r.per_element_errors.size(),
                  r.max_relative_error, kModelTolerance);
      if (!r.passed) ++failed;
    }
    return failed ? kExitCheck : kExitOk;
  }
  throw InputError("unknown gradcheck level '" + level + "' (expected ops or model)");
}

int cmd_dump(const std::string& ckpt, const std::string& data, const std::string& example,
             const std::string& out) {
  const auto ck = load_checkpoint(ckpt);
  const auto model = model_from_checkpoint<float>(ck);
  const auto set = load_eval_set(data);
  const SyntheticExample* found = nullptr;
  for (const auto& ex : set.examples)
    if (ex.id == example) found = &ex;
  if (!found && !example.empty() &&
      example.find_first_not_of("0123456789") == std::string::npos) {
    const auto index = std::stoul(example);
    if (index < set.size()) found = &set.examples[index];
  }
  if (!found) throw InputError("no example '" + example + "' in " + data);
  for (const auto& name : dump_example(model, *found, out)) std::printf("%s\n", name.c_str());
  return kExitOk;
}

void add_run_options(CLI::App* cmd, CommonRun& run) {
  cmd->add_option("--config", run.config_path, "JSON run configuration (desk defaults if absent)");
  cmd->add_option("--data", run.data, "directory with train.jsonl and heldout.jsonl");
  cmd->add_option("--task", run.task, "nlvr_like or vqa_like");
  cmd->add_option("--seed", run.seed, "model and shuffle seed");
  cmd->add_option("--epochs", run.epochs, "training epochs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality relevance on synthetic multimodal tasks"};
  app.require_subcommand(1);

  std::string task = "nlvr_like", out, config_path;
  std::uint64_t seed = 7;
  std::optional<std::uint64_t> world_seed;
  int n = 2500;
  auto* gen = app.add_subcommand("gen-data", "write train.jsonl and heldout.jsonl");
  gen->add_option("--task", task, "nlvr_like or vqa_like");
  gen->add_option("--seed", seed, "data seed");
  gen->add_option("--n", n, "total examples, split 80/20");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--config", config_path, "run configuration whose extents the data must fit");
  gen->add_option("--world-seed", world_seed, "seed of the shared concept prototypes");

  CommonRun run;
  std::string init;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_run_options(train, run);
  train->add_option("--init", init, "checkpoint to start from; its task head is reinitialized");
  train->add_option("--out", out, "output directory");

  std::string ckpt, data;
  auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint on a dataset");
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data, "dataset .jsonl or directory (heldout.jsonl)")->required();

  std::string variant = "full";
  auto* ablate = app.add_subcommand("ablate", "train one architectural variant");
  add_run_options(ablate, run);
  ablate->add_option("--variant", variant, "full, no_smod, no_xmod, no_entity or no_rel")
      ->required();
  ablate->add_option("--out", out, "output directory");

  std::string level;
  int seeds = 10;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--level", level, "ops or model")->required();
  grad->add_option("--seeds", seeds, "input draws per op");

  std::string example;
  auto* dump = app.add_subcommand("dump-affinity", "write affinity and ranking CSVs of one example");
  dump->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  dump->add_option("--data", data, "dataset .jsonl or directory (heldout.jsonl)")->required();
  dump->add_option("--example", example, "example id or index")->required();
  dump->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*gen) return cmd_gen_data(task, seed, n, out, config_path, world_seed);
    if (*train) return train_and_save(resolve_config(run), Variant::full, init, out);
    if (*ablate) return train_and_save(resolve_config(run), parse_variant(variant), "", out);
    if (*eval) return cmd_eval(ckpt, data);
    if (*grad) return cmd_gradcheck(level, seeds);
    if (*dump) return cmd_dump(ckpt, data, example, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
  } catch (const SchemaError& e) {
    std::cerr << "bad input file: " << e.what() << '\n';
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
  } catch (const DimensionError& e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return kExitInput;
}
