// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cmr/experiment.hpp"
#include "cmr/grad_check.hpp"
#include "cmr/op_suite.hpp"

using namespace cmr;
namespace fs = std::filesystem;
using TD = Tensor<double>;

namespace {

GeneratedData tiny_data(TaskKind task, int n, std::uint64_t seed = 3) {
  auto spec = generator_spec_for(RunConfig::tiny(), task, seed);
  spec.n_examples = n;
  return generate(spec);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cmr_heads_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("forward shapes on the tiny config") {
  const auto c = RunConfig::tiny();
  const auto nlvr = tiny_data(TaskKind::nlvr_like, 10);
  CmrModel<double> m(c, TaskKind::nlvr_like);
  ForwardTrace<double> trace;
  const auto logits = m.forward(nlvr.train.examples[0], &trace);
  CHECK(trace.phi.numel() == 48);
  CHECK(logits.numel() == 1);
  CHECK(m.forward(nlvr.train.examples[0]).data() == logits.data());
  CHECK(trace.candidates.at(0).size() <= 6);
  CHECK(trace.rankings.size() == 3);

  const auto vqa = tiny_data(TaskKind::vqa_like, 10);
  CmrModel<double> v(c, TaskKind::vqa_like);
  ForwardTrace<double> vt;
  CHECK(v.forward(vqa.train.examples[0], &vt).numel() == static_cast<std::size_t>(c.n_classes));
  CHECK(vt.phi.numel() == 16);

  SECTION("task and size mismatches are rejected") {
    CHECK_THROWS_AS(m.forward(vqa.train.examples[0]), ConfigError);
    auto bad = nlvr.train.examples[0];
    bad.visual[1].pop_back();
    CHECK_THROWS_AS(m.forward(bad), DimensionError);
    auto label = vqa.train.examples[0];
    label.label = c.n_classes;
    CHECK_THROWS_AS(v.forward(label), InputError);
  }
}

TEST_CASE("losses") {
  CHECK(cross_entropy(TD::vector({0.2, 0.2, 0.2, 0.2}), 3).item() ==
        Catch::Approx(1.3862943611198906).margin(1e-12));
  CHECK(sigmoid_bce(TD::vector({0.0}), 0).item() == Catch::Approx(0.6931471805599453).margin(1e-12));
  CHECK(sigmoid_bce(TD::vector({0.0}), 1).item() == Catch::Approx(0.6931471805599453).margin(1e-12));
  const TD z = TD::vector({0.3, -1.1, 2.0, 0.5});
  CHECK(grad_check("ce", [&] { return cross_entropy(z, 2); }, {z}, 1e-6, 1e-6).passed);
  const TD s = TD::vector({-0.7});
  CHECK(grad_check("bce", [&] { return sigmoid_bce(s, 1); }, {s}, 1e-6, 1e-6).passed);
  CHECK_THROWS(cross_entropy(z, 4));
  CHECK_THROWS(sigmoid_bce(s, 2));
}

TEST_CASE("adam update") {
  AdamOptions opt;
  SECTION("zero gradient and no decay leave parameters alone") {
    opt.weight_decay = 0;
    std::vector<double> p{0.5, -2.0};
    const std::vector<double> g{0, 0};
    AdamMoments<double> st;
    for (long t = 1; t <= 3; ++t) adam_update<double>(p, g, st, opt, t, true);
    CHECK(p == std::vector<double>{0.5, -2.0});
  }
  SECTION("zero gradient with decay shrinks by 1 - lr * wd per step") {
    std::vector<double> p{0.5};
    const std::vector<double> g{0};
    AdamMoments<double> st;
    adam_update<double>(p, g, st, opt, 1, true);
    CHECK(p[0] == Catch::Approx(0.5 * (1 - 1e-6)).epsilon(1e-14));
    adam_update<double>(p, g, st, opt, 2, false);
    CHECK(p[0] == Catch::Approx(0.5 * (1 - 1e-6)).epsilon(1e-14));
  }
  SECTION("first step closed form") {
    opt.weight_decay = 0;
    for (double g0 : {0.37, -4.0, 1e-3}) {
      std::vector<double> p{1.0};
      const std::vector<double> g{g0};
      AdamMoments<double> st;
      adam_update<double>(p, g, st, opt, 1, true);
      // m_hat = g, v_hat = g^2 after bias correction.
      CHECK(std::abs(p[0] - (1.0 - 1e-4 * g0 / (std::abs(g0) + 1e-6))) <= 1e-10);
    }
  }
  SECTION("errors") {
    std::vector<double> p{1.0, 2.0};
    const std::vector<double> g{1.0};
    AdamMoments<double> st;
    CHECK_THROWS_AS(adam_update<double>(p, g, st, opt, 1, true), DimensionError);
  }
}

TEST_CASE("optimizer over a store") {
  ParameterStore<double> store(1);
  store.add("frozen.table", {3}, Init::normal, ParamKind::frozen);
  const auto w = store.add("w", {4}, Init::normal, ParamKind::weight);
  const auto g = store.add("ln.gain", {4}, Init::ones, ParamKind::norm);
  for (auto& v : w.grad_buffer()) v = 3.0;
  for (auto& v : g.grad_buffer()) v = 4.0;
  const auto frozen_before = store.at("frozen.table").data();
  const auto gain_before = g.data();

  SECTION("clipping bounds the global norm") {
    const double before = Adam<double>::clip_grad_norm(store, 1.0);
    CHECK(before == Catch::Approx(10.0));
    CHECK(Adam<double>::global_grad_norm(store) <= 1.0 + 1e-9);
  }
  SECTION("frozen parameters get no state and norm params no decay") {
    AdamOptions opt;
    opt.weight_decay = 0.5;
    Adam<double> adam(opt);
    store.zero_grad();
    adam.step(store);
    CHECK(adam.state().count("frozen.table") == 0);
    CHECK(adam.state().count("w") == 1);
    CHECK(store.at("frozen.table").data() == frozen_before);
    CHECK(g.data() == gain_before);
    CHECK(adam.steps() == 1);
  }
}

TEST_CASE("epochs to threshold") {
  auto trace = [](std::vector<double> held) {
    std::vector<EpochMetrics> t;
    for (std::size_t i = 0; i < held.size(); ++i) t.push_back({static_cast<int>(i + 1), 0, 0, held[i]});
    return t;
  };
  CHECK(epochs_to_threshold(trace({0.5, 0.85, 0.7, 0.81, 0.9}), 0.8, 2) == 4);
  CHECK(epochs_to_threshold(trace({0.9, 0.9}), 0.8, 2) == 1);
  CHECK_FALSE(epochs_to_threshold(trace({0.9, 0.1, 0.9}), 0.8, 2).has_value());
  CHECK(epochs_to_threshold(trace({0.1, 0.8}), 0.8, 1) == 2);
}

TEST_CASE("training") {
  auto c = RunConfig::tiny();
  c.epochs = 3;
  c.batch_size = 8;
  c.learning_rate = 1e-3;
  const auto data = tiny_data(TaskKind::nlvr_like, 40);

  SECTION("same seed, same trace") {
    const auto a = train_run<double>(c, TaskKind::nlvr_like, Variant::full, data.train, data.heldout);
    const auto b = train_run<double>(c, TaskKind::nlvr_like, Variant::full, data.train, data.heldout);
    REQUIRE(a.result.trace.size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
      CHECK(a.result.trace[e].train_loss == b.result.trace[e].train_loss);
      CHECK(a.result.trace[e].heldout_acc == b.result.trace[e].heldout_acc);
    }
  }
  SECTION("frozen tables are bitwise stable over three epochs") {
    CmrModel<double> m(c, TaskKind::nlvr_like);
    std::map<std::string, std::vector<double>> frozen;
    for (const auto& [name, e] : m.params().entries())
      if (e.kind == ParamKind::frozen) frozen[name] = e.tensor.data();
    Trainer<double> t(m, c);
    t.fit(data.train, data.heldout);
    for (const auto& [name, values] : frozen) CHECK(m.params().at(name).data() == values);
    for (const auto& [name, st] : t.optimizer().state()) CHECK(st.m.size() == m.params().at(name).numel());
  }
  SECTION("mismatched data") {
    const auto vqa = tiny_data(TaskKind::vqa_like, 10);
    CmrModel<double> m(c, TaskKind::nlvr_like);
    Trainer<double> t(m, c);
    CHECK_THROWS_AS(t.fit(vqa.train, vqa.heldout), ConfigError);
    CHECK_THROWS_AS(t.fit(Dataset{}, data.heldout), InputError);
  }
}

TEST_CASE("checkpoints") {
  const auto c = RunConfig::tiny();
  CmrModel<float> m(c, TaskKind::nlvr_like);
  const auto dir = scratch("ckpt");

  SECTION("save, load, save is byte identical") {
    save_checkpoint(snapshot(m, {{"seed", 1}}), (dir / "a").string());
    save_checkpoint(load_checkpoint((dir / "a").string()), (dir / "b").string());
    CHECK(read_bytes(dir / "a" / "params.bin") == read_bytes(dir / "b" / "params.bin"));
    CHECK(read_bytes(dir / "a" / "manifest.json") == read_bytes(dir / "b" / "manifest.json"));
    const auto manifest = nlohmann::json::parse(read_bytes(dir / "a" / "manifest.json"));
    std::vector<std::string> names;
    for (const auto& p : manifest.at("parameters")) names.push_back(p.at("name"));
    CHECK(std::is_sorted(names.begin(), names.end()));
    CHECK(fs::file_size(dir / "a" / "params.bin") == 4 * (m.params().trainable_count() +
                                                          [&] {
                                                            std::size_t n = 0;
                                                            for (const auto& [k, e] : m.params().entries())
                                                              if (e.kind == ParamKind::frozen) n += e.tensor.numel();
                                                            return n;
                                                          }()));
    const auto back = model_from_checkpoint<float>(load_checkpoint((dir / "a").string()));
    for (const auto& [name, e] : m.params().entries()) CHECK(back.params().at(name).data() == e.tensor.data());
  }
  SECTION("transfer reinitializes exactly the head") {
    auto trained = snapshot(m);
    for (auto& [name, p] : trained.params)
      for (auto& v : p.values) v += 0.25f;
    CmrModel<float> vqa(c, TaskKind::vqa_like);
    CmrModel<float> fresh(c, TaskKind::vqa_like);
    const auto report = load_into(vqa, trained, true);
    CHECK(report.reinitialized == vqa.head_parameter_names());
    for (const auto& [name, e] : vqa.params().entries()) {
      const bool head = name.rfind("head.", 0) == 0;
      if (head) {
        CHECK(e.tensor.data() == fresh.params().at(name).data());
      } else {
        CHECK(e.tensor.data() != fresh.params().at(name).data());
      }
    }
    CHECK_THROWS_AS(load_into(vqa, trained, false), ConfigError);
  }
  SECTION("architecture mismatch names the field") {
    auto other = c;
    other.d = 10;
    CmrModel<float> big(other, TaskKind::nlvr_like);
    try {
      load_into(big, snapshot(m), false);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("d: 8 != 10"));
    }
  }
  SECTION("missing checkpoint") {
    CHECK_THROWS_AS(load_checkpoint((dir / "nope").string()), InputError);
  }
}

TEST_CASE("full model gradient on the tiny config") {
  const auto rep = run_model_check(RunConfig::tiny(), TaskKind::nlvr_like, 1, kModelTolerance);
  INFO(rep.max_relative_error);
  CHECK(rep.passed);
}

TEST_CASE("ablation variants") {
  const auto c = RunConfig::tiny();
  for (auto v : {Variant::full, Variant::no_smod, Variant::no_xmod, Variant::no_entity, Variant::no_rel})
    CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("no_head"), ConfigError);
  CmrModel<double> no_smod(c, TaskKind::nlvr_like, Variant::no_smod);
  for (const auto& name : no_smod.params().names()) {
    CHECK(name.rfind("text.stack", 0) != 0);
    CHECK(name.rfind("visual.stack", 0) != 0);
  }
  CmrModel<double> no_xmod(c, TaskKind::nlvr_like, Variant::no_xmod);
  const auto data = tiny_data(TaskKind::nlvr_like, 5);
  ForwardTrace<double> trace;
  no_xmod.forward(data.train.examples[0], &trace);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(trace.aligned[k].representations.data() == trace.encoded[k].representations.data());
}
