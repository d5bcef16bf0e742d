// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cmr/config.hpp"
#include "cmr/experiment.hpp"

using namespace cmr;
using nlohmann::json;

TEST_CASE("run config defaults") {
  const RunConfig c;
  CHECK(c.n_text == 20);
  CHECK(c.n_visual == 36);
  CHECK(c.top_k == 10);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.999);
  CHECK(c.epsilon == 1e-6);
  CHECK(c.weight_decay == 0.01);
  CHECK(c.max_grad_norm == 1.0);
  CHECK(c.batch_size == 32);
  CHECK(detail::pair_count(c.n_text) == 190);
  CHECK_NOTHROW(validate(RunConfig::desk()));
  CHECK_NOTHROW(validate(RunConfig::tiny()));
}

TEST_CASE("config json") {
  const auto desk = RunConfig::desk();
  CHECK(to_json(config_from_json(to_json(desk))) == to_json(desk));

  SECTION("overrides apply on top of a base") {
    const auto c = config_from_json({{"epochs", 3}, {"task", "vqa_like"}}, desk);
    CHECK(c.epochs == 3);
    CHECK(c.task == "vqa_like");
    CHECK(c.d == desk.d);
  }
  SECTION("rejections") {
    CHECK_THROWS_WITH(config_from_json({{"dd", 3}}), Catch::Matchers::ContainsSubstring("dd"));
    CHECK_THROWS_AS(config_from_json({{"d", 0}}), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"d", 1.5}}), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"top_k", 16}}, desk), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"task", "captioning"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::array()), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }
  SECTION("architecture diff ignores optimizer and head fields") {
    auto other = desk;
    other.learning_rate = 0.5;
    other.n_classes = 9;
    other.head_hidden = 3;
    CHECK(architecture_diff(desk, other).empty());
    other.top_k = 3;
    CHECK(architecture_diff(desk, other) == std::vector<std::string>{"top_k: 4 != 3"});
  }
}

TEST_CASE("shipped config files load") {
  for (const char* name : {"desk.json", "tiny.json"}) {
    const auto path = std::filesystem::path(CMR_SOURCE_DIR) / "configs" / name;
    INFO(path.string());
    CHECK_NOTHROW(load_config(path.string(), RunConfig::desk()));
  }
  CHECK(to_json(load_config((std::filesystem::path(CMR_SOURCE_DIR) / "configs/desk.json").string())) ==
        to_json(RunConfig::desk()));
}

TEST_CASE("generated data fits the config it came from") {
  for (auto task : {TaskKind::nlvr_like, TaskKind::vqa_like}) {
    for (const auto& c : {RunConfig::desk(), RunConfig::tiny()}) {
      auto spec = generator_spec_for(c, task, 1);
      spec.n_examples = 20;
      const auto data = generate(spec);
      CmrModel<float> m(c, task);
      CHECK_NOTHROW(check_dataset(m, data.train));
      for (const auto& ex : data.train.examples) CHECK_NOTHROW(m.check_example(ex));
    }
  }
}

TEST_CASE("task and variant names") {
  CHECK(parse_task("nlvr_like") == TaskKind::nlvr_like);
  CHECK(parse_task("vqa_like") == TaskKind::vqa_like);
  CHECK(parse_task("vqa") == TaskKind::vqa_like);
  CHECK_THROWS_AS(parse_task("captioning"), ConfigError);
  CHECK(image_count(TaskKind::nlvr_like) == 2);
  CHECK(image_count(TaskKind::vqa_like) == 1);
}
