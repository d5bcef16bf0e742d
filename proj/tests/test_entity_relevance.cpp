// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "cmr/entity_relevance.hpp"
#include "cmr/grad_check.hpp"

using namespace cmr;
using TD = Tensor<double>;

namespace {

EntitySet<double> entities(const TD& reps, int source, Mask mask = {}) {
  if (mask.empty()) mask.assign(reps.cols(), 1);
  return {source == 0 ? Modality::text : Modality::visual, source, reps, mask};
}

TD random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  TD t({r, c});
  for (auto& v : t.mutable_values()) v = rng.normal();
  return t;
}

RelevanceCnn<double> small_cnn(ParameterStore<double>& store, std::size_t h, std::size_t w,
                               std::size_t d) {
  return make_relevance_cnn(store, "cnn", h, w, 2, 3, 3, 6, d);
}

}  // namespace

TEST_CASE("affinity") {
  SECTION("orthonormal sets give the identity") {
    const auto e = TD::matrix({{1, 0}, {0, 1}});
    const auto A = affinity(entities(e, 0), entities(e, 1));
    CHECK(A.A.data() == std::vector<double>{1, 0, 0, 1});
    CHECK(A.pair == SourcePair{0, 1});
    CHECK(A.width == 2);
  }
  SECTION("swapped basis") {
    const auto A = affinity(entities(TD::matrix({{1, 0}, {0, 1}}), 0),
                            entities(TD::matrix({{0, 1}, {1, 0}}), 1));
    CHECK(A.A.data() == std::vector<double>{0, 1, 1, 0});
  }
  SECTION("swapping the sides transposes the grid exactly") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto a = entities(random_matrix(4, 3, seed), 0);
      const auto b = entities(random_matrix(4, 5, seed + 100), 1);
      CHECK(affinity(b, a).A.data() == transpose(affinity(a, b).A).data());
    }
  }
  SECTION("a shared rotation leaves the grid unchanged") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const double t = 0.3 + static_cast<double>(seed);
      const auto Q = TD::matrix({{std::cos(t), -std::sin(t), 0},
                                 {std::sin(t), std::cos(t), 0},
                                 {0, 0, 1}});
      const auto a = random_matrix(3, 4, seed), b = random_matrix(3, 2, seed + 50);
      const auto A1 = affinity(entities(a, 0), entities(b, 1)).A;
      const auto A2 = affinity(entities(matmul(Q, a), 0), entities(matmul(Q, b), 1)).A;
      for (std::size_t i = 0; i < A1.numel(); ++i) CHECK(std::abs(A1[i] - A2[i]) <= 1e-9);
    }
  }
  SECTION("different widths") {
    CHECK_THROWS_AS(affinity(entities(TD({3, 2}), 0), entities(TD({4, 2}), 1)), DimensionError);
  }
}

TEST_CASE("entity relevance feature") {
  ParameterStore<double> store(4);
  const std::size_t d = 5;
  const auto cnn = small_cnn(store, 4, 6, d);
  const auto a = entities(random_matrix(d, 4, 1), 0, {1, 1, 1, 0});
  const auto b = entities(random_matrix(d, 6, 2), 1);

  SECTION("one d-vector per pair") {
    const auto f = entity_relevance_feature(affinity(a, b), cnn);
    CHECK(f.phi.shape() == Shape{d});
    CHECK(f.kind == FeatureKind::entity);
    CHECK(f.label() == "entity:text-img1");
  }
  SECTION("a zero grid gives the bias response") {
    auto A = affinity(a, b);
    A.row_mask.assign(4, 0);
    CHECK(entity_relevance_feature(A, cnn).phi.data() == cnn(TD({4, 6})).data());
  }
  SECTION("masked entities do not matter") {
    auto changed = a;
    changed.representations = random_matrix(d, 4, 1);
    for (std::size_t r = 0; r < d; ++r) changed.representations.mutable_values()[r * 4 + 3] = 9.0;
    CHECK(entity_relevance_feature(affinity(a, b), cnn).phi.data() ==
          entity_relevance_feature(affinity(changed, b), cnn).phi.data());
  }
  SECTION("wrong grid size") {
    CHECK_THROWS_AS(entity_relevance_feature(affinity(b, a), cnn), DimensionError);
  }
  SECTION("gradient") {
    std::vector<TD> inputs{a.representations, b.representations};
    for (const auto& p : store.trainable()) inputs.push_back(p);
    const auto w = random_matrix(d, 1, 3);
    const auto rep = grad_check(
        "entity feature",
        [&] {
          return sum(mul(entity_relevance_feature(affinity(a, b), cnn).phi, reshape(w, {d})));
        },
        inputs, 1e-6, 1e-4);
    INFO(rep.max_relative_error);
    CHECK(rep.passed);
  }
}

TEST_CASE("entity pair enumeration") {
  CHECK(enumerate_entity_pairs(TaskKind::vqa_like) == std::vector<SourcePair>{{0, 1}});
  CHECK(enumerate_entity_pairs(TaskKind::nlvr_like) ==
        std::vector<SourcePair>{{0, 1}, {0, 2}, {1, 2}});
  CHECK_THROWS_AS(enumerate_entity_pairs(static_cast<TaskKind>(9)), ConfigError);
}
