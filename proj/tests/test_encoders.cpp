// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "cmr/encoders.hpp"
#include "cmr/optimizer.hpp"

using namespace cmr;
using TD = Tensor<double>;

namespace {

struct Encoders {
  RunConfig config = RunConfig::tiny();
  ParameterStore<double> store{3};
  TextEncoder<double> text;
  VisualEncoder<double> visual;

  Encoders() {
    text = make_text_encoder(store, config, true);
    visual = make_visual_encoder(store, config, true);
  }

  TD rois(std::uint64_t seed) const {
    Rng rng(seed);
    TD t({static_cast<std::size_t>(config.n_visual), static_cast<std::size_t>(config.d_raw_visual)});
    for (auto& v : t.mutable_values()) v = rng.normal();
    return t;
  }
};

bool all_finite(const TD& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("encode_text") {
  Encoders e;
  const auto n = static_cast<std::size_t>(e.config.n_text);

  SECTION("empty input is fully masked") {
    const auto s = encode_text({}, e.text);
    CHECK(s.active() == 0);
    CHECK(s.size() == n);
    CHECK(s.modality == Modality::text);
  }
  SECTION("deterministic") {
    const auto a = encode_text({1, 2, 3}, e.text);
    const auto b = encode_text({1, 2, 3}, e.text);
    CHECK(a.representations.data() == b.representations.data());
    CHECK(a.representations.shape() == Shape{static_cast<std::size_t>(e.config.d), n});
  }
  SECTION("padding content does not reach real positions") {
    const auto a = encode_text({4, 5}, e.text);
    // Perturb what padded slots carry by changing their position rows.
    auto pos = e.text.position.mutable_values();
    const auto raw = e.text.position.cols();
    for (std::size_t i = 2; i < n; ++i)
      for (std::size_t k = 0; k < raw; ++k) pos[i * raw + k] += 3.0;
    const auto b = encode_text({4, 5}, e.text);
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t r = 0; r < a.representations.rows(); ++r)
        CHECK(a.representations.at(r, j) == Catch::Approx(b.representations.at(r, j)).margin(1e-12));
  }
  SECTION("errors and truncation") {
    CHECK_THROWS_AS(encode_text({e.config.vocab_size}, e.text), InputError);
    CHECK_THROWS_AS(encode_text({-1}, e.text), InputError);
    std::vector<int> long_input(n + 5, 1);
    const auto s = encode_text(long_input, e.text);
    CHECK(s.size() == n);
    CHECK(s.active() == n);
  }
}

TEST_CASE("encode_visual") {
  Encoders e;
  const auto x = e.rois(1);
  SECTION("source id changes the representation") {
    const auto a = encode_visual(x, 1, e.visual);
    const auto b = encode_visual(x, 2, e.visual);
    CHECK(a.representations.data() != b.representations.data());
    CHECK(a.source_id == 1);
    CHECK(b.source_id == 2);
  }
  SECTION("zero features stay finite") {
    TD zeros(x.shape());
    CHECK(all_finite(encode_visual(zeros, 1, e.visual).representations));
  }
  SECTION("deterministic") {
    CHECK(encode_visual(x, 1, e.visual).representations.data() ==
          encode_visual(x, 1, e.visual).representations.data());
  }
  SECTION("bad widths") {
    CHECK_THROWS_AS(encode_visual(TD({x.rows(), x.cols() + 1}), 1, e.visual), DimensionError);
    CHECK_THROWS_AS(encode_visual(TD({x.rows() + 1, x.cols()}), 1, e.visual), DimensionError);
  }
  SECTION("entities are contextualized") {
    const auto a = encode_visual(x, 1, e.visual);
    TD y(x.shape(), x.data());
    for (std::size_t k = 0; k < y.cols(); ++k) y.mutable_values()[1 * y.cols() + k] = 0.0;
    const auto b = encode_visual(y, 1, e.visual);
    double delta = 0;
    for (std::size_t r = 0; r < a.representations.rows(); ++r)
      delta += std::abs(a.representations.at(r, 0) - b.representations.at(r, 0));
    CHECK(delta > 1e-9);
  }
}

TEST_CASE("frozen tables survive optimizer steps bitwise") {
  Encoders e;
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, entry] : e.store.entries())
    if (entry.kind == ParamKind::frozen) before[name] = entry.tensor.data();
  REQUIRE(before.size() == 3);
  Adam<double> adam(AdamOptions{});
  for (int step = 0; step < 3; ++step) {
    e.store.zero_grad();
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      const auto s = encode_text({1, 2}, e.text);
      const auto v = encode_visual(e.rois(step), 1, e.visual);
      tape.backward(add(sum(s.representations), sum(mul(v.representations, v.representations))));
    }
    adam.step(e.store);
  }
  for (const auto& [name, values] : before) CHECK(e.store.at(name).data() == values);
  CHECK(adam.state().count("frozen.text_embedding") == 0);
}
