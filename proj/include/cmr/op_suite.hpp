// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks for every differentiable op and for the whole
// model at the tiny setting. Each op is reduced to a scalar by a fixed random
// weighting of its output, so every output element contributes.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmr/grad_check.hpp"
#include "cmr/model.hpp"
#include "cmr/nn.hpp"
#include "cmr/ops.hpp"
#include "cmr/rng.hpp"

namespace cmr {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;
inline constexpr double kFiniteDifferenceStep = 1e-6;

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_values()) v = scale * rng.normal();
  return t;
}

/// sum(out * w) with w drawn from `seed`; the same w on every call.
inline Tensor<double> weighted_sum(const Tensor<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w(out.shape());
  for (auto& v : w.mutable_values()) v = rng.normal();
  return sum(mul(out, w));
}

inline Mask random_mask(Rng& rng, std::size_t n) {
  Mask m(n, 1);
  for (auto& b : m) b = rng.uniform() < 0.7 ? 1 : 0;
  m[rng.below(n)] = 1;
  return m;
}

}  // namespace detail

struct OpCase {
  std::string name;
  /// Builds inputs from the rng and returns the scalar function plus the
  /// tensors to perturb.
  std::function<std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>(Rng&)>
      build;
};

inline std::vector<OpCase> op_cases() {
  using detail::random_tensor;
  using detail::weighted_sum;
  using Fn = std::function<Tensor<double>()>;
  using In = std::vector<Tensor<double>>;
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, auto build) { cases.push_back({std::move(name), build}); };
  auto dim = [](Rng& r, std::size_t lo, std::size_t hi) { return lo + r.below(hi - lo + 1); };

  add_case("matmul", [=](Rng& r) {
    const auto m = dim(r, 2, 4), k = dim(r, 2, 4), n = dim(r, 2, 4);
    auto a = random_tensor(r, {m, k}), b = random_tensor(r, {k, n});
    return std::pair{Fn([=] { return weighted_sum(matmul(a, b), 1); }), In{a, b}};
  });
  add_case("transpose", [=](Rng& r) {
    auto a = random_tensor(r, {dim(r, 2, 4), dim(r, 2, 4)});
    return std::pair{Fn([=] { return weighted_sum(transpose(a), 2); }), In{a}};
  });
  add_case("outer_product", [=](Rng& r) {
    auto a = random_tensor(r, {dim(r, 2, 5)}), b = random_tensor(r, {dim(r, 2, 5)});
    return std::pair{Fn([=] { return weighted_sum(outer_product(a, b), 3); }), In{a, b}};
  });
  add_case("add", [=](Rng& r) {
    const Shape s{dim(r, 2, 4), dim(r, 2, 4)};
    auto a = random_tensor(r, s), b = random_tensor(r, s);
    return std::pair{Fn([=] { return weighted_sum(add(a, b), 4); }), In{a, b}};
  });
  add_case("scale", [=](Rng& r) {
    auto a = random_tensor(r, {dim(r, 2, 4), dim(r, 2, 4)});
    const double f = r.uniform(-2, 2);
    return std::pair{Fn([=] { return weighted_sum(scale(a, f), 5); }), In{a}};
  });
  add_case("relu", [=](Rng& r) {
    auto a = random_tensor(r, {dim(r, 2, 4), dim(r, 2, 4)});
    return std::pair{Fn([=] { return weighted_sum(relu(a), 6); }), In{a}};
  });
  add_case("add_bias", [=](Rng& r) {
    const auto rows = dim(r, 2, 4);
    auto x = random_tensor(r, {rows, dim(r, 2, 4)}), b = random_tensor(r, {rows});
    return std::pair{Fn([=] { return weighted_sum(add_bias(x, b), 7); }), In{x, b}};
  });
  add_case("scale_columns", [=](Rng& r) {
    const auto cols = dim(r, 2, 4);
    auto x = random_tensor(r, {dim(r, 2, 4), cols}), s = random_tensor(r, {cols});
    return std::pair{Fn([=] { return weighted_sum(scale_columns(x, s), 8); }), In{x, s}};
  });
  add_case("mask_zero", [=](Rng& r) {
    const auto rows = dim(r, 2, 4), cols = dim(r, 2, 4);
    auto x = random_tensor(r, {rows, cols});
    const auto rm = detail::random_mask(r, rows), cm = detail::random_mask(r, cols);
    return std::pair{Fn([=] { return weighted_sum(mask_zero(x, rm, cm), 9); }), In{x}};
  });
  add_case("masked_fill_rows", [=](Rng& r) {
    const auto rows = dim(r, 2, 4);
    auto x = random_tensor(r, {rows, dim(r, 2, 4)});
    const auto m = detail::random_mask(r, rows);
    return std::pair{Fn([=] { return weighted_sum(masked_fill_rows(x, m, -3.0), 10); }), In{x}};
  });
  add_case("softmax_columns", [=](Rng& r) {
    auto x = random_tensor(r, {dim(r, 2, 5), dim(r, 2, 4)});
    return std::pair{Fn([=] { return weighted_sum(softmax_columns(x), 11); }), In{x}};
  });
  add_case("layer_norm", [=](Rng& r) {
    const auto d = dim(r, 3, 6);
    auto x = random_tensor(r, {d, dim(r, 2, 4)});
    auto g = random_tensor(r, {d}), b = random_tensor(r, {d});
    return std::pair{Fn([=] { return weighted_sum(layer_norm(x, g, b), 12); }), In{x, g, b}};
  });
  add_case("conv2d", [=](Rng& r) {
    const auto cin = dim(r, 1, 2), cout = dim(r, 1, 3);
    auto x = random_tensor(r, {cin, dim(r, 3, 5), dim(r, 3, 5)});
    auto k = random_tensor(r, {cout, cin, dim(r, 1, 3), dim(r, 1, 3)});
    auto b = random_tensor(r, {cout});
    return std::pair{Fn([=] { return weighted_sum(conv2d(x, k, b), 13); }), In{x, k, b}};
  });
  add_case("maxpool2d", [=](Rng& r) {
    auto x = random_tensor(r, {dim(r, 1, 2), dim(r, 2, 5), dim(r, 2, 5)});
    return std::pair{Fn([=] { return weighted_sum(maxpool2d(x), 14); }), In{x}};
  });
  add_case("reshape", [=](Rng& r) {
    const auto m = dim(r, 2, 4), n = dim(r, 2, 4);
    auto x = random_tensor(r, {m, n});
    return std::pair{Fn([=] { return weighted_sum(reshape(x, {n, m}), 15); }), In{x}};
  });
  add_case("concat", [=](Rng& r) {
    auto a = random_tensor(r, {dim(r, 1, 4)}), b = random_tensor(r, {dim(r, 1, 3), 2});
    return std::pair{Fn([=] { return weighted_sum(concat<double>({a, b}), 16); }), In{a, b}};
  });
  add_case("concat_columns", [=](Rng& r) {
    const auto rows = dim(r, 2, 4);
    auto a = random_tensor(r, {rows, dim(r, 1, 3)}), b = random_tensor(r, {rows, dim(r, 1, 3)});
    return std::pair{Fn([=] { return weighted_sum(concat_columns<double>({a, b}), 17); }),
                     In{a, b}};
  });
  add_case("concat_rows", [=](Rng& r) {
    const auto cols = dim(r, 2, 4);
    auto a = random_tensor(r, {dim(r, 1, 3), cols}), b = random_tensor(r, {dim(r, 1, 3), cols});
    return std::pair{Fn([=] { return weighted_sum(concat_rows<double>({a, b}), 18); }), In{a, b}};
  });
  add_case("slice_columns", [=](Rng& r) {
    const auto cols = dim(r, 3, 5);
    auto x = random_tensor(r, {dim(r, 2, 4), cols});
    const auto begin = r.below(cols - 1);
    const auto end = begin + 1 + r.below(cols - begin);
    return std::pair{Fn([=] { return weighted_sum(slice_columns(x, begin, end), 19); }), In{x}};
  });
  add_case("gather_columns", [=](Rng& r) {
    const auto cols = dim(r, 2, 4);
    auto x = random_tensor(r, {dim(r, 2, 4), cols});
    std::vector<long> idx;
    for (std::size_t i = 0; i < 5; ++i) idx.push_back(static_cast<long>(r.below(cols + 1)) - 1);
    return std::pair{Fn([=] { return weighted_sum(gather_columns(x, idx), 20); }), In{x}};
  });
  add_case("gather_rows", [=](Rng& r) {
    const auto rows = dim(r, 3, 6);
    auto t = random_tensor(r, {rows, dim(r, 2, 4)});
    std::vector<long> idx;
    for (std::size_t i = 0; i < 4; ++i) idx.push_back(static_cast<long>(r.below(rows)));
    return std::pair{Fn([=] { return weighted_sum(gather_rows(t, idx), 21); }), In{t}};
  });
  add_case("row_max", [=](Rng& r) {
    const auto cols = dim(r, 2, 5);
    auto x = random_tensor(r, {dim(r, 2, 4), cols});
    const auto m = detail::random_mask(r, cols);
    return std::pair{Fn([=] { return weighted_sum(row_max(x, m), 22); }), In{x}};
  });
  add_case("sum", [=](Rng& r) {
    auto x = random_tensor(r, {dim(r, 2, 4), dim(r, 2, 4)});
    return std::pair{Fn([=] { return scale(sum(x), 0.7); }), In{x}};
  });
  add_case("mul", [=](Rng& r) {
    const Shape s{dim(r, 2, 4), dim(r, 2, 4)};
    auto a = random_tensor(r, s), b = random_tensor(r, s);
    return std::pair{Fn([=] { return weighted_sum(mul(a, b), 23); }), In{a, b}};
  });
  add_case("cross_entropy", [=](Rng& r) {
    const auto c = dim(r, 2, 6);
    auto logits = random_tensor(r, {c}, 2.0);
    const int label = static_cast<int>(r.below(c));
    return std::pair{Fn([=] { return cross_entropy(logits, label); }), In{logits}};
  });
  add_case("sigmoid_bce", [=](Rng& r) {
    auto logit = random_tensor(r, {1}, 2.0);
    const int label = static_cast<int>(r.below(2));
    return std::pair{Fn([=] { return sigmoid_bce(logit, label); }), In{logit}};
  });
  add_case("linear", [=](Rng& r) {
    const auto in = dim(r, 2, 4), out = dim(r, 2, 4);
    auto x = random_tensor(r, {in, dim(r, 1, 3)});
    auto w = random_tensor(r, {out, in}), b = random_tensor(r, {out});
    return std::pair{Fn([=] { return weighted_sum(linear(x, w, b), 24); }), In{x, w, b}};
  });
  add_case("attention_layer", [=](Rng& r) {
    const std::size_t d = 4, n = dim(r, 2, 4);
    ParameterStore<double> store(r.next());
    auto layer = make_transformer_layer(store, "layer", d, 2);
    auto x = random_tensor(r, {d, n});
    const auto m = detail::random_mask(r, n);
    In inputs{x};
    for (auto& p : store.trainable()) inputs.push_back(p);
    return std::pair{Fn([=] { return weighted_sum(transformer_layer(x, m, layer), 25); }),
                     inputs};
  });
  return cases;
}

/// Every op case under `seeds` input draws.
inline std::vector<GradCheckReport> run_op_checks(int seeds = 10, double tol = kOpTolerance) {
  std::vector<GradCheckReport> reports;
  for (const auto& c : op_cases()) {
    for (int s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(static_cast<std::uint64_t>(s), "opcheck." + c.name));
      auto [f, inputs] = c.build(rng);
      auto rep = grad_check(c.name + "/seed" + std::to_string(s), f, inputs,
                            kFiniteDifferenceStep, tol);
      rep.per_element_errors.clear();
      reports.push_back(std::move(rep));
    }
  }
  return reports;
}

/// A fixed random nlvr_like example sized for `config`.
inline SyntheticExample probe_example(const RunConfig& config, TaskKind task, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "probe.example"));
  SyntheticExample ex;
  ex.id = "probe";
  ex.task = task;
  const auto n_tokens = std::max(1, config.n_text - 1);
  for (int i = 0; i < n_tokens; ++i)
    ex.tokens.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(config.vocab_size))));
  for (int img = 0; img < image_count(task); ++img) {
    std::vector<float> f(static_cast<std::size_t>(config.n_visual * config.d_raw_visual));
    for (auto& v : f) v = static_cast<float>(rng.normal());
    ex.visual.push_back(std::move(f));
  }
  ex.label = task == TaskKind::nlvr_like ? 1 : static_cast<int>(rng.below(
                                                    static_cast<std::size_t>(config.n_classes)));
  return ex;
}

/// Loss gradient of the full model over every trainable parameter.
inline GradCheckReport run_model_check(const RunConfig& config, TaskKind task,
                                       std::uint64_t seed = 1, double tol = kModelTolerance) {
  CmrModel<double> model(config, task);
  const auto ex = probe_example(config, task, seed);
  auto rep = grad_check(
      "model/" + std::string(to_string(task)),
      [&] { return model.loss(model.forward(ex), ex.label); }, model.params().trainable(),
      kFiniteDifferenceStep, tol);
  return rep;
}

}  // namespace cmr
