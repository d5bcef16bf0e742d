// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cmr/errors.hpp"
#include "cmr/rng.hpp"
#include "cmr/tensor.hpp"

namespace cmr {

enum class Init { zeros, ones, xavier, he, normal };

enum class ParamKind {
  weight,   // matrices and kernels
  bias,
  norm,     // layer-norm gain/bias
  frozen,   // stub feature extractors, never optimized
};

/// Named parameters in lexicographic order. Initial values depend only on
/// (seed, name), never on creation order, so two models built from the same
/// seed share every parameter they have in common.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> tensor;
    ParamKind kind;
    Init init;
    double scale;
  };

  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  const Tensor<T>& add(const std::string& name, Shape shape, Init init, ParamKind kind,
                       double scale = 1.0) {
    if (entries_.count(name)) throw ContractError("duplicate parameter " + name);
    Tensor<T> t(std::move(shape), kind != ParamKind::frozen);
    auto& entry = entries_.emplace(name, Entry{t, kind, init, scale}).first->second;
    fill(name, entry);
    return entry.tensor;
  }

  /// Redraws a parameter's initial value (and drops its gradient).
  void reinitialize(const std::string& name) {
    auto& entry = entries_.at(name);
    entry.tensor.zero_grad();
    fill(name, entry);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("no parameter named " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const { return entry(name).tensor; }

  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, e] : entries_)
      if (e.kind != ParamKind::frozen) out.push_back(e.tensor);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_)
      if (e.kind != ParamKind::frozen) n += e.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (const auto& [name, e] : entries_) e.tensor.zero_grad();
  }

 private:
  void fill(const std::string& name, Entry& entry) {
    auto values = entry.tensor.mutable_values();
    const auto& shape = entry.tensor.shape();
    Rng rng(derive_seed(seed_, name));
    switch (entry.init) {
      case Init::zeros:
        std::fill(values.begin(), values.end(), T{0});
        break;
      case Init::ones:
        std::fill(values.begin(), values.end(), T{1});
        break;
      case Init::normal:
        for (auto& v : values) v = static_cast<T>(entry.scale * rng.normal());
        break;
      case Init::xavier:
      case Init::he: {
        double fan_in = 1, fan_out = 1;
        if (shape.size() >= 2) {
          double receptive = 1;
          for (std::size_t i = 2; i < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
          fan_out = static_cast<double>(shape[0]) * receptive;
          fan_in = static_cast<double>(shape[1]) * receptive;
        } else {
          fan_in = fan_out = static_cast<double>(shape[0]);
        }
        // he: variance 2/fan_in, for weights that feed a ReLU
        const double limit = entry.init == Init::he
                                 ? entry.scale * std::sqrt(6.0 / fan_in)
                                 : entry.scale * std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : values) v = static_cast<T>(rng.uniform(-limit, limit));
        break;
      }
    }
  }

  std::uint64_t seed_;
  std::map<std::string, Entry> entries_;
};

}  // namespace cmr
