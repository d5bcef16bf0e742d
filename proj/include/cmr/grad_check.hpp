// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmr/tensor.hpp"

namespace cmr {

struct GradCheckReport {
  std::string op_name;
  double max_relative_error = 0.0;
  std::vector<double> per_element_errors;
  double tolerance = 0.0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares the taped gradient of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h for every element of every input.
/// `f` reads the inputs through the handles it captured; the check perturbs
/// those tensors in place and restores them afterwards.
inline GradCheckReport grad_check(std::string name,
                                  const std::function<Tensor<double>()>& f,
                                  const std::vector<Tensor<double>>& inputs,
                                  double h = 1e-6, double tol = 1e-4) {
  std::vector<bool> had_flag;
  for (const auto& in : inputs) {
    had_flag.push_back(in.requires_grad());
    in.set_requires_grad(true);
    in.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const Tensor<double> out = f();
    if (out.numel() != 1) {
      throw ContractError("grad_check(" + name + "): function output has shape " +
                          shape_str(out.shape()) + ", expected a scalar");
    }
    tape.backward(out);
  }
  for (const auto& in : inputs) {
    const auto g = in.grad_buffer();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckReport report;
  report.op_name = std::move(name);
  report.tolerance = tol;
  {
    NoGradScope<double> no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto values = inputs[k].mutable_values();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + h;
        const double plus = f().item();
        values[i] = saved - h;
        const double minus = f().item();
        values[i] = saved;
        const double numeric = (plus - minus) / (2.0 * h);
        const double err = relative_error(analytic[k][i], numeric);
        report.per_element_errors.push_back(err);
        report.max_relative_error = std::max(report.max_relative_error, err);
      }
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].zero_grad();
    inputs[k].set_requires_grad(had_flag[k]);
  }
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace cmr
