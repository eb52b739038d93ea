// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

namespace {

double finite_loss(const std::function<Tensor()>& loss_fn) {
  const Tensor loss = loss_fn();
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("grad_check: loss function must return a scalar");
  }
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ConfigError("grad_check: eps must be positive");
  if (!(options.floor > 0.0)) throw ConfigError("grad_check: floor must be positive");

  params.zero_grad();
  const Tensor loss = loss_fn();
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("grad_check: loss function must return a scalar");
  }
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  backward(loss);
  const GradientMap analytic = params.gradients();

  GradCheckResult result;
  PrecisionScope wide(Precision::f64);
  NoGradGuard no_grad;
  std::mt19937_64 rng(options.seed);

  for (const auto& [name, tensor] : params.items()) {
    Tensor p = tensor;
    const std::size_t n = p.numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (n > options.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    const auto& grad = analytic.at(name);
    for (std::size_t idx : coords) {
      const double saved = p.data()[idx];
      const double h = options.eps * std::max(1.0, std::abs(saved));
      auto at = [&](double offset) {
        p.mutable_data()[idx] = saved + offset;
        return finite_loss(loss_fn);
      };
      double numeric = 0.0;
      if (options.five_point) {
        numeric = (at(-2 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2 * h)) / (12.0 * h);
      } else {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      }
      p.mutable_data()[idx] = saved;

      const double a = grad[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double err = std::abs(a - numeric) / denom;
      ++result.coords_checked;
      if (err > result.max_relative_error || result.worst_param.empty()) {
        result.max_relative_error = std::max(err, result.max_relative_error);
        if (err >= result.max_relative_error) {
          result.worst_param = name;
          result.worst_index = idx;
          result.worst_analytic = a;
          result.worst_numeric = numeric;
        }
      }
    }
  }
  params.zero_grad();
  return result;
}

}  // namespace imagechat
