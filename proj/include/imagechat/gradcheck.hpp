// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "imagechat/params.hpp"

namespace imagechat {

struct GradCheckOptions {
  // Central-difference step is eps * max(1, |theta|).
  double eps = 1e-5;
  // Coordinates probed per parameter tensor (all when the tensor is smaller).
  std::size_t coords_per_param = 6;
  // Lower bound of the relative-error denominator; smaller gradients are
  // effectively compared on absolute error.
  double floor = 1e-3;
  // Fourth-order stencil (f(-2h), f(-h), f(h), f(2h)) instead of the
  // two-point central difference.
  bool five_point = true;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Compares the back-propagated gradient of `loss_fn` (computed at the active
// precision) with central finite differences evaluated in 64-bit. Relative
// error per coordinate is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           ParameterStore& params, const GradCheckOptions& options = {});

}  // namespace imagechat
