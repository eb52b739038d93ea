// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "imagechat/params.hpp"

namespace imagechat {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  std::int64_t step_count = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig cfg) : config(cfg) {}
};

// One bias-corrected Adam update over every parameter in the store.
// Parameters missing from `grads` are updated with a zero gradient.
void adam_step(ParameterStore& params, const GradientMap& grads, AdamState& state);

}  // namespace imagechat
