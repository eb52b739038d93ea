// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/optim.hpp"

#include <cmath>

#include "imagechat/errors.hpp"

namespace imagechat {

void adam_step(ParameterStore& params, const GradientMap& grads, AdamState& state) {
  const AdamConfig& c = state.config;
  if (!(c.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("adam: betas must lie in [0, 1)");
  }
  for (const auto& [name, g] : grads) {
    for (double v : g) {
      if (!std::isfinite(v)) throw NumericError("adam: non-finite gradient for " + name);
    }
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);

  for (const auto& [name, tensor] : params.items()) {
    Tensor p = tensor;
    auto data = p.mutable_data();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.size() != data.size()) m.assign(data.size(), 0.0);
    if (v.size() != data.size()) v.assign(data.size(), 0.0);
    auto git = grads.find(name);
    const std::vector<double>* g = git == grads.end() ? nullptr : &git->second;
    if (g && g->size() != data.size()) {
      throw ContractError("adam: gradient size mismatch for " + name);
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] = round_to_precision(data[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

}  // namespace imagechat
