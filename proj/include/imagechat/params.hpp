// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "imagechat/tensor.hpp"

namespace imagechat {

enum class Init {
  zeros,
  ones,
  uniform_fan_in,    // U(-1/sqrt(fan_in), +1/sqrt(fan_in))
  normal_embedding,  // N(0, 0.02)
};

using GradientMap = std::map<std::string, std::vector<double>>;

// Named trainable tensors. Iteration is sorted by name. Each parameter draws
// its initial values from a stream keyed by (seed, name), so initialization
// does not depend on creation order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor add(const std::string& name, Shape shape, Init init,
             std::size_t fan_in = 0);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::map<std::string, Tensor>& items() const { return params_; }
  std::vector<std::string> names() const;
  std::size_t total_size() const;
  std::uint64_t seed() const { return seed_; }

  void zero_grad();
  // Current accumulated gradients; zeros for parameters never reached.
  GradientMap gradients() const;
  // Hash of every name, shape and value.
  std::uint64_t content_hash() const;

  // Overwrites values of `name` (shape must match).
  void assign(const std::string& name, std::span<const double> values);
  // Copies every parameter under `from_prefix` into the same suffix under
  // `to_prefix`. Returns the number of tensors copied.
  std::size_t copy_prefix(const ParameterStore& source, const std::string& from_prefix,
                          const std::string& to_prefix);

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

// Clears gradients, back-propagates `loss`, and returns the gradient of every
// parameter in the store (zeros where unreachable).
GradientMap compute_gradients(const Tensor& loss, ParameterStore& params);

}  // namespace imagechat
