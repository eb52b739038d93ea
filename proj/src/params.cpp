// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/params.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

Tensor ParameterStore::add(const std::string& name, Shape shape, Init init,
                           std::size_t fan_in) {
  if (params_.count(name)) throw ContractError("duplicate parameter " + name);
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n, 0.0);
  std::mt19937_64 rng(splitmix64(seed_ ^ fnv1a64(name)));
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      std::fill(values.begin(), values.end(), 1.0);
      break;
    case Init::uniform_fan_in: {
      if (fan_in == 0) throw ContractError("uniform_fan_in needs fan_in for " + name);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : values) v = dist(rng);
      break;
    }
    case Init::normal_embedding: {
      std::normal_distribution<double> dist(0.0, 0.02);
      for (double& v : values) v = dist(rng);
      break;
    }
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  params_.emplace(name, t);
  return t;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

bool ParameterStore::contains(const std::string& name) const {
  return params_.count(name) != 0;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [k, v] : params_) n += v.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [k, v] : params_) {
    Tensor t = v;
    t.zero_grad();
  }
}

GradientMap ParameterStore::gradients() const {
  GradientMap out;
  for (const auto& [k, v] : params_) out.emplace(k, v.grad());
  return out;
}

std::uint64_t ParameterStore::content_hash() const {
  std::uint64_t h = fnv1a64("params");
  for (const auto& [k, v] : params_) {
    h = fnv1a64(k, h);
    h = fnv1a64(shape_string(v.shape()), h);
    auto d = v.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()),
                                 d.size() * sizeof(double)),
                h);
  }
  return h;
}

void ParameterStore::assign(const std::string& name, std::span<const double> values) {
  Tensor t = get(name);
  auto dst = t.mutable_data();
  if (dst.size() != values.size()) {
    throw ContractError("assign: size mismatch for " + name);
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = round_to_precision(values[i]);
}

std::size_t ParameterStore::copy_prefix(const ParameterStore& source,
                                        const std::string& from_prefix,
                                        const std::string& to_prefix) {
  std::size_t copied = 0;
  for (const auto& [name, tensor] : source.items()) {
    if (name.rfind(from_prefix, 0) != 0) continue;
    const std::string target = to_prefix + name.substr(from_prefix.size());
    if (!contains(target)) throw ContractError("copy_prefix: no target " + target);
    if (get(target).shape() != tensor.shape()) {
      throw ContractError("copy_prefix: shape mismatch for " + target);
    }
    assign(target, tensor.data());
    ++copied;
  }
  return copied;
}

GradientMap compute_gradients(const Tensor& loss, ParameterStore& params) {
  params.zero_grad();
  backward(loss);
  return params.gradients();
}

}  // namespace imagechat
