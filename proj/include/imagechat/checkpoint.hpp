// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//   "IMCKPT01" | u64 manifest byte length | manifest JSON | payloads
// The manifest lists parameters (name, shape) in payload order together with
// the seed, the model config and its hash. Payloads are little-endian float32.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "imagechat/params.hpp"

namespace imagechat {

// Stable hash of a JSON config (keys are sorted by the serializer).
std::string config_hash(const nlohmann::json& config);

struct LoadedCheckpoint {
  nlohmann::json manifest;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;

  const nlohmann::json& config() const { return manifest.at("config"); }
  std::uint64_t seed() const { return manifest.at("seed").get<std::uint64_t>(); }
};

// `extra` is merged into the manifest (vocabulary, style list, ...).
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const nlohmann::json& config,
                     const nlohmann::json& extra = nlohmann::json::object());
std::string encode_checkpoint(const ParameterStore& params, const nlohmann::json& config,
                              const nlohmann::json& extra);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
LoadedCheckpoint decode_checkpoint(std::string_view bytes);

// Copies checkpoint values into matching parameters. With `strict`, every
// store parameter must be present with the same shape. Returns the number of
// tensors restored.
std::size_t restore_parameters(ParameterStore& params, const LoadedCheckpoint& ckpt,
                               bool strict = true);

}  // namespace imagechat
