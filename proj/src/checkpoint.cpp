// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/checkpoint.hpp"

#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

namespace {
constexpr std::string_view kMagic = "IMCKPT01";
}

std::string config_hash(const nlohmann::json& config) {
  return hex64(fnv1a64(config.dump()));
}

std::string encode_checkpoint(const ParameterStore& params, const nlohmann::json& config,
                              const nlohmann::json& extra) {
  nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
  manifest["format"] = "IMCKPT01";
  manifest["seed"] = params.seed();
  manifest["config"] = config;
  manifest["config_hash"] = config_hash(config);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, t] : params.items()) {
    list.push_back({{"name", name}, {"shape", t.shape()}});
  }
  manifest["params"] = list;

  const std::string header = manifest.dump();
  std::string out(kMagic);
  append_u64_le(out, header.size());
  out += header;
  for (const auto& [name, t] : params.items()) {
    for (double v : t.data()) append_f32_le(out, static_cast<float>(v));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const nlohmann::json& config, const nlohmann::json& extra) {
  write_file(path, encode_checkpoint(params, config, extra));
}

LoadedCheckpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("not an IMCKPT01 checkpoint");
  }
  const std::uint64_t len = read_u64_le(bytes, kMagic.size());
  std::size_t off = kMagic.size() + 8;
  if (off + len > bytes.size()) throw FormatError("checkpoint manifest truncated");
  LoadedCheckpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(bytes.substr(off, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  off += len;
  for (const auto& entry : ck.manifest.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_f32_le(bytes, off + 4 * i);
    off += 4 * n;
    ck.tensors.emplace(name, std::make_pair(shape, std::move(values)));
  }
  if (off != bytes.size()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DataError("checkpoint not found: " + path.string());
  }
  return decode_checkpoint(read_file(path));
}

std::size_t restore_parameters(ParameterStore& params, const LoadedCheckpoint& ckpt,
                               bool strict) {
  std::size_t restored = 0;
  for (const auto& name : params.names()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      if (strict) throw FormatError("checkpoint lacks parameter " + name);
      continue;
    }
    if (it->second.first != params.get(name).shape()) {
      throw FormatError("checkpoint shape mismatch for " + name);
    }
    std::vector<double> values(it->second.second.begin(), it->second.second.end());
    params.assign(name, values);
    ++restored;
  }
  return restored;
}

}  // namespace imagechat
