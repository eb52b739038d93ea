// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/feature_store.hpp"

#include <cmath>
#include <random>

#include "json.hpp"
#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

namespace {
constexpr std::string_view kMagic = "IMFEAT01";
}

bool FeatureStore::contains(const std::string& image_id) const {
  return rows_.count(image_id) != 0;
}

void FeatureStore::insert(const std::string& image_id, std::vector<float> features) {
  if (features.size() != dim_) {
    throw DataError("image '" + image_id + "' has " + std::to_string(features.size()) +
                    " features, expected " + std::to_string(dim_));
  }
  for (float v : features) {
    if (!std::isfinite(v)) throw DataError("image '" + image_id + "' has non-finite features");
  }
  if (!rows_.emplace(image_id, std::move(features)).second) {
    throw DataError("duplicate image id '" + image_id + "'");
  }
  ids_.push_back(image_id);
}

const std::vector<float>& FeatureStore::get(const std::string& image_id) const {
  auto it = rows_.find(image_id);
  if (it == rows_.end()) throw CatalogError("unknown image '" + image_id + "'");
  return it->second;
}

std::string FeatureStore::encode() const {
  const nlohmann::json manifest = {{"dim", dim_}, {"count", ids_.size()}, {"ids", ids_}};
  const std::string header = manifest.dump();
  std::string out(kMagic);
  append_u64_le(out, header.size());
  out += header;
  out.reserve(out.size() + ids_.size() * dim_ * 4);
  for (const auto& id : ids_)
    for (float v : rows_.at(id)) append_f32_le(out, v);
  return out;
}

FeatureStore FeatureStore::decode(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw FormatError("not an IMFEAT01 feature store");
  }
  const std::uint64_t len = read_u64_le(bytes, kMagic.size());
  std::size_t off = kMagic.size() + 8;
  if (off + len > bytes.size()) throw FormatError("feature store manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(off, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature store manifest: ") + e.what());
  }
  off += len;
  const auto dim = manifest.at("dim").get<std::size_t>();
  const auto ids = manifest.at("ids").get<std::vector<std::string>>();
  if (manifest.value("count", ids.size()) != ids.size()) {
    throw FormatError("feature store count does not match ids");
  }
  if (bytes.size() - off != ids.size() * dim * 4) {
    throw FormatError("feature store payload has wrong size");
  }
  FeatureStore store(dim);
  for (const auto& id : ids) {
    std::vector<float> row(dim);
    for (std::size_t i = 0; i < dim; ++i) row[i] = read_f32_le(bytes, off + 4 * i);
    off += 4 * dim;
    store.insert(id, std::move(row));
  }
  return store;
}

void FeatureStore::save(const std::filesystem::path& path) const { write_file(path, encode()); }

FeatureStore FeatureStore::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DataError("feature store not found: " + path.string());
  }
  return decode(read_file(path));
}

FeatureStore FeatureStore::synthetic(const std::vector<std::string>& ids, std::uint64_t seed,
                                     std::size_t dim) {
  FeatureStore store(dim);
  for (const auto& id : ids) {
    if (store.contains(id)) continue;
    std::mt19937_64 rng(splitmix64(seed ^ fnv1a64(id)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> row(dim);
    for (auto& v : row) v = static_cast<float>(std::max(0.0, normal(rng)));
    store.insert(id, std::move(row));
  }
  return store;
}

}  // namespace imagechat
