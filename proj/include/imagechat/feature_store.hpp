// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Precomputed image features keyed by image id.
//   "IMFEAT01" | u64 manifest byte length | manifest JSON {dim, count, ids} |
//   count x dim little-endian float32 rows, in `ids` order.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace imagechat {

inline constexpr std::size_t kImageFeatureDim = 2048;

class FeatureStore {
 public:
  explicit FeatureStore(std::size_t dim = kImageFeatureDim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  bool contains(const std::string& image_id) const;

  // Rejects wrong length or non-finite entries (DataError), and duplicate ids.
  void insert(const std::string& image_id, std::vector<float> features);
  // Throws CatalogError for unknown ids.
  const std::vector<float>& get(const std::string& image_id) const;

  std::string encode() const;
  static FeatureStore decode(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static FeatureStore load(const std::filesystem::path& path);

  // Deterministic pseudo-features for tests and demos: each id hashes to a
  // seed and draws dim values from N(0,1) followed by ReLU.
  static FeatureStore synthetic(const std::vector<std::string>& ids, std::uint64_t seed,
                                std::size_t dim = kImageFeatureDim);

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::vector<float>> rows_;
};

}  // namespace imagechat
