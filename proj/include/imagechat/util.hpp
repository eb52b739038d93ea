// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace imagechat {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);
std::string hex64(std::uint64_t v);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

void append_u64_le(std::string& out, std::uint64_t v);
std::uint64_t read_u64_le(std::string_view bytes, std::size_t offset);
void append_f32_le(std::string& out, float v);
float read_f32_le(std::string_view bytes, std::size_t offset);

// Cycles through a seeded permutation of [0, n) in fixed-size batches,
// reshuffling whenever fewer than `batch` indices remain.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace imagechat
