// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace imagechat {

enum class Modality : std::uint8_t { image = 1, style = 2, dialogue = 4 };

// Subset of {image, style, dialogue}.
class ModalityMask {
 public:
  constexpr ModalityMask() = default;
  constexpr explicit ModalityMask(std::uint8_t bits) : bits_(bits & 7) {}

  static constexpr ModalityMask all() { return ModalityMask(7); }
  static constexpr ModalityMask none() { return ModalityMask(0); }
  static constexpr ModalityMask of(Modality m) {
    return ModalityMask(static_cast<std::uint8_t>(m));
  }

  constexpr bool has(Modality m) const {
    return (bits_ & static_cast<std::uint8_t>(m)) != 0;
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr int count() const {
    return (bits_ & 1) + ((bits_ >> 1) & 1) + ((bits_ >> 2) & 1);
  }
  constexpr ModalityMask with(Modality m) const {
    return ModalityMask(bits_ | static_cast<std::uint8_t>(m));
  }
  constexpr ModalityMask without(Modality m) const {
    return ModalityMask(bits_ & ~static_cast<std::uint8_t>(m));
  }
  constexpr ModalityMask operator&(ModalityMask o) const {
    return ModalityMask(bits_ & o.bits_);
  }
  constexpr ModalityMask complement() const { return ModalityMask(~bits_ & 7); }
  constexpr bool operator==(const ModalityMask&) const = default;

  // "image,style,dialogue" (any order, comma separated); "all" is accepted.
  static ModalityMask parse(std::string_view text);
  std::string to_string() const;
  // Row label used in ablation tables, e.g. "Image + Style (no dialogue)".
  std::string label() const;

 private:
  std::uint8_t bits_ = 0;
};

// The seven non-empty masks in ablation-table order: three single
// modalities, three pairs, then the full model.
std::array<ModalityMask, 7> ablation_masks();

}  // namespace imagechat
