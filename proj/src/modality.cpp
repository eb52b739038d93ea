// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/modality.hpp"

#include "imagechat/errors.hpp"

namespace imagechat {

ModalityMask ModalityMask::parse(std::string_view text) {
  if (text == "all") return all();
  ModalityMask mask;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view part = text.substr(start, end - start);
    while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
    while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
    if (part == "image") {
      mask = mask.with(Modality::image);
    } else if (part == "style") {
      mask = mask.with(Modality::style);
    } else if (part == "dialogue" || part == "dialog" || part == "history") {
      mask = mask.with(Modality::dialogue);
    } else if (!part.empty()) {
      throw ConfigError("unknown modality '" + std::string(part) + "'");
    }
    start = end + 1;
  }
  if (mask.empty()) throw ConfigError("modality mask must name at least one modality");
  return mask;
}

std::string ModalityMask::to_string() const {
  std::string out;
  auto put = [&](Modality m, const char* name) {
    if (!has(m)) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  put(Modality::image, "image");
  put(Modality::style, "style");
  put(Modality::dialogue, "dialogue");
  return out.empty() ? "none" : out;
}

std::string ModalityMask::label() const {
  switch (bits_) {
    case 1: return "Image Only";
    case 2: return "Style Only";
    case 4: return "Dialogue History Only";
    case 6: return "Style + Dialogue (no image)";
    case 5: return "Image + Dialogue (no style)";
    case 3: return "Image + Style (no dialogue)";
    case 7: return "Style + Dialogue + Image (full model)";
    default: return "None";
  }
}

std::array<ModalityMask, 7> ablation_masks() {
  return {ModalityMask(1), ModalityMask(2), ModalityMask(4), ModalityMask(6),
          ModalityMask(5), ModalityMask(3), ModalityMask(7)};
}

}  // namespace imagechat
