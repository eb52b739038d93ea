// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/encoders.hpp"

#include <algorithm>

#include "imagechat/errors.hpp"

namespace imagechat {

void TextEncoderConfig::validate() const {
  if (n_layers == 0) throw ConfigError("text encoder needs at least one layer");
  if (hidden == 0 || n_heads == 0 || hidden % n_heads != 0) {
    throw ConfigError("text encoder hidden width " + std::to_string(hidden) +
                      " not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (max_len == 0) throw ConfigError("text encoder max_len must be positive");
  if (vocab_size == 0) throw ConfigError("text encoder vocab_size must be positive");
  if (output_dim == 0) throw ConfigError("text encoder output_dim must be positive");
  if (ffn_mult == 0) throw ConfigError("text encoder ffn_mult must be positive");
  if (dropout != 0.0) throw ConfigError("dropout is not supported; set it to 0");
}

void to_json(nlohmann::json& j, const TextEncoderConfig& c) {
  j = {{"n_layers", c.n_layers},     {"hidden", c.hidden},
       {"n_heads", c.n_heads},       {"ffn_mult", c.ffn_mult},
       {"max_len", c.max_len},       {"vocab_size", c.vocab_size},
       {"output_dim", c.output_dim}, {"shared_response_encoder", c.shared_response_encoder},
       {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, TextEncoderConfig& c) {
  TextEncoderConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.hidden = j.value("hidden", d.hidden);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
  c.max_len = j.value("max_len", d.max_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.output_dim = j.value("output_dim", d.output_dim);
  c.shared_response_encoder = j.value("shared_response_encoder", d.shared_response_encoder);
  c.dropout = j.value("dropout", d.dropout);
}

// ------------------------------------------------------------ TextEncoder

TextEncoder::TextEncoder(ParameterStore& params, const std::string& prefix,
                         const TextEncoderConfig& config, bool with_output_layer)
    : cfg_(config) {
  cfg_.validate();
  token_emb_ = params.add(prefix + ".token_emb", {cfg_.vocab_size, cfg_.hidden},
                          Init::normal_embedding);
  pos_emb_ = params.add(prefix + ".pos_emb", {cfg_.max_len, cfg_.hidden},
                        Init::normal_embedding);
  for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
    layers_.emplace_back(params, prefix + ".layer" + std::to_string(i), cfg_.hidden,
                         cfg_.n_heads, cfg_.hidden * cfg_.ffn_mult);
  }
  if (with_output_layer) {
    output_.emplace(params, prefix + ".out.w", prefix + ".out.b", cfg_.hidden,
                    cfg_.output_dim);
  }
}

std::size_t TextEncoder::output_dim() const {
  return output_ ? cfg_.output_dim : cfg_.hidden;
}

Tensor TextEncoder::states(std::span<const int> ids) const {
  if (ids.empty()) throw ContractError("text encoder: empty token sequence");
  if (ids.size() > cfg_.max_len) {
    throw ContractError("text encoder: " + std::to_string(ids.size()) +
                        " tokens exceed max_len " + std::to_string(cfg_.max_len));
  }
  Mask keep(ids.size());
  bool any = false;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    keep[i] = ids[i] != 0 ? 1 : 0;
    any = any || keep[i];
  }
  if (!any) throw ContractError("text encoder: every position is padding");
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);

  Tensor x = add(embedding_lookup(token_emb_, ids), embedding_lookup(pos_emb_, positions));
  const bool padded = std::find(keep.begin(), keep.end(), 0) != keep.end();
  for (const auto& layer : layers_) x = layer(x, padded ? keep : Mask{});
  return x;
}

Tensor TextEncoder::encode(std::span<const int> ids) const {
  const Tensor h = states(ids);
  Mask keep(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) keep[i] = ids[i] != 0 ? 1 : 0;
  const Tensor pooled = masked_mean_pool(h, keep);
  return output_ ? (*output_)(pooled) : pooled;
}

// ----------------------------------------------------------- StyleEncoder

StyleEncoder::StyleEncoder(ParameterStore& params, const std::string& name,
                           std::size_t n_styles, std::size_t dim)
    : n_styles_(n_styles) {
  if (n_styles == 0 || dim == 0) throw ConfigError("style table must be non-empty");
  table_ = params.add(name, {n_styles, dim}, Init::normal_embedding);
}

Tensor StyleEncoder::encode(std::size_t style_index) const {
  if (style_index >= n_styles_) {
    throw CatalogError("style index " + std::to_string(style_index) + " outside table of " +
                       std::to_string(n_styles_));
  }
  return row(table_, style_index);
}

// ----------------------------------------------------------------- images

ImageMlp::ImageMlp(ParameterStore& params, const std::string& prefix, std::size_t in_dim,
                   std::size_t hidden, std::size_t out_dim)
    : fc1_(params, prefix + ".fc1.w", prefix + ".fc1.b", in_dim, hidden),
      fc2_(params, prefix + ".fc2.w", prefix + ".fc2.b", hidden, out_dim),
      in_dim_(in_dim) {}

Tensor ImageMlp::hidden(const Tensor& features) const {
  if (features.dim() != 1 || features.size(0) != in_dim_) {
    throw ContractError("image encoder: expected [" + std::to_string(in_dim_) +
                        "] features, got " + shape_string(features.shape()));
  }
  return relu(fc1_(features));
}

Tensor ImageMlp::operator()(const Tensor& features) const { return fc2_(hidden(features)); }

ImageProjection::ImageProjection(ParameterStore& params, const std::string& prefix,
                                 std::size_t in_dim, std::size_t out_dim)
    : fc_(params, prefix + ".w", prefix + ".b", in_dim, out_dim), in_dim_(in_dim) {}

Tensor ImageProjection::operator()(const Tensor& features) const {
  if (features.dim() != 1 || features.size(0) != in_dim_) {
    throw ContractError("image projection: expected [" + std::to_string(in_dim_) +
                        "] features, got " + shape_string(features.shape()));
  }
  return fc_(features);
}

Tensor feature_tensor(std::span<const float> features) {
  return Tensor::from({features.size()}, std::vector<double>(features.begin(), features.end()));
}

// --------------------------------------------------------- EncodedContext

ModalityMask EncodedContext::present() const {
  ModalityMask m;
  if (image.defined()) m = m.with(Modality::image);
  if (style.defined()) m = m.with(Modality::style);
  if (dialogue.defined()) m = m.with(Modality::dialogue);
  return m;
}

const Tensor& EncodedContext::get(Modality m) const {
  switch (m) {
    case Modality::image: return image;
    case Modality::style: return style;
    case Modality::dialogue: return dialogue;
  }
  return image;
}

}  // namespace imagechat
