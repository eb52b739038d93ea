// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Modality encoders: Transformer text encoder (dialogue history and response
// candidates), style embedding table and the two image projections.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "imagechat/modality.hpp"
#include "imagechat/nn.hpp"

namespace imagechat {

struct TextEncoderConfig {
  std::size_t n_layers = 4;
  std::size_t hidden = 300;
  std::size_t n_heads = 6;
  std::size_t ffn_mult = 4;
  std::size_t max_len = 64;
  std::size_t vocab_size = 0;
  std::size_t output_dim = 500;
  bool shared_response_encoder = false;
  double dropout = 0.0;  // only 0 is supported

  void validate() const;
};

void to_json(nlohmann::json& j, const TextEncoderConfig& c);
void from_json(const nlohmann::json& j, TextEncoderConfig& c);

// Learned token + position embeddings, a stack of post-LN encoder layers,
// masked mean pooling and (optionally) a final linear layer. Token id 0 is
// padding and is masked out of attention and pooling.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParameterStore& params, const std::string& prefix,
              const TextEncoderConfig& config, bool with_output_layer);

  // Contextual states [L, hidden].
  Tensor states(std::span<const int> ids) const;
  // Pooled and projected vector [output_dim].
  Tensor encode(std::span<const int> ids) const;

  const TextEncoderConfig& config() const { return cfg_; }
  std::size_t output_dim() const;

 private:
  TextEncoderConfig cfg_;
  Tensor token_emb_, pos_emb_;
  std::vector<EncoderLayer> layers_;
  std::optional<Linear> output_;
};

class StyleEncoder {
 public:
  StyleEncoder() = default;
  StyleEncoder(ParameterStore& params, const std::string& name, std::size_t n_styles,
               std::size_t dim);
  // Row `style_index` of the table; CatalogError when out of range.
  Tensor encode(std::size_t style_index) const;
  std::size_t n_styles() const { return n_styles_; }

 private:
  Tensor table_;
  std::size_t n_styles_ = 0;
};

// Retrieval image encoder: 2048 -> hidden (ReLU) -> out.
class ImageMlp {
 public:
  ImageMlp() = default;
  ImageMlp(ParameterStore& params, const std::string& prefix, std::size_t in_dim,
           std::size_t hidden, std::size_t out_dim);
  Tensor operator()(const Tensor& features) const;
  Tensor hidden(const Tensor& features) const;

 private:
  Linear fc1_, fc2_;
  std::size_t in_dim_ = 0;
};

// Generative image projection: one affine map 2048 -> token width.
class ImageProjection {
 public:
  ImageProjection() = default;
  ImageProjection(ParameterStore& params, const std::string& prefix, std::size_t in_dim,
                  std::size_t out_dim);
  Tensor operator()(const Tensor& features) const;

 private:
  Linear fc_;
  std::size_t in_dim_ = 0;
};

Tensor feature_tensor(std::span<const float> features);

// r_I, r_S, r_D for one context. A modality that is masked out, or has no
// input (empty history), is left undefined rather than zero-filled.
struct EncodedContext {
  Tensor image;
  Tensor style;
  Tensor dialogue;

  ModalityMask present() const;
  const Tensor& get(Modality m) const;
};

}  // namespace imagechat
