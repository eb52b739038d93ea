// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/nn.hpp"

#include <cmath>

#include "imagechat/errors.hpp"

namespace imagechat {

Linear::Linear(ParameterStore& params, const std::string& weight_name,
               const std::string& bias_name, std::size_t in, std::size_t out)
    : in_(in), out_(out) {
  if (in == 0 || out == 0) throw ConfigError("linear layer " + weight_name + " has zero width");
  w_ = params.add(weight_name, {in, out}, Init::uniform_fan_in, in);
  if (!bias_name.empty()) b_ = params.add(bias_name, {out}, Init::zeros);
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.dim() == 1) {
    if (x.size(0) != in_) {
      throw ContractError("linear: input width " + std::to_string(x.size(0)) +
                          ", expected " + std::to_string(in_));
    }
    Tensor y = matmul(reshape(x, {1, in_}), w_);
    if (b_.defined()) y = add_bias(y, b_);
    return reshape(y, {out_});
  }
  Tensor y = matmul(x, w_);
  return b_.defined() ? add_bias(y, b_) : y;
}

LayerNorm::LayerNorm(ParameterStore& params, const std::string& prefix, std::size_t dim)
    : gain_(params.add(prefix + ".gain", {dim}, Init::ones)),
      bias_(params.add(prefix + ".bias", {dim}, Init::zeros)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

Mask attention_visibility(std::size_t lq, std::size_t lk, const AttentionMask& mask) {
  if (!mask.key_mask.empty() && mask.key_mask.size() != lk) {
    throw ContractError("attention: key mask length " + std::to_string(mask.key_mask.size()) +
                        " vs " + std::to_string(lk) + " keys");
  }
  Mask vis(lq * lk, 1);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t j = 0; j < lk; ++j) {
      bool on = mask.key_mask.empty() || mask.key_mask[j];
      if (mask.causal && j > i) on = false;
      vis[i * lk + j] = on ? 1 : 0;
    }
  return vis;
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& params, const std::string& prefix,
                                       std::size_t dim, std::size_t n_heads)
    : dim_(dim), n_heads_(n_heads) {
  if (n_heads == 0 || dim % n_heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  wq_ = Linear(params, prefix + ".wq", prefix + ".bq", dim, dim);
  wk_ = Linear(params, prefix + ".wk", "", dim, dim);
  wv_ = Linear(params, prefix + ".wv", prefix + ".bv", dim, dim);
  wo_ = Linear(params, prefix + ".wo", prefix + ".bo", dim, dim);
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys_values,
                                      const AttentionMask& mask) const {
  if (queries.dim() != 2 || keys_values.dim() != 2 || queries.size(1) != dim_ ||
      keys_values.size(1) != dim_) {
    throw ContractError("attention: expected [L, " + std::to_string(dim_) + "] inputs, got " +
                        shape_string(queries.shape()) + " and " +
                        shape_string(keys_values.shape()));
  }
  const std::size_t lq = queries.size(0), lk = keys_values.size(0);
  const std::size_t dh = dim_ / n_heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = wq_(queries);
  const Tensor k = wk_(keys_values);
  const Tensor v = wv_(keys_values);
  const bool any_mask = !mask.key_mask.empty() || mask.causal;
  const Mask vis = any_mask ? attention_visibility(lq, lk, mask) : Mask{};

  std::vector<Tensor> heads;
  heads.reserve(n_heads_);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Tensor qh = slice_lastdim(q, h * dh, dh);
    const Tensor kh = slice_lastdim(k, h * dh, dh);
    const Tensor vh = slice_lastdim(v, h * dh, dh);
    const Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    const Tensor probs =
        any_mask ? masked_softmax_lastdim(scores, vis) : softmax_lastdim(scores);
    heads.push_back(matmul(probs, vh));
  }
  const Tensor merged = n_heads_ == 1 ? heads[0] : concat_lastdim(heads);
  return wo_(merged);
}

Tensor MultiHeadAttention::query_weights(const Tensor& query, const Tensor& keys) const {
  const std::size_t dh = dim_ / n_heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = reshape(wq_(query), {1, dim_});
  const Tensor k = wk_(keys);
  std::vector<Tensor> rows;
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Tensor scores =
        scale(matmul_nt(slice_lastdim(q, h * dh, dh), slice_lastdim(k, h * dh, dh)), inv_sqrt);
    rows.push_back(softmax_lastdim(scores));
  }
  return concat_rows(rows);
}

FeedForward::FeedForward(ParameterStore& params, const std::string& prefix, std::size_t dim,
                         std::size_t hidden)
    : fc1_(params, prefix + ".w1", prefix + ".b1", dim, hidden),
      fc2_(params, prefix + ".w2", prefix + ".b2", hidden, dim) {}

Tensor FeedForward::operator()(const Tensor& x) const { return fc2_(relu(fc1_(x))); }

EncoderLayer::EncoderLayer(ParameterStore& params, const std::string& prefix,
                           std::size_t dim, std::size_t n_heads, std::size_t ffn_hidden)
    : attn_(params, prefix + ".attn", dim, n_heads),
      ln1_(params, prefix + ".ln1", dim),
      ln2_(params, prefix + ".ln2", dim),
      ffn_(params, prefix + ".ffn", dim, ffn_hidden) {}

Tensor EncoderLayer::operator()(const Tensor& x, const Mask& key_mask) const {
  const Tensor h = ln1_(add(x, attn_(x, x, AttentionMask{key_mask, false})));
  return ln2_(add(h, ffn_(h)));
}

DecoderLayer::DecoderLayer(ParameterStore& params, const std::string& prefix,
                           std::size_t dim, std::size_t n_heads, std::size_t ffn_hidden)
    : self_attn_(params, prefix + ".self_attn", dim, n_heads),
      cross_attn_(params, prefix + ".cross_attn", dim, n_heads),
      ln1_(params, prefix + ".ln1", dim),
      ln2_(params, prefix + ".ln2", dim),
      ln3_(params, prefix + ".ln3", dim),
      ffn_(params, prefix + ".ffn", dim, ffn_hidden) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& memory) const {
  const Tensor h1 = ln1_(add(x, self_attn_(x, x, AttentionMask{{}, true})));
  const Tensor h2 = ln2_(add(h1, cross_attn_(h1, memory)));
  return ln3_(add(h2, ffn_(h2)));
}

}  // namespace imagechat
