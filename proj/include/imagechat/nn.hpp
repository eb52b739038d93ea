// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transformer building blocks over ParameterStore tensors. Layers hold
// handles into the store and never own parameter values, so a layer object is
// cheap to copy and always reads the current weights.

#pragma once

#include <string>
#include <vector>

#include "imagechat/params.hpp"
#include "imagechat/tensor.hpp"

namespace imagechat {

// y = x W + b with W [in, out]. Accepts [in] or [rows, in].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& params, const std::string& weight_name,
         const std::string& bias_name, std::size_t in, std::size_t out);

  Tensor operator()(const Tensor& x) const;
  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }  // undefined when bias-free
  std::size_t in_dim() const { return in_; }
  std::size_t out_dim() const { return out_; }

 private:
  Tensor w_, b_;
  std::size_t in_ = 0, out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& params, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const;

 private:
  Tensor gain_, bias_;
};

// Per-key visibility for attention: key_mask[j] == 0 hides key j from every
// query; `causal` additionally hides keys after the query position.
struct AttentionMask {
  Mask key_mask;  // empty means all keys visible
  bool causal = false;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& params, const std::string& prefix, std::size_t dim,
                     std::size_t n_heads);

  // queries [Lq, dim], keys/values [Lk, dim] -> [Lq, dim]
  Tensor operator()(const Tensor& queries, const Tensor& keys_values,
                    const AttentionMask& mask = {}) const;

  // Per-head softmax(q K^T / sqrt(dh)) for a single query vector that is
  // projected with this layer's query weights; returns [n_heads, Lk].
  Tensor query_weights(const Tensor& query, const Tensor& keys) const;

  std::size_t n_heads() const { return n_heads_; }
  std::size_t dim() const { return dim_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  std::size_t dim_ = 0, n_heads_ = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& params, const std::string& prefix, std::size_t dim,
              std::size_t hidden);
  Tensor operator()(const Tensor& x) const;

 private:
  Linear fc1_, fc2_;
};

// Post-LN block: h = LN1(x + SelfAttn(x)); out = LN2(h + FFN(h)).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterStore& params, const std::string& prefix, std::size_t dim,
               std::size_t n_heads, std::size_t ffn_hidden);
  Tensor operator()(const Tensor& x, const Mask& key_mask = {}) const;
  const MultiHeadAttention& attention() const { return attn_; }

 private:
  MultiHeadAttention attn_;
  LayerNorm ln1_, ln2_;
  FeedForward ffn_;
};

// Post-LN decoder block with causal self-attention and cross-attention.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterStore& params, const std::string& prefix, std::size_t dim,
               std::size_t n_heads, std::size_t ffn_hidden);
  Tensor operator()(const Tensor& x, const Tensor& memory) const;

 private:
  MultiHeadAttention self_attn_, cross_attn_;
  LayerNorm ln1_, ln2_, ln3_;
  FeedForward ffn_;
};

// Builds the [Lq * Lk] visibility mask consumed by masked_softmax_lastdim.
Mask attention_visibility(std::size_t lq, std::size_t lk, const AttentionMask& mask);

}  // namespace imagechat
