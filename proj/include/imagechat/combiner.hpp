// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multimodal combiners producing r_T from (r_I, r_S, r_D), and the dot-product
// candidate scorer.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "imagechat/encoders.hpp"
#include "imagechat/modality.hpp"
#include "imagechat/nn.hpp"

namespace imagechat {

enum class CombinerKind { mm_sum, mm_att };

// How MM-Att turns its attention weights into r_T:
//   reweighted_inputs  r_T = sum_m w_m r_m   (original modality vectors)
//   reweighted_states  r_T = sum_m w_m s_m   (fusion-Transformer outputs)
enum class AttReadout { reweighted_inputs, reweighted_states };

std::string to_string(CombinerKind k);
CombinerKind parse_combiner_kind(std::string_view s);
std::string to_string(AttReadout r);
AttReadout parse_att_readout(std::string_view s);

struct CombinerConfig {
  CombinerKind kind = CombinerKind::mm_sum;
  std::size_t dim = 500;
  std::size_t att_layers = 2;
  std::size_t att_heads = 4;
  std::size_t att_ffn_mult = 4;
  AttReadout readout = AttReadout::reweighted_inputs;
};

void to_json(nlohmann::json& j, const CombinerConfig& c);
void from_json(const nlohmann::json& j, CombinerConfig& c);

struct FusedContext {
  Tensor r_t;  // [dim]
  CombinerKind kind = CombinerKind::mm_sum;
  ModalityMask mask;
  // MM-Att only: one weight per masked-in modality, canonical order
  // (image, style, dialogue).
  std::vector<double> weights;
};

// r_T = sum of the masked-in vectors in the order image, style, dialogue.
// Every modality named in `mask` must be present; the mask must be non-empty.
FusedContext mm_sum_fuse(const EncodedContext& enc, ModalityMask mask);

// Stateless for MM-Sum; owns the fusion Transformer and aggregation query
// for MM-Att.
class Combiner {
 public:
  Combiner() = default;
  Combiner(ParameterStore& params, const std::string& prefix, const CombinerConfig& config);

  FusedContext fuse(const EncodedContext& enc, ModalityMask mask) const;
  const CombinerConfig& config() const { return cfg_; }

 private:
  CombinerConfig cfg_;
  std::vector<EncoderLayer> layers_;
  Tensor agg_query_;

  FusedContext mm_att_fuse(const EncodedContext& enc, ModalityMask mask) const;
};

// score_j = r_T . r_C_j; candidates is [N, dim] with N >= 1.
Tensor score_candidates(const Tensor& r_t, const Tensor& candidates);

}  // namespace imagechat
