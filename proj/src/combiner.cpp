// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/combiner.hpp"

#include "imagechat/errors.hpp"

namespace imagechat {

namespace {

constexpr Modality kOrder[] = {Modality::image, Modality::style, Modality::dialogue};

std::vector<Tensor> masked_vectors(const EncodedContext& enc, ModalityMask mask) {
  if (mask.empty()) throw ContractError("combiner: modality mask is empty");
  std::vector<Tensor> out;
  std::size_t width = 0;
  for (Modality m : kOrder) {
    if (!mask.has(m)) continue;
    const Tensor& v = enc.get(m);
    if (!v.defined()) {
      throw ContractError("combiner: mask names " + ModalityMask::of(m).to_string() +
                          " but that modality is absent");
    }
    if (v.dim() != 1) throw ContractError("combiner: modality vectors must be 1-d");
    if (width == 0) width = v.size(0);
    if (v.size(0) != width) {
      throw ContractError("combiner: modality widths differ (" + std::to_string(width) +
                          " vs " + std::to_string(v.size(0)) + ")");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::string to_string(CombinerKind k) { return k == CombinerKind::mm_sum ? "mm_sum" : "mm_att"; }

CombinerKind parse_combiner_kind(std::string_view s) {
  if (s == "mm_sum" || s == "sum") return CombinerKind::mm_sum;
  if (s == "mm_att" || s == "att") return CombinerKind::mm_att;
  throw ConfigError("unknown combiner '" + std::string(s) + "'");
}

std::string to_string(AttReadout r) {
  return r == AttReadout::reweighted_inputs ? "reweighted_inputs" : "reweighted_states";
}

AttReadout parse_att_readout(std::string_view s) {
  if (s == "reweighted_inputs") return AttReadout::reweighted_inputs;
  if (s == "reweighted_states") return AttReadout::reweighted_states;
  throw ConfigError("unknown attention readout '" + std::string(s) + "'");
}

void to_json(nlohmann::json& j, const CombinerConfig& c) {
  j = {{"kind", to_string(c.kind)},     {"dim", c.dim},
       {"att_layers", c.att_layers},    {"att_heads", c.att_heads},
       {"att_ffn_mult", c.att_ffn_mult}, {"readout", to_string(c.readout)}};
}

void from_json(const nlohmann::json& j, CombinerConfig& c) {
  CombinerConfig d;
  c.kind = parse_combiner_kind(j.value("kind", to_string(d.kind)));
  c.dim = j.value("dim", d.dim);
  c.att_layers = j.value("att_layers", d.att_layers);
  c.att_heads = j.value("att_heads", d.att_heads);
  c.att_ffn_mult = j.value("att_ffn_mult", d.att_ffn_mult);
  c.readout = parse_att_readout(j.value("readout", to_string(d.readout)));
}

FusedContext mm_sum_fuse(const EncodedContext& enc, ModalityMask mask) {
  const auto parts = masked_vectors(enc, mask);
  Tensor r = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) r = add(r, parts[i]);
  return {r, CombinerKind::mm_sum, mask, {}};
}

Combiner::Combiner(ParameterStore& params, const std::string& prefix,
                   const CombinerConfig& config)
    : cfg_(config) {
  if (cfg_.dim == 0) throw ConfigError("combiner width must be positive");
  if (cfg_.kind != CombinerKind::mm_att) return;
  if (cfg_.att_layers == 0) throw ConfigError("MM-Att needs at least one layer");
  for (std::size_t i = 0; i < cfg_.att_layers; ++i) {
    layers_.emplace_back(params, prefix + ".layer" + std::to_string(i), cfg_.dim,
                         cfg_.att_heads, cfg_.dim * cfg_.att_ffn_mult);
  }
  agg_query_ = params.add(prefix + ".agg_query", {cfg_.dim}, Init::normal_embedding);
}

FusedContext Combiner::fuse(const EncodedContext& enc, ModalityMask mask) const {
  return cfg_.kind == CombinerKind::mm_sum ? mm_sum_fuse(enc, mask) : mm_att_fuse(enc, mask);
}

FusedContext Combiner::mm_att_fuse(const EncodedContext& enc, ModalityMask mask) const {
  const auto parts = masked_vectors(enc, mask);
  if (parts[0].size(0) != cfg_.dim) {
    throw ContractError("MM-Att: modality width " + std::to_string(parts[0].size(0)) +
                        ", expected " + std::to_string(cfg_.dim));
  }
  const Tensor inputs = concat_rows(parts);
  Tensor s = inputs;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) s = layers_[i](s);
  const EncoderLayer& last = layers_.back();
  const Tensor last_in = s;
  const Tensor source =
      cfg_.readout == AttReadout::reweighted_inputs ? inputs : last(last_in);

  FusedContext out{Tensor(), CombinerKind::mm_att, mask, {}};
  if (parts.size() == 1) {
    out.r_t = row(source, 0);
    out.weights = {1.0};
    return out;
  }
  const Tensor per_head = last.attention().query_weights(agg_query_, last_in);
  const std::size_t heads = per_head.size(0);
  const Tensor avg = scale(matmul(Tensor::full({1, heads}, 1.0), per_head),
                           1.0 / static_cast<double>(heads));
  out.r_t = reshape(matmul(avg, source), {cfg_.dim});
  out.weights = avg.to_vector();
  return out;
}

Tensor score_candidates(const Tensor& r_t, const Tensor& candidates) {
  if (!candidates.defined() || candidates.dim() != 2 || candidates.size(0) == 0) {
    throw ContractError("score_candidates: need at least one candidate");
  }
  if (r_t.dim() != 1 || r_t.size(0) != candidates.size(1)) {
    throw ContractError("score_candidates: context width " + shape_string(r_t.shape()) +
                        " vs candidates " + shape_string(candidates.shape()));
  }
  const std::size_t n = candidates.size(0);
  return reshape(matmul_nt(reshape(r_t, {1, r_t.size(0)}), candidates), {n});
}

}  // namespace imagechat
