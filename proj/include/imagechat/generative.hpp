// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Generative dialogue model: a Transformer encoder over [style] [SEP] history
// with the projected image appended as one extra memory state, and a
// Transformer decoder trained with teacher forcing. Decoding is greedy or beam
// search, both with optional trigram blocking.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "imagechat/checkpoint.hpp"
#include "imagechat/data.hpp"
#include "imagechat/encoders.hpp"
#include "imagechat/feature_store.hpp"
#include "imagechat/metrics.hpp"
#include "imagechat/modality.hpp"

namespace imagechat {

struct GenConfig {
  TextEncoderConfig text;  // encoder; `hidden` is the shared token width
  std::size_t decoder_layers = 4;
  std::size_t decoder_heads = 6;
  std::size_t feature_dim = kImageFeatureDim;
  std::size_t beam_size = 2;
  bool trigram_block = true;
  std::size_t max_decode_len = 32;

  void validate() const;
};

void to_json(nlohmann::json& j, const GenConfig& c);
void from_json(const nlohmann::json& j, GenConfig& c);

struct DecodeOptions {
  std::size_t beam_size = 2;
  bool trigram_block = true;
};

struct DecodeResult {
  std::vector<int> tokens;  // generated ids, END excluded
  double logprob = 0.0;     // sum of log-probs, END included when emitted
  bool finished = false;    // emitted END before the length bound
};

// True when appending `next` to `tokens` would repeat a trigram already in
// `tokens`.
bool trigram_blocked(std::span<const int> tokens, int next);
// True when some trigram occurs twice in `tokens`.
bool has_repeated_trigram(std::span<const int> tokens);

class GenerativeModel {
 public:
  // `vocab` must reserve one style token per entry of `styles`.
  GenerativeModel(const GenConfig& config, Vocabulary vocab, std::vector<std::string> styles,
                  std::uint64_t seed);

  const GenConfig& config() const { return cfg_; }
  ParameterStore& params() { return *params_; }
  const ParameterStore& params() const { return *params_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& styles() const { return styles_; }
  std::size_t width() const { return cfg_.text.hidden; }

  // [style] [SEP] history, history utterances joined by SEP; the oldest
  // history tokens are dropped first to fit max_len. Masked-out parts are
  // omitted. May be empty.
  std::vector<int> encoder_ids(const TurnContext& ctx, ModalityMask mask) const;
  // Encoder states followed by the image state when the image is masked in:
  // [L (+1), width]. With nothing to encode, a lone SEP is encoded.
  Tensor memory(const TurnContext& ctx, const FeatureStore& features,
                ModalityMask mask = ModalityMask::all()) const;
  // Target ids of a gold response, truncated to max_decode_len.
  std::vector<int> target_ids(const std::string& gold) const;

  // Logits [T, vocab] for decoder input [START, prefix...] of length T.
  Tensor decoder_logits(const Tensor& memory, std::span<const int> prefix) const;
  // Full-vocabulary log-probabilities of the next token after `prefix`.
  std::vector<double> next_logprobs(const Tensor& memory, std::span<const int> prefix) const;
  // Whether `id` may be emitted at all (never PAD, START, SEP or a style token).
  bool emittable(int id) const;

  DecodeResult greedy_decode(const Tensor& memory, bool trigram_block = true) const;
  DecodeResult beam_decode(const Tensor& memory, const DecodeOptions& options) const;
  DecodeResult decode(const TurnContext& ctx, const FeatureStore& features,
                      ModalityMask mask = ModalityMask::all()) const;
  DecodeResult decode(const TurnContext& ctx, const FeatureStore& features, ModalityMask mask,
                      const DecodeOptions& options) const;
  std::string text(const DecodeResult& r) const;

  nlohmann::json config_json() const;
  void save(const std::filesystem::path& path, const nlohmann::json& run_info = {}) const;
  static GenerativeModel load(const std::filesystem::path& path);
  static GenerativeModel from_checkpoint(const LoadedCheckpoint& ckpt);

 private:
  GenConfig cfg_;
  Vocabulary vocab_;
  std::vector<std::string> styles_;
  std::unordered_map<std::string, std::size_t> style_index_;
  std::unique_ptr<ParameterStore> params_;
  ImageProjection image_proj_;
  TextEncoder encoder_;
  Tensor dec_token_emb_, dec_pos_emb_;
  std::vector<DecoderLayer> dec_layers_;
  Linear dec_out_;
};

// Teacher-forced cross-entropy, mean over every target token in the batch.
// Samples whose gold has no tokens are skipped with a warning; a batch with
// no usable sample is a ContractError.
Tensor generative_batch_loss(const GenerativeModel& model, std::span<const TurnSample> batch,
                             const FeatureStore& features,
                             ModalityMask mask = ModalityMask::all());

struct GenTrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_steps = 1000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  ModalityMask mask = ModalityMask::all();
};

void to_json(nlohmann::json& j, const GenTrainConfig& c);
void from_json(const nlohmann::json& j, GenTrainConfig& c);

struct GenTrainResult {
  std::vector<double> losses;  // one per step
  std::size_t steps = 0;
};

// `stop` is polled after every step; returning true ends training.
GenTrainResult train_generative(
    GenerativeModel& model, const std::vector<TurnSample>& train, const FeatureStore& features,
    const GenTrainConfig& config,
    const std::function<bool(std::size_t step, double loss)>& stop = {});

struct GenerationOutput {
  std::string output_text;
  double logprob = 0.0;
};

// Decodes every sample and reports rouge_l and f1 (per-example means) and
// bleu4 (corpus BLEU-4 per turn and overall). `outputs`, when given,
// receives one entry per sample.
MetricReport evaluate_generation(const GenerativeModel& model,
                                 const std::vector<TurnSample>& samples,
                                 const FeatureStore& features, ModalityMask mask,
                                 const DecodeOptions& options,
                                 std::vector<GenerationOutput>* outputs = nullptr);

}  // namespace imagechat
