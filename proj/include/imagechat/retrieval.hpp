// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval dialogue model: image/style/dialogue encoders, a combiner and a
// response encoder trained with in-batch negatives; candidate ranking and the
// recall@k evaluation protocol.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "imagechat/checkpoint.hpp"
#include "imagechat/combiner.hpp"
#include "imagechat/data.hpp"
#include "imagechat/encoders.hpp"
#include "imagechat/feature_store.hpp"
#include "imagechat/metrics.hpp"
#include "imagechat/modality.hpp"
#include "imagechat/optim.hpp"

namespace imagechat {

struct RetrievalModelConfig {
  TextEncoderConfig text;
  std::size_t feature_dim = kImageFeatureDim;
  std::size_t image_hidden = 1024;
  std::size_t image_out_dim = 500;
  std::size_t style_dim = 500;
  std::size_t n_styles = 0;
  CombinerConfig combiner;

  // Every modality width must equal text.output_dim and combiner.dim.
  void validate() const;
};

void to_json(nlohmann::json& j, const RetrievalModelConfig& c);
void from_json(const nlohmann::json& j, RetrievalModelConfig& c);

// Candidate encodings keyed by (parameter content hash, token ids). A cache
// is bound to the hash it was created with; entries are only valid for
// parameters with that hash.
class CandidateCache {
 public:
  explicit CandidateCache(std::uint64_t params_hash) : params_hash_(params_hash) {}

  std::uint64_t params_hash() const { return params_hash_; }
  std::optional<std::vector<double>> find(std::span<const int> ids) const;
  void put(std::span<const int> ids, std::vector<double> value);
  std::size_t size() const;

 private:
  std::string key(std::span<const int> ids) const;

  mutable std::mutex mu_;
  std::uint64_t params_hash_;
  std::unordered_map<std::string, std::vector<double>> entries_;
};

class RetrievalModel {
 public:
  RetrievalModel(const RetrievalModelConfig& config, Vocabulary vocab,
                 std::vector<std::string> styles, std::uint64_t seed);

  const RetrievalModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return *params_; }
  const ParameterStore& params() const { return *params_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<std::string>& styles() const { return styles_; }
  std::size_t dim() const { return cfg_.text.output_dim; }

  // History utterances joined with the separator token; the oldest tokens are
  // dropped first when the sequence exceeds max_len. Empty history -> {}.
  std::vector<int> history_ids(const std::vector<std::string>& history) const;
  // Candidate tokens, truncated to max_len. Empty text is a ContractError.
  std::vector<int> candidate_ids(const std::string& text) const;

  // Encodes the modalities in `mask`. Modalities in `zeroed` are replaced by
  // zero vectors instead of running their encoder. Dialogue is absent when
  // the history is empty.
  EncodedContext encode_context(const TurnContext& ctx, const FeatureStore& features,
                                ModalityMask mask,
                                ModalityMask zeroed = ModalityMask::none()) const;
  // r_T; the zero vector when no masked-in modality has input.
  Tensor context_vector(const TurnContext& ctx, const FeatureStore& features,
                        ModalityMask mask = ModalityMask::all(),
                        ModalityMask zeroed = ModalityMask::none()) const;
  FusedContext fuse(const EncodedContext& enc, ModalityMask mask) const;

  Tensor encode_dialogue(const std::vector<std::string>& history) const;
  Tensor encode_candidate(const std::string& text) const;
  // [N, dim], gradient-free; uses `cache` when given.
  Tensor encode_candidates(std::span<const std::string> texts,
                           CandidateCache* cache = nullptr) const;

  RankingResult rank(const TurnContext& ctx, std::span<const std::string> candidates,
                     const FeatureStore& features, ModalityMask mask = ModalityMask::all(),
                     CandidateCache* cache = nullptr) const;

  nlohmann::json config_json() const;
  void save(const std::filesystem::path& path, const nlohmann::json& run_info = {}) const;
  static RetrievalModel load(const std::filesystem::path& path);
  static RetrievalModel from_checkpoint(const LoadedCheckpoint& ckpt);

  // Copies the pretrained response encoder into both text encoders.
  std::size_t init_from_pretrain(const LoadedCheckpoint& pretrained);

 private:
  RetrievalModelConfig cfg_;
  Vocabulary vocab_;
  std::vector<std::string> styles_;
  std::unordered_map<std::string, std::size_t> style_index_;
  std::unique_ptr<ParameterStore> params_;
  ImageMlp image_;
  StyleEncoder style_;
  TextEncoder dialogue_;
  TextEncoder response_;
  Combiner combiner_;

  const TextEncoder& response_encoder() const;
};

// ---------------------------------------------------------------- losses

// Mean over rows of -log softmax(C R^T)[i][i]; contexts and candidates [B, d].
Tensor in_batch_loss(const Tensor& contexts, const Tensor& candidates);
// Row i is scored against its own candidate and k others drawn without
// replacement from the batch; requires 1 <= k <= B - 1.
Tensor sampled_negatives_loss(const Tensor& contexts, const Tensor& candidates, std::size_t k,
                              std::uint64_t seed);

// Forward pass of one training batch.
Tensor retrieval_batch_loss(const RetrievalModel& model, std::span<const TurnSample> batch,
                            const FeatureStore& features, ModalityMask mask);

// ------------------------------------------------------------- training

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> valid_r1;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  std::size_t steps = 0;
  std::optional<double> best_valid_r1;
  std::size_t best_step = 0;
  bool stopped_early = false;
};

struct RetrievalTrainConfig {
  std::size_t batch_size = 500;
  std::size_t max_steps = 1000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  ModalityMask mask = ModalityMask::all();
  std::size_t eval_every = 0;  // 0 disables validation
  std::size_t patience = 5;    // evaluations without improvement
  std::size_t valid_candidates = 100;
};

void to_json(nlohmann::json& j, const RetrievalTrainConfig& c);
void from_json(const nlohmann::json& j, RetrievalTrainConfig& c);

using LogCallback = std::function<void(const TrainLogEntry&)>;

// Validation (when `valid` is non-empty and eval_every > 0) tracks R@1 and
// restores the best parameters on early stop or at the end.
TrainResult train_retrieval(RetrievalModel& model, const std::vector<TurnSample>& train,
                            const FeatureStore& features, const RetrievalTrainConfig& config,
                            const std::vector<TurnSample>& valid = {},
                            const LogCallback& on_log = {});

struct PretrainPair {
  std::string context;
  std::string response;
};

std::vector<PretrainPair> load_pretrain_pairs(const std::filesystem::path& path);

struct PretrainConfig {
  std::size_t k_negatives = 31;
  std::size_t batch_size = 32;
  std::size_t max_steps = 1000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

Tensor pretrain_batch_loss(const RetrievalModel& model, std::span<const PretrainPair> batch,
                           std::size_t k, std::uint64_t seed);
TrainResult pretrain(RetrievalModel& model, const std::vector<PretrainPair>& pairs,
                     const PretrainConfig& config, const LogCallback& on_log = {});

// ----------------------------------------------------------- evaluation

class Scorer {
 public:
  virtual ~Scorer() = default;
  // One score per candidate; higher is better.
  virtual std::vector<double> score(std::size_t item_index, const TurnSample& item,
                                    std::span<const std::string> candidates) const = 0;
  virtual std::string name() const = 0;
};

class RetrievalScorer : public Scorer {
 public:
  RetrievalScorer(const RetrievalModel& model, const FeatureStore& features,
                  ModalityMask mask = ModalityMask::all(),
                  ModalityMask zeroed = ModalityMask::none());
  std::vector<double> score(std::size_t item_index, const TurnSample& item,
                            std::span<const std::string> candidates) const override;
  std::string name() const override { return "retrieval"; }

 private:
  const RetrievalModel& model_;
  const FeatureStore& features_;
  ModalityMask mask_, zeroed_;
  mutable CandidateCache cache_;
};

// 1 for the gold text, 0 otherwise.
class OracleScorer : public Scorer {
 public:
  std::vector<double> score(std::size_t item_index, const TurnSample& item,
                            std::span<const std::string> candidates) const override;
  std::string name() const override { return "oracle"; }
};

// Seeded pseudo-random scores independent of candidate content.
class RandomScorer : public Scorer {
 public:
  explicit RandomScorer(std::uint64_t seed) : seed_(seed) {}
  std::vector<double> score(std::size_t item_index, const TurnSample& item,
                            std::span<const std::string> candidates) const override;
  std::string name() const override { return "random"; }

 private:
  std::uint64_t seed_;
};

// Weighted word overlap between the dialogue history and each candidate.
class IrScorer : public Scorer {
 public:
  explicit IrScorer(IrBaseline baseline) : baseline_(std::move(baseline)) {}
  std::vector<double> score(std::size_t item_index, const TurnSample& item,
                            std::span<const std::string> candidates) const override;
  std::string name() const override { return "ir_baseline"; }

 private:
  IrBaseline baseline_;
};

struct RecallOptions {
  std::size_t n_candidates = 100;
  std::vector<std::size_t> ks = {1, 5};
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct CandidateSet {
  std::vector<std::string> candidates;
  std::size_t gold_index = 0;
};

// Distinct gold responses of `items`, first-seen order.
std::vector<std::string> response_pool(const std::vector<TurnSample>& items);

// n - 1 distractors drawn without replacement from `pool` minus the gold,
// with the gold inserted at a uniformly random position. DataError when the
// pool is too small.
CandidateSet sample_candidates(const std::vector<std::string>& pool, const std::string& gold,
                               std::size_t n, std::uint64_t seed, std::size_t item_index);

MetricReport evaluate_recall(const std::vector<TurnSample>& items,
                             const std::vector<std::string>& pool, const Scorer& scorer,
                             const RecallOptions& options);
// Per-item 1-based gold ranks in item order (same sampling as evaluate_recall).
std::vector<std::size_t> gold_ranks(const std::vector<TurnSample>& items,
                                    const std::vector<std::string>& pool, const Scorer& scorer,
                                    const RecallOptions& options);

struct AblationRow {
  ModalityMask mask;
  std::string label;
  bool present = false;
  MetricReport report;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
  std::string to_text() const;  // R@1 x100 per turn and overall
};

// Runs evaluate_recall for each of the seven ablation masks. `scorer_for`
// returns nullptr when no model exists for a mask; that row is marked absent.
AblationTable run_ablation_matrix(
    const std::function<const Scorer*(ModalityMask)>& scorer_for,
    const std::vector<TurnSample>& items, const std::vector<std::string>& pool,
    const RecallOptions& options);

}  // namespace imagechat
