// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/retrieval.hpp"

#include <algorithm>
#include <exception>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "imagechat/errors.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

// ------------------------------------------------------------------ config

void RetrievalModelConfig::validate() const {
  text.validate();
  const std::size_t d = text.output_dim;
  if (image_out_dim != d || style_dim != d || combiner.dim != d) {
    throw ConfigError("retrieval widths disagree: text " + std::to_string(d) + ", image " +
                      std::to_string(image_out_dim) + ", style " + std::to_string(style_dim) +
                      ", combiner " + std::to_string(combiner.dim));
  }
  if (feature_dim == 0 || image_hidden == 0) throw ConfigError("image encoder widths must be positive");
  if (n_styles == 0) throw ConfigError("retrieval model needs at least one style");
}

void to_json(nlohmann::json& j, const RetrievalModelConfig& c) {
  j = {{"text", c.text},
       {"feature_dim", c.feature_dim},
       {"image_hidden", c.image_hidden},
       {"image_out_dim", c.image_out_dim},
       {"style_dim", c.style_dim},
       {"n_styles", c.n_styles},
       {"combiner", c.combiner}};
}

void from_json(const nlohmann::json& j, RetrievalModelConfig& c) {
  RetrievalModelConfig d;
  c.text = j.value("text", d.text);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.image_hidden = j.value("image_hidden", d.image_hidden);
  c.image_out_dim = j.value("image_out_dim", d.image_out_dim);
  c.style_dim = j.value("style_dim", d.style_dim);
  c.n_styles = j.value("n_styles", d.n_styles);
  c.combiner = j.value("combiner", d.combiner);
}

// ------------------------------------------------------------------- cache

std::string CandidateCache::key(std::span<const int> ids) const {
  std::string k;
  k.reserve(ids.size() * 4);
  for (int id : ids) {
    const auto u = static_cast<std::uint32_t>(id);
    k.append(reinterpret_cast<const char*>(&u), sizeof(u));
  }
  return k;
}

std::optional<std::vector<double>> CandidateCache::find(std::span<const int> ids) const {
  const std::string k = key(ids);
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(k);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void CandidateCache::put(std::span<const int> ids, std::vector<double> value) {
  std::string k = key(ids);
  std::lock_guard<std::mutex> lock(mu_);
  entries_.emplace(std::move(k), std::move(value));
}

std::size_t CandidateCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_.size();
}

// ------------------------------------------------------------------- model

namespace {

RetrievalModelConfig resolve(RetrievalModelConfig cfg, const Vocabulary& vocab,
                             const std::vector<std::string>& styles) {
  if (cfg.text.vocab_size == 0) cfg.text.vocab_size = vocab.size();
  if (cfg.text.vocab_size != vocab.size()) {
    throw ConfigError("config vocab_size " + std::to_string(cfg.text.vocab_size) +
                      " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  if (cfg.n_styles == 0) cfg.n_styles = styles.size();
  if (cfg.n_styles != styles.size()) {
    throw ConfigError("config n_styles " + std::to_string(cfg.n_styles) +
                      " does not match style list of " + std::to_string(styles.size()));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

RetrievalModel::RetrievalModel(const RetrievalModelConfig& config, Vocabulary vocab,
                               std::vector<std::string> styles, std::uint64_t seed)
    : cfg_(resolve(config, vocab, styles)),
      vocab_(std::move(vocab)),
      styles_(std::move(styles)),
      params_(std::make_unique<ParameterStore>(seed)) {
  for (std::size_t i = 0; i < styles_.size(); ++i) style_index_.emplace(styles_[i], i);
  ParameterStore& p = *params_;
  image_ = ImageMlp(p, "image_encoder", cfg_.feature_dim, cfg_.image_hidden, cfg_.image_out_dim);
  style_ = StyleEncoder(p, "style_encoder.table", cfg_.n_styles, cfg_.style_dim);
  dialogue_ = TextEncoder(p, "dialogue_encoder", cfg_.text, true);
  if (!cfg_.text.shared_response_encoder) {
    response_ = TextEncoder(p, "response_encoder", cfg_.text, true);
  }
  combiner_ = Combiner(p, "combiner", cfg_.combiner);
}

const TextEncoder& RetrievalModel::response_encoder() const {
  return cfg_.text.shared_response_encoder ? dialogue_ : response_;
}

std::vector<int> RetrievalModel::history_ids(const std::vector<std::string>& history) const {
  std::vector<int> ids;
  for (const auto& utterance : history) {
    const auto toks = vocab_.encode(tokenize(utterance));
    if (toks.empty()) continue;
    if (!ids.empty()) ids.push_back(Vocabulary::kSep);
    ids.insert(ids.end(), toks.begin(), toks.end());
  }
  const std::size_t max_len = cfg_.text.max_len;
  if (ids.size() > max_len) {
    ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(max_len));
  }
  return ids;
}

std::vector<int> RetrievalModel::candidate_ids(const std::string& text) const {
  auto ids = vocab_.encode(tokenize(text));
  if (ids.empty()) throw ContractError("empty candidate response");
  if (ids.size() > cfg_.text.max_len) ids.resize(cfg_.text.max_len);
  return ids;
}

EncodedContext RetrievalModel::encode_context(const TurnContext& ctx,
                                              const FeatureStore& features, ModalityMask mask,
                                              ModalityMask zeroed) const {
  EncodedContext enc;
  const std::size_t d = dim();
  if (mask.has(Modality::image)) {
    const auto& feat = features.get(ctx.image_id);
    enc.image = zeroed.has(Modality::image) ? Tensor::zeros({d}) : image_(feature_tensor(feat));
  }
  if (mask.has(Modality::style)) {
    auto it = style_index_.find(ctx.responder_style);
    if (it == style_index_.end()) {
      throw CatalogError("unknown style '" + ctx.responder_style + "'");
    }
    enc.style = zeroed.has(Modality::style) ? Tensor::zeros({d}) : style_.encode(it->second);
  }
  if (mask.has(Modality::dialogue)) {
    const auto ids = history_ids(ctx.history);
    if (!ids.empty()) {
      enc.dialogue = zeroed.has(Modality::dialogue) ? Tensor::zeros({d}) : dialogue_.encode(ids);
    } else if (ctx.turn_index >= 2) {
      throw ContractError("turn " + std::to_string(ctx.turn_index) + " context has empty history");
    }
  }
  return enc;
}

FusedContext RetrievalModel::fuse(const EncodedContext& enc, ModalityMask mask) const {
  return combiner_.fuse(enc, mask);
}

Tensor RetrievalModel::context_vector(const TurnContext& ctx, const FeatureStore& features,
                                      ModalityMask mask, ModalityMask zeroed) const {
  if (mask.empty()) throw ContractError("modality mask is empty");
  const EncodedContext enc = encode_context(ctx, features, mask, zeroed);
  const ModalityMask effective = mask & enc.present();
  if (effective.empty()) return Tensor::zeros({dim()});
  return combiner_.fuse(enc, effective).r_t;
}

Tensor RetrievalModel::encode_dialogue(const std::vector<std::string>& history) const {
  const auto ids = history_ids(history);
  if (ids.empty()) throw ContractError("empty dialogue history");
  return dialogue_.encode(ids);
}

Tensor RetrievalModel::encode_candidate(const std::string& text) const {
  return response_encoder().encode(candidate_ids(text));
}

Tensor RetrievalModel::encode_candidates(std::span<const std::string> texts,
                                         CandidateCache* cache) const {
  if (texts.empty()) throw ContractError("no candidates to encode");
  NoGradGuard no_grad;
  std::vector<Tensor> rows;
  rows.reserve(texts.size());
  for (const auto& text : texts) {
    const auto ids = candidate_ids(text);
    if (cache) {
      if (auto hit = cache->find(ids)) {
        rows.push_back(Tensor::from({dim()}, std::move(*hit)));
        continue;
      }
    }
    Tensor v = response_encoder().encode(ids);
    if (cache) cache->put(ids, v.to_vector());
    rows.push_back(std::move(v));
  }
  return concat_rows(rows);
}

RankingResult RetrievalModel::rank(const TurnContext& ctx, std::span<const std::string> candidates,
                                   const FeatureStore& features, ModalityMask mask,
                                   CandidateCache* cache) const {
  NoGradGuard no_grad;
  const Tensor r_t = context_vector(ctx, features, mask);
  const Tensor scores = score_candidates(r_t, encode_candidates(candidates, cache));
  const auto values = scores.to_vector();
  return rank_scores(values);
}

nlohmann::json RetrievalModel::config_json() const {
  return {{"kind", "retrieval"}, {"model", cfg_}};
}

void RetrievalModel::save(const std::filesystem::path& path, const nlohmann::json& run_info) const {
  nlohmann::json extra = {{"kind", "retrieval"}, {"vocab", vocab_.to_json()}, {"styles", styles_}};
  if (!run_info.is_null()) extra["run"] = run_info;
  save_checkpoint(path, *params_, config_json(), extra);
}

RetrievalModel RetrievalModel::from_checkpoint(const LoadedCheckpoint& ckpt) {
  if (ckpt.manifest.value("kind", std::string()) != "retrieval") {
    throw FormatError("checkpoint is not a retrieval model");
  }
  const auto cfg = ckpt.config().at("model").get<RetrievalModelConfig>();
  RetrievalModel model(cfg, Vocabulary::from_json(ckpt.manifest.at("vocab")),
                       ckpt.manifest.at("styles").get<std::vector<std::string>>(), ckpt.seed());
  restore_parameters(*model.params_, ckpt, true);
  return model;
}

RetrievalModel RetrievalModel::load(const std::filesystem::path& path) {
  return from_checkpoint(load_checkpoint(path));
}

std::size_t RetrievalModel::init_from_pretrain(const LoadedCheckpoint& pretrained) {
  if (pretrained.manifest.contains("vocab") &&
      pretrained.manifest.at("vocab") != vocab_.to_json()) {
    throw ConfigError("pretrained checkpoint uses a different vocabulary");
  }
  auto has_prefix = [&](const std::string& prefix) {
    return std::any_of(pretrained.tensors.begin(), pretrained.tensors.end(),
                       [&](const auto& kv) { return kv.first.rfind(prefix, 0) == 0; });
  };
  const std::string from =
      has_prefix("response_encoder.") ? "response_encoder." : "dialogue_encoder.";
  if (!has_prefix(from)) throw FormatError("pretrained checkpoint has no text encoder");
  std::vector<std::string> targets = {"dialogue_encoder."};
  if (!cfg_.text.shared_response_encoder) targets.push_back("response_encoder.");

  std::size_t copied = 0;
  for (const auto& [name, tensor] : pretrained.tensors) {
    if (name.rfind(from, 0) != 0) continue;
    const std::string suffix = name.substr(from.size());
    for (const auto& to : targets) {
      const std::string target = to + suffix;
      if (!params_->contains(target)) {
        throw ConfigError("pretrained tensor " + name + " has no counterpart " + target);
      }
      if (params_->get(target).shape() != tensor.first) {
        throw ConfigError("pretrained tensor " + name + " has shape " +
                          shape_string(tensor.first) + ", model expects " +
                          shape_string(params_->get(target).shape()));
      }
      const std::vector<double> values(tensor.second.begin(), tensor.second.end());
      params_->assign(target, values);
      ++copied;
    }
  }
  return copied;
}

// ------------------------------------------------------------------ losses

Tensor in_batch_loss(const Tensor& contexts, const Tensor& candidates) {
  if (contexts.dim() != 2 || candidates.dim() != 2 || contexts.size(0) != candidates.size(0)) {
    throw ContractError("in_batch_loss: need matching [B, d] contexts and candidates");
  }
  const std::size_t b = contexts.size(0);
  if (b < 2) throw ContractError("in_batch_loss: batch needs at least 2 examples");
  std::vector<int> targets(b);
  std::iota(targets.begin(), targets.end(), 0);
  return cross_entropy(matmul_nt(contexts, candidates), targets);
}

Tensor sampled_negatives_loss(const Tensor& contexts, const Tensor& candidates, std::size_t k,
                              std::uint64_t seed) {
  if (contexts.dim() != 2 || candidates.dim() != 2 || contexts.size(0) != candidates.size(0)) {
    throw ContractError("sampled_negatives_loss: need matching [B, d] contexts and candidates");
  }
  const std::size_t b = contexts.size(0);
  if (k < 1 || k + 1 > b) {
    throw ConfigError("k_negatives must lie in [1, " + std::to_string(b - 1) + "], got " +
                      std::to_string(k));
  }
  std::vector<std::vector<std::size_t>> indices(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> others;
    others.reserve(b - 1);
    for (std::size_t j = 0; j < b; ++j)
      if (j != i) others.push_back(j);
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(i + 1)));
    for (std::size_t s = 0; s < k; ++s) {
      std::uniform_int_distribution<std::size_t> pick(s, others.size() - 1);
      std::swap(others[s], others[pick(rng)]);
    }
    indices[i].push_back(i);
    indices[i].insert(indices[i].end(), others.begin(),
                      others.begin() + static_cast<std::ptrdiff_t>(k));
  }
  const std::vector<int> targets(b, 0);
  return cross_entropy(gather_columns(matmul_nt(contexts, candidates), indices), targets);
}

Tensor retrieval_batch_loss(const RetrievalModel& model, std::span<const TurnSample> batch,
                            const FeatureStore& features, ModalityMask mask) {
  std::vector<Tensor> contexts, candidates;
  std::unordered_set<std::string> seen;
  std::size_t duplicates = 0;
  for (const auto& s : batch) {
    contexts.push_back(model.context_vector(s.context, features, mask));
    candidates.push_back(model.encode_candidate(s.gold));
    if (!seen.insert(s.gold).second) ++duplicates;
  }
  if (duplicates > 0) {
    spdlog::debug("training batch of {} has {} duplicate gold responses", batch.size(), duplicates);
  }
  return in_batch_loss(concat_rows(contexts), concat_rows(candidates));
}

// ---------------------------------------------------------------- training

void to_json(nlohmann::json& j, const RetrievalTrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"max_steps", c.max_steps},
       {"lr", c.lr},                 {"seed", c.seed},
       {"mask", c.mask.to_string()}, {"eval_every", c.eval_every},
       {"patience", c.patience},     {"valid_candidates", c.valid_candidates}};
}

void from_json(const nlohmann::json& j, RetrievalTrainConfig& c) {
  RetrievalTrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.mask = ModalityMask::parse(j.value("mask", d.mask.to_string()));
  c.eval_every = j.value("eval_every", d.eval_every);
  c.patience = j.value("patience", d.patience);
  c.valid_candidates = j.value("valid_candidates", d.valid_candidates);
}

namespace {

using Snapshot = std::map<std::string, std::vector<double>>;

Snapshot snapshot(const ParameterStore& params) {
  Snapshot s;
  for (const auto& [name, t] : params.items()) s.emplace(name, t.to_vector());
  return s;
}

void restore(ParameterStore& params, const Snapshot& s) {
  for (const auto& [name, values] : s) params.assign(name, values);
}

}  // namespace

TrainResult train_retrieval(RetrievalModel& model, const std::vector<TurnSample>& train,
                            const FeatureStore& features, const RetrievalTrainConfig& config,
                            const std::vector<TurnSample>& valid, const LogCallback& on_log) {
  if (config.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (train.size() < 2) throw ConfigError("training needs at least 2 examples");
  if (config.lr <= 0.0) throw ConfigError("learning rate must be positive");
  const std::size_t batch = std::min(config.batch_size, train.size());
  BatchSampler sampler(train.size(), batch, config.seed);
  AdamState adam(AdamConfig{config.lr});

  const bool validate = config.eval_every > 0 && !valid.empty();
  std::vector<std::string> valid_pool;
  RecallOptions recall;
  if (validate) {
    valid_pool = response_pool(valid);
    recall.n_candidates = std::min(config.valid_candidates, valid_pool.size());
    recall.ks = {1};
    recall.seed = config.seed;
  }
  Snapshot best;
  std::size_t bad_evals = 0;

  TrainResult result;
  std::vector<TurnSample> items(batch);
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const auto idx = sampler.next();
    for (std::size_t i = 0; i < batch; ++i) items[i] = train[idx[i]];
    const Tensor loss = retrieval_batch_loss(model, items, features, config.mask);
    const GradientMap grads = compute_gradients(loss, model.params());
    adam_step(model.params(), grads, adam);

    TrainLogEntry entry{step, loss.item(), std::nullopt};
    if (validate && (step % config.eval_every == 0 || step == config.max_steps)) {
      RetrievalScorer scorer(model, features, config.mask);
      const double r1 = evaluate_recall(valid, valid_pool, scorer, recall).all.at("r1");
      entry.valid_r1 = r1;
      if (!result.best_valid_r1 || r1 > *result.best_valid_r1) {
        result.best_valid_r1 = r1;
        result.best_step = step;
        best = snapshot(model.params());
        bad_evals = 0;
      } else if (++bad_evals >= config.patience) {
        result.stopped_early = true;
      }
    }
    result.log.push_back(entry);
    result.steps = step;
    if (on_log) on_log(entry);
    if (result.stopped_early) break;
  }
  if (validate && !best.empty()) restore(model.params(), best);
  return result;
}

std::vector<PretrainPair> load_pretrain_pairs(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<PretrainPair> pairs;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      pairs.push_back({j.at("context").get<std::string>(), j.at("response").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"k_negatives", c.k_negatives}, {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},     {"lr", c.lr},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.k_negatives = j.value("k_negatives", d.k_negatives);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
}

Tensor pretrain_batch_loss(const RetrievalModel& model, std::span<const PretrainPair> batch,
                           std::size_t k, std::uint64_t seed) {
  std::vector<Tensor> contexts, responses;
  for (const auto& p : batch) {
    contexts.push_back(model.encode_dialogue({p.context}));
    responses.push_back(model.encode_candidate(p.response));
  }
  return sampled_negatives_loss(concat_rows(contexts), concat_rows(responses), k, seed);
}

TrainResult pretrain(RetrievalModel& model, const std::vector<PretrainPair>& pairs,
                     const PretrainConfig& config, const LogCallback& on_log) {
  if (pairs.size() < 2) throw ConfigError("pretraining needs at least 2 pairs");
  if (config.lr <= 0.0) throw ConfigError("learning rate must be positive");
  const std::size_t batch = std::min(config.batch_size, pairs.size());
  if (config.k_negatives < 1 || config.k_negatives + 1 > batch) {
    throw ConfigError("k_negatives must lie in [1, " + std::to_string(batch - 1) + "]");
  }
  BatchSampler sampler(pairs.size(), batch, config.seed);
  AdamState adam(AdamConfig{config.lr});
  TrainResult result;
  std::vector<PretrainPair> items(batch);
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const auto idx = sampler.next();
    for (std::size_t i = 0; i < batch; ++i) items[i] = pairs[idx[i]];
    const Tensor loss =
        pretrain_batch_loss(model, items, config.k_negatives, splitmix64(config.seed + step));
    adam_step(model.params(), compute_gradients(loss, model.params()), adam);
    TrainLogEntry entry{step, loss.item(), std::nullopt};
    result.log.push_back(entry);
    result.steps = step;
    if (on_log) on_log(entry);
  }
  return result;
}

// -------------------------------------------------------------- evaluation

RetrievalScorer::RetrievalScorer(const RetrievalModel& model, const FeatureStore& features,
                                 ModalityMask mask, ModalityMask zeroed)
    : model_(model),
      features_(features),
      mask_(mask),
      zeroed_(zeroed),
      cache_(model.params().content_hash()) {}

std::vector<double> RetrievalScorer::score(std::size_t, const TurnSample& item,
                                           std::span<const std::string> candidates) const {
  NoGradGuard no_grad;
  const Tensor r_t = model_.context_vector(item.context, features_, mask_, zeroed_);
  return score_candidates(r_t, model_.encode_candidates(candidates, &cache_)).to_vector();
}

std::vector<double> OracleScorer::score(std::size_t, const TurnSample& item,
                                        std::span<const std::string> candidates) const {
  std::vector<double> out;
  for (const auto& c : candidates) out.push_back(c == item.gold ? 1.0 : 0.0);
  return out;
}

std::vector<double> RandomScorer::score(std::size_t item_index, const TurnSample&,
                                        std::span<const std::string> candidates) const {
  std::vector<double> out;
  const std::uint64_t base = splitmix64(seed_ ^ splitmix64(item_index));
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const std::uint64_t bits = splitmix64(base + j);
    out.push_back(static_cast<double>(bits >> 11) * 0x1.0p-53);
  }
  return out;
}

std::vector<double> IrScorer::score(std::size_t, const TurnSample& item,
                                    std::span<const std::string> candidates) const {
  std::string context;
  for (const auto& h : item.context.history) {
    if (!context.empty()) context += ' ';
    context += h;
  }
  return baseline_.score_all(context, candidates);
}

std::vector<std::string> response_pool(const std::vector<TurnSample>& items) {
  std::vector<std::string> pool;
  std::unordered_set<std::string> seen;
  for (const auto& s : items)
    if (seen.insert(s.gold).second) pool.push_back(s.gold);
  return pool;
}

CandidateSet sample_candidates(const std::vector<std::string>& pool, const std::string& gold,
                               std::size_t n, std::uint64_t seed, std::size_t item_index) {
  if (n == 0) throw ConfigError("n_candidates must be positive");
  std::vector<std::size_t> eligible;
  eligible.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i] != gold) eligible.push_back(i);
  if (eligible.size() + 1 < n) {
    throw DataError("candidate pool has " + std::to_string(eligible.size()) +
                    " distractors, need " + std::to_string(n - 1));
  }
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(item_index + 0x51ed270b27d3a5c1ULL)));
  for (std::size_t s = 0; s + 1 < n; ++s) {
    std::uniform_int_distribution<std::size_t> pick(s, eligible.size() - 1);
    std::swap(eligible[s], eligible[pick(rng)]);
  }
  std::uniform_int_distribution<std::size_t> slot(0, n - 1);
  CandidateSet set;
  set.gold_index = slot(rng);
  set.candidates.reserve(n);
  std::size_t next = 0;
  for (std::size_t j = 0; j < n; ++j) {
    set.candidates.push_back(j == set.gold_index ? gold : pool[eligible[next++]]);
  }
  return set;
}

std::vector<std::size_t> gold_ranks(const std::vector<TurnSample>& items,
                                    const std::vector<std::string>& pool, const Scorer& scorer,
                                    const RecallOptions& options) {
  std::vector<std::size_t> ranks(items.size(), 0);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto set =
          sample_candidates(pool, items[i].gold, options.n_candidates, options.seed, i);
      const auto scores = scorer.score(i, items[i], set.candidates);
      ranks[i] = gold_rank(scores, set.gold_index);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, items.size()));
  if (threads == 1) {
    work(0, items.size());
    return ranks;
  }
  std::vector<std::thread> pool_threads;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (items.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(items.size(), begin + chunk);
    pool_threads.emplace_back([&, t, begin, end] {
      try {
        work(begin, end);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool_threads) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return ranks;
}

MetricReport evaluate_recall(const std::vector<TurnSample>& items,
                             const std::vector<std::string>& pool, const Scorer& scorer,
                             const RecallOptions& options) {
  if (items.empty()) throw DataError("evaluation split is empty");
  const auto ranks = gold_ranks(items, pool, scorer, options);
  MetricAccumulator acc;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::map<std::string, double> values;
    for (std::size_t k : options.ks) {
      values["r" + std::to_string(k)] = ranks[i] <= k ? 1.0 : 0.0;
    }
    acc.add(items[i].context.turn_index, values);
  }
  MetricReport report = acc.finish();
  report.metadata = {{"seed", options.seed},
                     {"n_candidates", options.n_candidates},
                     {"scorer", scorer.name()}};
  return report;
}

nlohmann::json AblationTable::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j = {{"mask", r.mask.to_string()}, {"label", r.label}, {"present", r.present}};
    if (r.present) j["report"] = r.report.to_json();
    rows_json.push_back(j);
  }
  return {{"rows", rows_json}};
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(40) << "Modules" << std::right << std::setw(9) << "Turn 1"
     << std::setw(9) << "Turn 2" << std::setw(9) << "Turn 3" << std::setw(9) << "All" << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& r : rows) {
    os << std::left << std::setw(40) << r.label << std::right;
    if (!r.present) {
      os << std::setw(9) << "absent" << '\n';
      continue;
    }
    for (int turn = 1; turn <= 3; ++turn) {
      auto it = r.report.turns.find(turn);
      os << std::setw(9);
      if (it == r.report.turns.end() || !it->second.count("r1")) {
        os << "-";
      } else {
        os << 100.0 * it->second.at("r1");
      }
    }
    os << std::setw(9) << 100.0 * r.report.all.at("r1") << '\n';
  }
  return os.str();
}

AblationTable run_ablation_matrix(const std::function<const Scorer*(ModalityMask)>& scorer_for,
                                  const std::vector<TurnSample>& items,
                                  const std::vector<std::string>& pool,
                                  const RecallOptions& options) {
  AblationTable table;
  for (ModalityMask mask : ablation_masks()) {
    AblationRow row;
    row.mask = mask;
    row.label = mask.label();
    const Scorer* scorer = scorer_for(mask);
    if (scorer) {
      row.present = true;
      row.report = evaluate_recall(items, pool, *scorer, options);
      row.report.metadata["mask"] = mask.to_string();
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace imagechat
