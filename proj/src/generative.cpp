// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/generative.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

#include <spdlog/spdlog.h>

#include "imagechat/errors.hpp"
#include "imagechat/optim.hpp"
#include "imagechat/util.hpp"

namespace imagechat {

void GenConfig::validate() const {
  text.validate();
  if (decoder_layers == 0) throw ConfigError("decoder needs at least one layer");
  if (decoder_heads == 0 || text.hidden % decoder_heads != 0) {
    throw ConfigError("decoder width " + std::to_string(text.hidden) + " not divisible by " +
                      std::to_string(decoder_heads) + " heads");
  }
  if (feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (beam_size == 0) throw ConfigError("beam_size must be at least 1");
  if (max_decode_len == 0) throw ConfigError("max_decode_len must be positive");
}

void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"text", c.text},
       {"decoder_layers", c.decoder_layers},
       {"decoder_heads", c.decoder_heads},
       {"feature_dim", c.feature_dim},
       {"beam_size", c.beam_size},
       {"trigram_block", c.trigram_block},
       {"max_decode_len", c.max_decode_len}};
}

void from_json(const nlohmann::json& j, GenConfig& c) {
  GenConfig d;
  c.text = j.value("text", d.text);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.beam_size = j.value("beam_size", d.beam_size);
  c.trigram_block = j.value("trigram_block", d.trigram_block);
  c.max_decode_len = j.value("max_decode_len", d.max_decode_len);
}

bool trigram_blocked(std::span<const int> tokens, int next) {
  const std::size_t n = tokens.size();
  if (n < 2) return false;
  const int a = tokens[n - 2], b = tokens[n - 1];
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (tokens[i] == a && tokens[i + 1] == b && tokens[i + 2] == next) return true;
  }
  return false;
}

bool has_repeated_trigram(std::span<const int> tokens) {
  std::set<std::tuple<int, int, int>> seen;
  for (std::size_t i = 0; i + 2 < tokens.size(); ++i) {
    if (!seen.emplace(tokens[i], tokens[i + 1], tokens[i + 2]).second) return true;
  }
  return false;
}

// ------------------------------------------------------------------- model

namespace {

GenConfig resolve(GenConfig cfg, const Vocabulary& vocab, const std::vector<std::string>& styles) {
  if (cfg.text.vocab_size == 0) cfg.text.vocab_size = vocab.size();
  if (cfg.text.vocab_size != vocab.size()) {
    throw ConfigError("config vocab_size " + std::to_string(cfg.text.vocab_size) +
                      " does not match vocabulary of " + std::to_string(vocab.size()));
  }
  if (vocab.num_styles() != styles.size()) {
    throw ConfigError("vocabulary reserves " + std::to_string(vocab.num_styles()) +
                      " style tokens for " + std::to_string(styles.size()) + " styles");
  }
  for (std::size_t i = 0; i < styles.size(); ++i) {
    if (vocab.token(vocab.style_token(i)) != style_token_text(styles[i])) {
      throw ConfigError("vocabulary style token " + std::to_string(i) + " is not " + styles[i]);
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace

GenerativeModel::GenerativeModel(const GenConfig& config, Vocabulary vocab,
                                 std::vector<std::string> styles, std::uint64_t seed)
    : cfg_(resolve(config, vocab, styles)),
      vocab_(std::move(vocab)),
      styles_(std::move(styles)),
      params_(std::make_unique<ParameterStore>(seed)) {
  for (std::size_t i = 0; i < styles_.size(); ++i) style_index_.emplace(styles_[i], i);
  ParameterStore& p = *params_;
  const std::size_t h = width(), v = vocab_.size();
  image_proj_ = ImageProjection(p, "image_proj", cfg_.feature_dim, h);
  encoder_ = TextEncoder(p, "encoder", cfg_.text, false);
  dec_token_emb_ = p.add("decoder.token_emb", {v, h}, Init::normal_embedding);
  dec_pos_emb_ = p.add("decoder.pos_emb", {cfg_.max_decode_len + 1, h}, Init::normal_embedding);
  for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
    dec_layers_.emplace_back(p, "decoder.layer" + std::to_string(i), h, cfg_.decoder_heads,
                             h * cfg_.text.ffn_mult);
  }
  dec_out_ = Linear(p, "decoder.out.w", "decoder.out.b", h, v);
}

std::vector<int> GenerativeModel::encoder_ids(const TurnContext& ctx, ModalityMask mask) const {
  std::vector<int> prefix;
  if (mask.has(Modality::style)) {
    auto it = style_index_.find(ctx.responder_style);
    if (it == style_index_.end()) throw CatalogError("unknown style '" + ctx.responder_style + "'");
    prefix.push_back(vocab_.style_token(it->second));
  }
  std::vector<int> history;
  if (mask.has(Modality::dialogue)) {
    for (const auto& utterance : ctx.history) {
      const auto toks = vocab_.encode(tokenize(utterance));
      if (toks.empty()) continue;
      if (!history.empty()) history.push_back(Vocabulary::kSep);
      history.insert(history.end(), toks.begin(), toks.end());
    }
  }
  if (history.empty()) return prefix;
  if (!prefix.empty()) prefix.push_back(Vocabulary::kSep);
  const std::size_t max_len = cfg_.text.max_len;
  if (prefix.size() >= max_len) {
    throw ConfigError("max_len " + std::to_string(max_len) + " leaves no room for history");
  }
  const std::size_t room = max_len - prefix.size();
  if (history.size() > room) history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(room));
  prefix.insert(prefix.end(), history.begin(), history.end());
  return prefix;
}

Tensor GenerativeModel::memory(const TurnContext& ctx, const FeatureStore& features,
                               ModalityMask mask) const {
  if (mask.empty()) throw ContractError("modality mask is empty");
  std::vector<int> ids = encoder_ids(ctx, mask);
  const bool image = mask.has(Modality::image);
  std::vector<Tensor> parts;
  if (!ids.empty()) {
    parts.push_back(encoder_.states(ids));
  } else if (!image) {
    ids = {Vocabulary::kSep};
    parts.push_back(encoder_.states(ids));
  }
  if (image) {
    const Tensor state = image_proj_(feature_tensor(features.get(ctx.image_id)));
    parts.push_back(reshape(state, {1, width()}));
  }
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

std::vector<int> GenerativeModel::target_ids(const std::string& gold) const {
  auto ids = vocab_.encode(tokenize(gold));
  if (ids.size() > cfg_.max_decode_len) ids.resize(cfg_.max_decode_len);
  return ids;
}

namespace {

Tensor decoder_states(const Tensor& token_emb, const Tensor& pos_emb,
                      const std::vector<DecoderLayer>& layers, const Tensor& memory,
                      std::span<const int> prefix, std::size_t max_decode_len) {
  if (prefix.size() > max_decode_len) {
    throw ContractError("decoder prefix of " + std::to_string(prefix.size()) +
                        " tokens exceeds max_decode_len " + std::to_string(max_decode_len));
  }
  std::vector<int> input = {Vocabulary::kStart};
  input.insert(input.end(), prefix.begin(), prefix.end());
  std::vector<int> positions(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) positions[i] = static_cast<int>(i);
  Tensor x = add(embedding_lookup(token_emb, input), embedding_lookup(pos_emb, positions));
  for (const auto& layer : layers) x = layer(x, memory);
  return x;
}

}  // namespace

Tensor GenerativeModel::decoder_logits(const Tensor& memory, std::span<const int> prefix) const {
  return dec_out_(decoder_states(dec_token_emb_, dec_pos_emb_, dec_layers_, memory, prefix,
                                 cfg_.max_decode_len));
}

std::vector<double> GenerativeModel::next_logprobs(const Tensor& memory,
                                                   std::span<const int> prefix) const {
  NoGradGuard no_grad;
  const Tensor states = decoder_states(dec_token_emb_, dec_pos_emb_, dec_layers_, memory,
                                       prefix, cfg_.max_decode_len);
  return log_softmax_lastdim(dec_out_(row(states, states.size(0) - 1))).to_vector();
}

bool GenerativeModel::emittable(int id) const {
  if (id == Vocabulary::kPad || id == Vocabulary::kStart || id == Vocabulary::kSep) return false;
  const int first_style = Vocabulary::kNumSpecial;
  return !(id >= first_style && id < first_style + static_cast<int>(vocab_.num_styles()));
}

DecodeResult GenerativeModel::greedy_decode(const Tensor& memory, bool trigram_block) const {
  DecodeResult out;
  while (out.tokens.size() < cfg_.max_decode_len) {
    const auto lp = next_logprobs(memory, out.tokens);
    int best = Vocabulary::kEnd;
    bool any_content = false;
    for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
      if (!emittable(t) || t == Vocabulary::kEnd) continue;
      if (trigram_block && trigram_blocked(out.tokens, t)) continue;
      if (!any_content || lp[t] > lp[best] || (lp[t] == lp[best] && t < best)) best = t;
      any_content = true;
    }
    if (!any_content) {
      spdlog::debug("every continuation blocked after {} tokens; forcing END", out.tokens.size());
    } else if (lp[Vocabulary::kEnd] > lp[best] ||
               (lp[Vocabulary::kEnd] == lp[best] && Vocabulary::kEnd < best)) {
      best = Vocabulary::kEnd;
    }
    out.logprob += lp[best];
    if (best == Vocabulary::kEnd) {
      out.finished = true;
      break;
    }
    out.tokens.push_back(best);
  }
  return out;
}

DecodeResult GenerativeModel::beam_decode(const Tensor& memory,
                                          const DecodeOptions& options) const {
  if (options.beam_size == 0) throw ConfigError("beam_size must be at least 1");
  struct Expansion {
    double score;
    std::size_t beam;
    int token;
  };
  std::vector<DecodeResult> alive = {DecodeResult{}};
  std::vector<DecodeResult> finished;
  while (!alive.empty()) {
    std::vector<Expansion> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      const auto lp = next_logprobs(memory, alive[b].tokens);
      bool any_content = false;
      for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
        if (!emittable(t)) continue;
        if (t != Vocabulary::kEnd) {
          if (options.trigram_block && trigram_blocked(alive[b].tokens, t)) continue;
          any_content = true;
        }
        cands.push_back({alive[b].logprob + lp[t], b, t});
      }
      if (!any_content) {
        spdlog::debug("every continuation blocked after {} tokens; forcing END",
                      alive[b].tokens.size());
      }
    }
    const std::size_t keep = std::min(options.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                      cands.end(), [](const Expansion& a, const Expansion& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<DecodeResult> next;
    for (std::size_t i = 0; i < keep; ++i) {
      DecodeResult h = alive[cands[i].beam];
      h.logprob = cands[i].score;
      if (cands[i].token == Vocabulary::kEnd) {
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      h.tokens.push_back(cands[i].token);
      if (h.tokens.size() >= cfg_.max_decode_len) {
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (!finished.empty() && !alive.empty()) {
      double best_finished = -INFINITY, best_alive = -INFINITY;
      for (const auto& h : finished) best_finished = std::max(best_finished, h.logprob);
      for (const auto& h : alive) best_alive = std::max(best_alive, h.logprob);
      if (best_finished >= best_alive) break;
    }
  }
  const auto& pool = finished.empty() ? alive : finished;
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (pool[i].logprob > pool[best].logprob) best = i;
  return pool[best];
}

DecodeResult GenerativeModel::decode(const TurnContext& ctx, const FeatureStore& features,
                                     ModalityMask mask) const {
  return decode(ctx, features, mask, DecodeOptions{cfg_.beam_size, cfg_.trigram_block});
}

DecodeResult GenerativeModel::decode(const TurnContext& ctx, const FeatureStore& features,
                                     ModalityMask mask, const DecodeOptions& options) const {
  NoGradGuard no_grad;
  const Tensor mem = memory(ctx, features, mask);
  return beam_decode(mem, options);
}

std::string GenerativeModel::text(const DecodeResult& r) const {
  return join_tokens(vocab_.decode(r.tokens));
}

nlohmann::json GenerativeModel::config_json() const {
  return {{"kind", "generative"}, {"model", cfg_}};
}

void GenerativeModel::save(const std::filesystem::path& path,
                           const nlohmann::json& run_info) const {
  nlohmann::json extra = {{"kind", "generative"}, {"vocab", vocab_.to_json()}, {"styles", styles_}};
  if (!run_info.is_null()) extra["run"] = run_info;
  save_checkpoint(path, *params_, config_json(), extra);
}

GenerativeModel GenerativeModel::from_checkpoint(const LoadedCheckpoint& ckpt) {
  if (ckpt.manifest.value("kind", std::string()) != "generative") {
    throw FormatError("checkpoint is not a generative model");
  }
  GenerativeModel model(ckpt.config().at("model").get<GenConfig>(),
                        Vocabulary::from_json(ckpt.manifest.at("vocab")),
                        ckpt.manifest.at("styles").get<std::vector<std::string>>(), ckpt.seed());
  restore_parameters(*model.params_, ckpt, true);
  return model;
}

GenerativeModel GenerativeModel::load(const std::filesystem::path& path) {
  return from_checkpoint(load_checkpoint(path));
}

// ----------------------------------------------------------------- training

Tensor generative_batch_loss(const GenerativeModel& model, std::span<const TurnSample> batch,
                             const FeatureStore& features, ModalityMask mask) {
  std::vector<Tensor> logits;
  std::vector<int> targets;
  for (const auto& s : batch) {
    const auto y = model.target_ids(s.gold);
    if (y.empty()) {
      spdlog::warn("skipping sample with empty target: '{}'", s.gold);
      continue;
    }
    const std::size_t n_in = std::min(y.size(), model.config().max_decode_len);
    logits.push_back(model.decoder_logits(model.memory(s.context, features, mask),
                                          std::span<const int>(y.data(), n_in)));
    targets.insert(targets.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(n_in));
    targets.push_back(Vocabulary::kEnd);
  }
  if (logits.empty()) throw ContractError("generative batch has no usable targets");
  return cross_entropy(logits.size() == 1 ? logits[0] : concat_rows(logits), targets);
}

void to_json(nlohmann::json& j, const GenTrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"max_steps", c.max_steps}, {"lr", c.lr},
       {"seed", c.seed},             {"mask", c.mask.to_string()}};
}

void from_json(const nlohmann::json& j, GenTrainConfig& c) {
  GenTrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
  c.mask = ModalityMask::parse(j.value("mask", d.mask.to_string()));
}

GenTrainResult train_generative(GenerativeModel& model, const std::vector<TurnSample>& train,
                                const FeatureStore& features, const GenTrainConfig& config,
                                const std::function<bool(std::size_t, double)>& stop) {
  if (train.empty()) throw ConfigError("generative training set is empty");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (config.lr <= 0.0) throw ConfigError("learning rate must be positive");
  const std::size_t batch = std::min(config.batch_size, train.size());
  BatchSampler sampler(train.size(), batch, config.seed);
  AdamState adam(AdamConfig{config.lr});
  GenTrainResult result;
  std::vector<TurnSample> items(batch);
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const auto idx = sampler.next();
    for (std::size_t i = 0; i < batch; ++i) items[i] = train[idx[i]];
    const Tensor loss = generative_batch_loss(model, items, features, config.mask);
    adam_step(model.params(), compute_gradients(loss, model.params()), adam);
    result.losses.push_back(loss.item());
    result.steps = step;
    if (stop && stop(step, loss.item())) break;
  }
  return result;
}

// --------------------------------------------------------------- evaluation

MetricReport evaluate_generation(const GenerativeModel& model,
                                 const std::vector<TurnSample>& samples,
                                 const FeatureStore& features, ModalityMask mask,
                                 const DecodeOptions& options,
                                 std::vector<GenerationOutput>* outputs) {
  if (samples.empty()) throw DataError("evaluation split is empty");
  MetricAccumulator acc;
  std::map<int, std::vector<Tokens>> hyps, refs;
  std::vector<Tokens> all_hyps, all_refs;
  for (const auto& s : samples) {
    const DecodeResult r = model.decode(s.context, features, mask, options);
    Tokens hyp = model.vocab().decode(r.tokens);
    Tokens ref = tokenize(s.gold);
    acc.add(s.context.turn_index, {{"rouge_l", rouge_l(hyp, ref)}, {"f1", token_f1(hyp, ref)}});
    if (outputs) outputs->push_back({join_tokens(hyp), r.logprob});
    hyps[s.context.turn_index].push_back(hyp);
    refs[s.context.turn_index].push_back(ref);
    all_hyps.push_back(std::move(hyp));
    all_refs.push_back(std::move(ref));
  }
  MetricReport report = acc.finish();
  for (const auto& [turn, h] : hyps) report.turns[turn]["bleu4"] = bleu4(h, refs[turn]).bleu;
  report.all["bleu4"] = bleu4(all_hyps, all_refs).bleu;
  report.metadata = {{"beam_size", options.beam_size},
                     {"trigram_block", options.trigram_block},
                     {"mask", mask.to_string()}};
  return report;
}

}  // namespace imagechat
