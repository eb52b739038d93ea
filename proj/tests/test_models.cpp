// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "imagechat/combiner.hpp"
#include "imagechat/encoders.hpp"
#include "imagechat/errors.hpp"
#include "imagechat/generative.hpp"
#include "imagechat/retrieval.hpp"
#include "support/toy.hpp"

using namespace imagechat;

namespace {

const std::vector<std::string>& styles() {
  static const std::vector<std::string> s = toy::catalog().names();
  return s;
}

TextEncoderConfig text_cfg(std::size_t vocab = 20) {
  TextEncoderConfig c;
  c.n_layers = 2;
  c.hidden = 8;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_len = 10;
  c.vocab_size = vocab;
  c.output_dim = 6;
  return c;
}

EncodedContext ctx3(std::vector<double> i, std::vector<double> s, std::vector<double> d) {
  return {Tensor::vector(std::move(i)), Tensor::vector(std::move(s)), Tensor::vector(std::move(d))};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  const auto x = a.to_vector(), y = b.to_vector();
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

struct RetrievalFixture {
  std::vector<TurnSample> items = toy::samples(12, styles(), toy::words(45), 3);
  FeatureStore feats = FeatureStore::synthetic(toy::image_ids(items), 1, 32);
  RetrievalModel model{toy::retrieval_config(CombinerKind::mm_sum), toy::vocab(50), styles(), 5};
};

struct GenFixture {
  Vocabulary vocab = toy::vocab(50, &styles());
  std::vector<TurnSample> items = toy::samples(12, styles(), toy::words(35), 4);
  FeatureStore feats = FeatureStore::synthetic(toy::image_ids(items), 1, 32);
  GenerativeModel model{toy::gen_config(), vocab, styles(), 6};
};

}  // namespace

// ------------------------------------------------------------- encoders

TEST(TextEncoder, SingleTokenPoolsToItsOwnState) {
  ParameterStore ps(1);
  const TextEncoder enc(ps, "t", text_cfg(), true);
  const int ids[] = {7};
  const Tensor state = row(enc.states(ids), 0);
  const Tensor want = add(matmul(reshape(state, {1, 8}), ps.get("t.out.w")),
                          reshape(ps.get("t.out.b"), {1, 6}));
  EXPECT_EQ(enc.encode(ids).to_vector(), want.to_vector());
}

TEST(TextEncoder, PaddingIsInvisible) {
  ParameterStore ps(2);
  const TextEncoder enc(ps, "t", text_cfg(), true);
  const int plain[] = {5, 6, 7};
  const int padded[] = {5, 6, 7, 0, 0};
  EXPECT_LE(max_abs_diff(enc.encode(plain), enc.encode(padded)), 1e-6);
}

TEST(TextEncoder, DistinctInputsGiveDistinctVectors) {
  ParameterStore ps(3);
  const TextEncoder enc(ps, "t", text_cfg(), true);
  const int a[] = {5, 6, 7}, b[] = {5, 7, 6};
  EXPECT_NE(enc.encode(a).to_vector(), enc.encode(b).to_vector());
}

TEST(TextEncoder, RejectsBadInput) {
  ParameterStore ps(4);
  const TextEncoder enc(ps, "t", text_cfg(), true);
  EXPECT_THROW(enc.encode(std::vector<int>{}), ContractError);
  EXPECT_THROW(enc.encode(std::vector<int>(11, 5)), ContractError);
  EXPECT_THROW(enc.encode(std::vector<int>{0, 0}), ContractError);
  EXPECT_THROW(enc.encode(std::vector<int>{25}), VocabularyError);
  TextEncoderConfig c = text_cfg();
  c.dropout = 0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = text_cfg();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(StyleEncoder, TableLookup) {
  ParameterStore ps(5);
  const StyleEncoder enc(ps, "style", 215, 8);
  EXPECT_EQ(ps.get("style").size(0), 215u);
  EXPECT_EQ(enc.encode(3).to_vector(), enc.encode(3).to_vector());
  EXPECT_NE(enc.encode(3).to_vector(), enc.encode(4).to_vector());
  EXPECT_THROW(enc.encode(215), CatalogError);
}

TEST(ImageEncoders, ZeroWeightsAndWidthChecks) {
  ParameterStore ps(6);
  const ImageMlp mlp(ps, "img", 12, 8, 4);
  const ImageProjection proj(ps, "proj", 12, 4);
  for (const auto& name : ps.names()) ps.assign(name, std::vector<double>(ps.get(name).numel(), 0.0));
  const Tensor x = Tensor::full({12}, 0.5);
  EXPECT_EQ(mlp(x).to_vector(), std::vector<double>(4, 0.0));
  EXPECT_EQ(proj(Tensor::zeros({12})).to_vector(), std::vector<double>(4, 0.0));
  EXPECT_THROW(mlp(Tensor::zeros({11})), ContractError);
  EXPECT_THROW(proj(Tensor::zeros({13})), ContractError);
}

// ------------------------------------------------------------- combiner

TEST(MmSum, Arithmetic) {
  const EncodedContext e = ctx3({1, 0}, {0, 1}, {1, 1});
  EXPECT_EQ(mm_sum_fuse(e, ModalityMask::all()).r_t.to_vector(), (std::vector<double>{2, 2}));
  EXPECT_EQ(mm_sum_fuse(e, ModalityMask(5)).r_t.to_vector(), (std::vector<double>{2, 1}));
  EXPECT_EQ(mm_sum_fuse(e, ModalityMask::of(Modality::style)).r_t.to_vector(),
            (std::vector<double>{0, 1}));
  EXPECT_THROW(mm_sum_fuse(e, ModalityMask::none()), ContractError);
  EncodedContext partial = e;
  partial.dialogue = Tensor();
  EXPECT_THROW(mm_sum_fuse(partial, ModalityMask::all()), ContractError);
  EXPECT_EQ(partial.present(), ModalityMask(3));
}

TEST(MmSum, MaskEqualsZeroSubstitution) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v[3];
    for (auto& x : v)
      for (int k = 0; k < 5; ++k) x.push_back(n(rng));
    for (ModalityMask m : ablation_masks()) {
      EncodedContext zeroed = ctx3(v[0], v[1], v[2]);
      if (!m.has(Modality::image)) zeroed.image = Tensor::zeros({5});
      if (!m.has(Modality::style)) zeroed.style = Tensor::zeros({5});
      if (!m.has(Modality::dialogue)) zeroed.dialogue = Tensor::zeros({5});
      EXPECT_EQ(mm_sum_fuse(ctx3(v[0], v[1], v[2]), m).r_t.to_vector(),
                mm_sum_fuse(zeroed, ModalityMask::all()).r_t.to_vector());
    }
  }
}

TEST(MmAtt, WeightsAndSingleModality) {
  ParameterStore ps(7);
  CombinerConfig cfg;
  cfg.kind = CombinerKind::mm_att;
  cfg.dim = 4;
  cfg.att_layers = 2;
  cfg.att_heads = 2;
  cfg.att_ffn_mult = 2;
  const Combiner comb(ps, "comb", cfg);
  const EncodedContext e = ctx3({1, 0, 0, 2}, {0, 1, -1, 0}, {0.5, 0.5, 0.5, 0.5});

  const FusedContext full = comb.fuse(e, ModalityMask::all());
  ASSERT_EQ(full.weights.size(), 3u);
  double total = 0.0;
  for (double w : full.weights) {
    EXPECT_GT(w, 0.0);
    total += w;
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_NE(full.r_t.to_vector(), mm_sum_fuse(e, ModalityMask::all()).r_t.to_vector());

  const FusedContext single = comb.fuse(e, ModalityMask::of(Modality::style));
  EXPECT_EQ(single.weights, (std::vector<double>{1.0}));
  EXPECT_EQ(single.r_t.to_vector(), e.style.to_vector());

  ParameterStore ps2(7);
  cfg.readout = AttReadout::reweighted_states;
  const Combiner states(ps2, "comb", cfg);
  const FusedContext s = states.fuse(e, ModalityMask::of(Modality::style));
  EXPECT_EQ(s.weights, (std::vector<double>{1.0}));
  EXPECT_NE(s.r_t.to_vector(), e.style.to_vector());
}

TEST(ScoreCandidates, DotProducts) {
  const Tensor r = Tensor::vector({2, 2});
  EXPECT_EQ(score_candidates(r, Tensor::matrix({{2, 3}, {1, 0}})).to_vector(),
            (std::vector<double>{10, 2}));
  EXPECT_EQ(score_candidates(Tensor::zeros({2}), Tensor::matrix({{2, 3}, {1, 0}})).to_vector(),
            (std::vector<double>{0, 0}));
  EXPECT_THROW(score_candidates(r, Tensor::zeros({0, 2})), ContractError);
  EXPECT_THROW(score_candidates(r, Tensor::zeros({1, 3})), ContractError);
}

// ------------------------------------------------------------ retrieval

TEST(RetrievalLoss, TwoByTwoMatchesScalarOracle) {
  PrecisionScope wide(Precision::f64);
  const Tensor c = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor r = Tensor::matrix({{10, 0}, {0, 10}});
  const double want = -std::log(std::exp(10.0) / (std::exp(10.0) + std::exp(0.0)));
  EXPECT_NEAR(in_batch_loss(c, r).item(), want, 1e-15);
  EXPECT_NEAR(want, 4.54e-5, 1e-7);
  EXPECT_THROW(in_batch_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 2})), ContractError);
}

TEST(RetrievalLoss, SampledNegatives) {
  EXPECT_NEAR(sampled_negatives_loss(Tensor::zeros({6, 3}), Tensor::zeros({6, 3}), 4, 1).item(),
              std::log(5.0), 1e-6);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> a(18), b(18);
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  const Tensor c = Tensor::from({6, 3}, a), r = Tensor::from({6, 3}, b);
  EXPECT_NEAR(sampled_negatives_loss(c, r, 5, 9).item(), in_batch_loss(c, r).item(), 1e-6);
  EXPECT_THROW(sampled_negatives_loss(c, r, 0, 1), ConfigError);
  EXPECT_THROW(sampled_negatives_loss(c, r, 6, 1), ConfigError);
}

TEST(RetrievalModel, TokenizationAndTruncation) {
  RetrievalFixture f;
  const auto& v = f.model.vocab();
  const auto ids = f.model.history_ids({"w1 w2", "w3"});
  EXPECT_EQ(ids, (std::vector<int>{v.id("w1"), v.id("w2"), Vocabulary::kSep, v.id("w3")}));
  std::string long_text;
  for (int i = 0; i < 30; ++i) long_text += "w" + std::to_string(i) + " ";
  const auto hist = f.model.history_ids({long_text, "w40"});
  EXPECT_EQ(hist.size(), 24u);
  EXPECT_EQ(hist.back(), v.id("w40"));
  EXPECT_EQ(f.model.candidate_ids(long_text).size(), 24u);
  EXPECT_EQ(f.model.candidate_ids(long_text).front(), v.id("w0"));
  EXPECT_TRUE(f.model.history_ids({}).empty());
  EXPECT_THROW(f.model.candidate_ids("  "), ContractError);
}

TEST(RetrievalModel, ContextEncodingContracts) {
  RetrievalFixture f;
  TurnContext ctx = f.items[0].context;
  const EncodedContext full = f.model.encode_context(ctx, f.feats, ModalityMask::all());
  EXPECT_EQ(full.present(), ModalityMask::all());
  ctx.history.clear();
  ctx.turn_index = 1;
  EXPECT_EQ(f.model.encode_context(ctx, f.feats, ModalityMask::all()).present(), ModalityMask(3));
  ctx.turn_index = 2;
  EXPECT_THROW(f.model.encode_context(ctx, f.feats, ModalityMask::all()), ContractError);
  ctx = f.items[0].context;
  ctx.responder_style = "Nobody";
  EXPECT_THROW(f.model.context_vector(ctx, f.feats), CatalogError);
  ctx = f.items[0].context;
  ctx.image_id = "missing";
  EXPECT_THROW(f.model.context_vector(ctx, f.feats), CatalogError);
  EXPECT_NO_THROW(f.model.context_vector(ctx, f.feats, ModalityMask(6)));
}

TEST(RetrievalModel, SharedEncoderGivesIdenticalVectors) {
  RetrievalModelConfig cfg = toy::retrieval_config(CombinerKind::mm_sum);
  cfg.text.shared_response_encoder = true;
  const RetrievalModel shared(cfg, toy::vocab(50), styles(), 1);
  EXPECT_EQ(shared.encode_dialogue({"w1 w2 w3"}).to_vector(),
            shared.encode_candidate("w1 w2 w3").to_vector());
  RetrievalFixture f;
  EXPECT_NE(f.model.encode_dialogue({"w1 w2 w3"}).to_vector(),
            f.model.encode_candidate("w1 w2 w3").to_vector());
}

TEST(RetrievalModel, ImageSensitivity) {
  RetrievalFixture f;
  TurnContext a = f.items[0].context, b = a;
  b.image_id = f.items[1].context.image_id;
  EXPECT_NE(f.model.context_vector(a, f.feats).to_vector(),
            f.model.context_vector(b, f.feats).to_vector());
  const ModalityMask no_image(6);
  EXPECT_EQ(f.model.context_vector(a, f.feats, no_image).to_vector(),
            f.model.context_vector(b, f.feats, no_image).to_vector());
}

TEST(RetrievalModel, RankAgreesWithDirectScores) {
  RetrievalFixture f;
  const auto pool = response_pool(f.items);
  const RankingResult r = f.model.rank(f.items[0].context, pool, f.feats);
  const Tensor cv = f.model.context_vector(f.items[0].context, f.feats);
  std::vector<double> direct;
  for (const auto& c : pool) direct.push_back(dot(cv, f.model.encode_candidate(c)).item());
  const auto order = rank_order(direct);
  ASSERT_EQ(r.ranked.size(), pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(r.ranked[i].id, order[i]);
  // Duplicate candidates score identically.
  const std::vector<std::string> dup = {pool[0], pool[0]};
  const RankingResult d = f.model.rank(f.items[0].context, dup, f.feats);
  EXPECT_EQ(d.ranked[0].score, d.ranked[1].score);
}

TEST(RetrievalModel, CandidateCacheIsTransparent) {
  RetrievalFixture f;
  const auto pool = response_pool(f.items);
  CandidateCache cache(f.model.params().content_hash());
  const auto a = f.model.encode_candidates(pool, &cache).to_vector();
  EXPECT_EQ(cache.size(), pool.size());
  EXPECT_EQ(f.model.encode_candidates(pool, &cache).to_vector(), a);
  EXPECT_EQ(f.model.encode_candidates(pool).to_vector(), a);
}

TEST(RetrievalModel, SaveLoadPreservesScores) {
  RetrievalFixture f;
  const auto path = std::filesystem::temp_directory_path() / "imagechat_models_ret.ckpt";
  f.model.save(path);
  const RetrievalModel back = RetrievalModel::load(path);
  EXPECT_EQ(back.config_json(), f.model.config_json());
  EXPECT_EQ(back.params().content_hash(), f.model.params().content_hash());
  const auto pool = response_pool(f.items);
  for (const auto& item : f.items) {
    EXPECT_EQ(RetrievalScorer(back, f.feats).score(0, item, pool),
              RetrievalScorer(f.model, f.feats).score(0, item, pool));
  }
}

TEST(RetrievalModel, PretrainInitCopiesResponseEncoder) {
  RetrievalFixture f;
  const auto path = std::filesystem::temp_directory_path() / "imagechat_models_pre.ckpt";
  f.model.save(path);
  RetrievalModel fresh(toy::retrieval_config(CombinerKind::mm_att), toy::vocab(50), styles(), 99);
  EXPECT_GT(fresh.init_from_pretrain(load_checkpoint(path)), 0u);
  EXPECT_EQ(fresh.encode_candidate("w3 w4").to_vector(), f.model.encode_candidate("w3 w4").to_vector());
  EXPECT_EQ(fresh.params().get("dialogue_encoder.token_emb").to_vector(),
            f.model.params().get("response_encoder.token_emb").to_vector());
  RetrievalModel other_vocab(toy::retrieval_config(CombinerKind::mm_sum), toy::vocab(40), styles(), 1);
  EXPECT_THROW(other_vocab.init_from_pretrain(load_checkpoint(path)), ConfigError);
}

TEST(RetrievalTraining, ReproducibleAndDecreasing) {
  auto run = [] {
    RetrievalFixture f;
    RetrievalTrainConfig cfg;
    cfg.batch_size = 6;
    cfg.max_steps = 30;
    cfg.lr = 1e-3;
    cfg.seed = 4;
    std::vector<double> losses;
    train_retrieval(f.model, f.items, f.feats, cfg, {},
                    [&](const TrainLogEntry& e) { losses.push_back(e.loss); });
    return losses;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  ASSERT_EQ(a.size(), 30u);
  EXPECT_LT(a.back(), a.front());
}

TEST(RetrievalTraining, EarlyStoppingRestoresBest) {
  RetrievalFixture f;
  const auto valid = toy::samples(8, styles(), toy::words(45), 77);
  FeatureStore feats = FeatureStore::synthetic(toy::image_ids(f.items), 1, 32);
  RetrievalTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_steps = 40;
  cfg.lr = 1e-3;
  cfg.eval_every = 5;
  cfg.patience = 2;
  cfg.valid_candidates = 8;
  // Validation images coincide with training ids img0..img7.
  const TrainResult r = train_retrieval(f.model, f.items, feats, cfg, valid);
  ASSERT_TRUE(r.best_valid_r1.has_value());
  RecallOptions opts;
  opts.n_candidates = 8;
  opts.ks = {1};
  const MetricReport rep = evaluate_recall(valid, response_pool(valid), RetrievalScorer(f.model, feats), opts);
  EXPECT_EQ(rep.all.at("r1"), *r.best_valid_r1);
}

TEST(Pretraining, LossAndPairsFile) {
  const auto pairs = load_pretrain_pairs(toy::fixture("pretrain_pairs.jsonl"));
  EXPECT_EQ(pairs.size(), 40u);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& p : pairs) {
    corpus.push_back(tokenize(p.context));
    corpus.push_back(tokenize(p.response));
  }
  RetrievalModel model(toy::retrieval_config(CombinerKind::mm_sum), Vocabulary::build(corpus, 1), styles(), 3);
  const std::span<const PretrainPair> batch(pairs.data(), 8);
  const double sampled = pretrain_batch_loss(model, batch, 7, 1).item();
  std::vector<Tensor> c, r;
  for (const auto& p : batch) {
    c.push_back(model.encode_dialogue({p.context}));
    r.push_back(model.encode_candidate(p.response));
  }
  EXPECT_NEAR(sampled, in_batch_loss(concat_rows(c), concat_rows(r)).item(), 1e-5);
  PretrainConfig cfg;
  cfg.batch_size = 8;
  cfg.k_negatives = 3;
  cfg.max_steps = 5;
  cfg.lr = 1e-3;
  EXPECT_EQ(pretrain(model, pairs, cfg).steps, 5u);
}

TEST(Recall, OracleScorerIsPerfect) {
  RetrievalFixture f;
  RecallOptions opts;
  opts.n_candidates = 10;
  const MetricReport r = evaluate_recall(f.items, response_pool(f.items), OracleScorer(), opts);
  EXPECT_EQ(r.all.at("r1"), 1.0);
  EXPECT_EQ(r.all.at("r5"), 1.0);
  EXPECT_EQ(r.metadata.at("scorer"), "oracle");
  opts.n_candidates = 13;
  EXPECT_THROW(evaluate_recall(f.items, response_pool(f.items), OracleScorer(), opts), DataError);
}

TEST(Recall, DialogueOnlyAtTurnOneIsChance) {
  RetrievalFixture f;
  std::vector<std::string> pool;
  for (int i = 0; i < 200; ++i) pool.push_back("w" + std::to_string(i % 45) + " w" + std::to_string(i / 45));
  std::vector<TurnSample> items(2000);
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].context.image_id = f.items[0].context.image_id;
    items[i].context.responder_style = styles()[i % styles().size()];
    items[i].gold = pool[i % pool.size()];
  }
  RecallOptions opts;
  opts.n_candidates = 20;
  opts.ks = {1};
  const RetrievalScorer scorer(f.model, f.feats, ModalityMask::of(Modality::dialogue));
  const double r1 = evaluate_recall(items, pool, scorer, opts).all.at("r1");
  // 1/20 with a 4-sigma band for 2000 trials.
  EXPECT_NEAR(r1, 0.05, 4 * std::sqrt(0.05 * 0.95 / 2000));
}

TEST(RecallProperty, CandidateSetsAreWellFormed) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 200; ++t) {
    const std::size_t pool_size = 2 + rng() % 50;
    std::vector<std::string> pool;
    for (std::size_t i = 0; i < pool_size; ++i) pool.push_back("r" + std::to_string(i));
    const std::size_t n = 1 + rng() % pool_size;
    const std::string gold = pool[rng() % pool_size];
    const CandidateSet s = sample_candidates(pool, gold, n, rng(), t);
    ASSERT_EQ(s.candidates.size(), n);
    EXPECT_EQ(s.candidates[s.gold_index], gold);
    EXPECT_EQ(std::count(s.candidates.begin(), s.candidates.end(), gold), 1);
    EXPECT_EQ(std::set<std::string>(s.candidates.begin(), s.candidates.end()).size(), n);
  }
  EXPECT_THROW(sample_candidates({"a", "b"}, "a", 3, 0, 0), DataError);
}

TEST(Recall, ThreadedRanksMatchSerial) {
  RetrievalFixture f;
  RecallOptions opts;
  opts.n_candidates = 8;
  const RetrievalScorer scorer(f.model, f.feats);
  const auto serial = gold_ranks(f.items, response_pool(f.items), scorer, opts);
  opts.threads = 3;
  EXPECT_EQ(gold_ranks(f.items, response_pool(f.items), scorer, opts), serial);
}

TEST(Ablation, TableMarksAbsentRows) {
  RetrievalFixture f;
  RecallOptions opts;
  opts.n_candidates = 5;
  opts.ks = {1};
  const OracleScorer oracle;
  const AblationTable t = run_ablation_matrix(
      [&](ModalityMask m) -> const Scorer* { return m == ModalityMask::all() ? &oracle : nullptr; },
      f.items, response_pool(f.items), opts);
  ASSERT_EQ(t.rows.size(), 7u);
  EXPECT_FALSE(t.rows[0].present);
  EXPECT_TRUE(t.rows[6].present);
  const std::string text = t.to_text();
  EXPECT_NE(text.find("Style Only"), std::string::npos);
  EXPECT_NE(text.find("absent"), std::string::npos);
  EXPECT_NE(text.find("100"), std::string::npos);
}

// ------------------------------------------------------------ generative

TEST(Trigram, BlockingRule) {
  const std::vector<int> t = {5, 6, 7, 5, 6};
  EXPECT_TRUE(trigram_blocked(t, 7));
  EXPECT_FALSE(trigram_blocked(t, 8));
  EXPECT_FALSE(trigram_blocked(std::vector<int>{5}, 5));
  EXPECT_TRUE(has_repeated_trigram(std::vector<int>{1, 2, 3, 1, 2, 3}));
  EXPECT_FALSE(has_repeated_trigram(std::vector<int>{1, 1, 1, 2, 1, 1}));
  EXPECT_TRUE(has_repeated_trigram(std::vector<int>{1, 1, 1, 1}));
}

TEST(Generative, EncoderInputLayout) {
  GenFixture f;
  const auto& v = f.model.vocab();
  TurnContext ctx{"img0", "Happy", {"w1 w2", "w3"}, 3};
  const int style = v.style_token(toy::catalog().index_of("Happy"));
  EXPECT_EQ(f.model.encoder_ids(ctx, ModalityMask::all()),
            (std::vector<int>{style, Vocabulary::kSep, v.id("w1"), v.id("w2"), Vocabulary::kSep,
                              v.id("w3")}));
  EXPECT_EQ(f.model.memory(ctx, f.feats).size(0), 7u);
  TurnContext first{"img0", "Happy", {}, 1};
  EXPECT_EQ(f.model.encoder_ids(first, ModalityMask::all()), (std::vector<int>{style}));
  EXPECT_EQ(f.model.memory(first, f.feats).size(0), 2u);
  EXPECT_EQ(f.model.memory(first, f.feats, ModalityMask::of(Modality::image)).size(0), 1u);
  EXPECT_EQ(f.model.memory(ctx, f.feats, ModalityMask(6)).size(0), 6u);
}

TEST(Generative, ZeroImageProjectionZeroesOnlyTheImageState) {
  GenFixture f;
  const TurnContext& ctx = f.items[0].context;
  const Tensor before = f.model.memory(ctx, f.feats);
  for (const char* n : {"image_proj.w", "image_proj.b"})
    f.model.params().assign(n, std::vector<double>(f.model.params().get(n).numel(), 0.0));
  const Tensor after = f.model.memory(ctx, f.feats);
  const std::size_t last = after.size(0) - 1, w = after.size(1);
  const auto a = before.to_vector(), b = after.to_vector();
  for (std::size_t i = 0; i < last * w; ++i) EXPECT_EQ(a[i], b[i]);
  for (std::size_t i = last * w; i < b.size(); ++i) EXPECT_EQ(b[i], 0.0);
}

TEST(Generative, ImageSensitivity) {
  GenFixture f;
  TurnContext a = f.items[0].context, b = a;
  b.image_id = f.items[1].context.image_id;
  const Tensor ma = f.model.memory(a, f.feats), mb = f.model.memory(b, f.feats);
  EXPECT_NE(f.model.next_logprobs(ma, {}), f.model.next_logprobs(mb, {}));
  const ModalityMask no_image(6);
  EXPECT_EQ(f.model.next_logprobs(f.model.memory(a, f.feats, no_image), {}),
            f.model.next_logprobs(f.model.memory(b, f.feats, no_image), {}));
}

TEST(Generative, UniformLogitsGiveLogVocab) {
  GenFixture f;
  toy::zero_parameters(f.model.params());
  EXPECT_NEAR(generative_batch_loss(f.model, f.items, f.feats).item(), std::log(50.0), 1e-2);
}

TEST(Generative, EmptyTargetsAreSkipped) {
  GenFixture f;
  std::vector<TurnSample> batch(f.items.begin(), f.items.begin() + 2);
  const double full = generative_batch_loss(f.model, std::span(batch.data(), 1), f.feats).item();
  batch[1].gold = "";
  EXPECT_EQ(generative_batch_loss(f.model, batch, f.feats).item(), full);
  batch[0].gold = "";
  EXPECT_THROW(generative_batch_loss(f.model, batch, f.feats), ContractError);
}

TEST(Generative, LogProbIsTheSumOfStepLogProbs) {
  GenFixture f;
  for (std::size_t i = 0; i < 6; ++i) {
    const Tensor mem = f.model.memory(f.items[i].context, f.feats);
    for (std::size_t beam : {1, 2, 3}) {
      const DecodeResult r = f.model.beam_decode(mem, {beam, true});
      std::vector<int> prefix;
      double total = 0.0, prev = 0.0;
      for (int tok : r.tokens) {
        total += f.model.next_logprobs(mem, prefix)[tok];
        EXPECT_LE(total, prev);
        prev = total;
        prefix.push_back(tok);
        EXPECT_TRUE(f.model.emittable(tok));
      }
      if (r.finished) total += f.model.next_logprobs(mem, prefix)[Vocabulary::kEnd];
      EXPECT_NEAR(r.logprob, total, 1e-6);
      EXPECT_LE(r.tokens.size(), f.model.config().max_decode_len);
      EXPECT_FALSE(has_repeated_trigram(r.tokens));
    }
  }
}

// Beam search keeps the greedy hypothesis alive unless something better
// displaces it, so among finished outputs the wider beam should score at
// least as well. It is a heuristic, not a theorem; this measures it.
TEST(GenerativeProperty, BeamDominatesGreedyOnToyModels) {
  std::size_t compared = 0, violations = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const GenerativeModel model(toy::gen_config(), toy::vocab(50, &styles()), styles(), 100 + seed);
    const auto items = toy::samples(25, styles(), toy::words(35), 200 + seed);
    const FeatureStore feats = FeatureStore::synthetic(toy::image_ids(items), seed, 32);
    for (const auto& s : items) {
      const Tensor mem = model.memory(s.context, feats);
      const DecodeResult g = model.greedy_decode(mem, true);
      const DecodeResult b = model.beam_decode(mem, {2, true});
      if (!g.finished || !b.finished) continue;
      ++compared;
      violations += b.logprob < g.logprob - 1e-9;
    }
  }
  RecordProperty("compared", static_cast<int>(compared));
  RecordProperty("violations", static_cast<int>(violations));
  EXPECT_GT(compared, 0u);
  EXPECT_EQ(violations, 0u) << violations << " of " << compared;
}

TEST(Generative, SaveLoadDecodesIdentically) {
  GenFixture f;
  const auto path = std::filesystem::temp_directory_path() / "imagechat_models_gen.ckpt";
  f.model.save(path);
  const GenerativeModel back = GenerativeModel::load(path);
  EXPECT_EQ(back.config_json(), f.model.config_json());
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = f.model.decode(f.items[i].context, f.feats);
    const auto b = back.decode(f.items[i].context, f.feats);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.logprob, b.logprob);
  }
  EXPECT_THROW(RetrievalModel::load(path), FormatError);
}

TEST(Generative, RejectsVocabularyWithoutStyleTokens) {
  EXPECT_THROW(GenerativeModel(toy::gen_config(), toy::vocab(50), styles(), 1), ConfigError);
}

TEST(Generative, MemorizedSetScoresPerfectly) {
  const auto items = toy::samples(5, styles(), toy::words(35), 8, false, 3, 4);
  const FeatureStore feats = FeatureStore::synthetic(toy::image_ids(items), 2, 32);
  GenerativeModel model(toy::gen_config(1, 32), toy::vocab(50, &styles()), styles(), 3);
  GenTrainConfig cfg;
  cfg.batch_size = 5;
  cfg.max_steps = 400;
  cfg.lr = 2e-3;
  const auto exact = [&] {
    for (const auto& s : items)
      if (model.text(model.greedy_decode(model.memory(s.context, feats))) != s.gold) return false;
    return true;
  };
  train_generative(model, items, feats, cfg, [&](std::size_t step, double) {
    return step % 25 == 0 && exact();
  });
  ASSERT_TRUE(exact());
  std::vector<GenerationOutput> outs;
  const MetricReport r =
      evaluate_generation(model, items, feats, ModalityMask::all(), {1, true}, &outs);
  EXPECT_EQ(r.all.at("rouge_l"), 1.0);
  EXPECT_EQ(r.all.at("f1"), 1.0);
  EXPECT_NEAR(r.all.at("bleu4"), 1.0, 1e-12);
  ASSERT_EQ(outs.size(), items.size());
  EXPECT_EQ(outs[0].output_text, items[0].gold);
}
