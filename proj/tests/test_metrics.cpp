// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "imagechat/data.hpp"
#include "imagechat/errors.hpp"
#include "imagechat/metrics.hpp"
#include "support/oracles.hpp"

using namespace imagechat;

namespace {
Tokens T(const char* s) { return tokenize(s); }
}  // namespace

TEST(Ranking, OrderBreaksTiesByIndex) {
  const std::vector<double> s = {0.5, 2.0, 0.5, 2.0};
  EXPECT_EQ(rank_order(s), (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_EQ(gold_rank(s, 3), 2u);
  EXPECT_EQ(gold_rank(s, 2), 4u);
  const RankingResult r = rank_scores(s, 0);
  EXPECT_EQ(r.gold_rank, 3u);
  for (std::size_t i = 1; i < r.ranked.size(); ++i)
    EXPECT_GE(r.ranked[i - 1].score, r.ranked[i].score);
}

TEST(RankingProperty, GoldRankAgreesWithSort) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> s(1 + rng() % 30);
    for (auto& v : s) v = static_cast<double>(rng() % 5);  // many ties
    const std::size_t gold = rng() % s.size();
    const auto order = rank_order(s);
    const auto pos = std::find(order.begin(), order.end(), gold) - order.begin();
    EXPECT_EQ(gold_rank(s, gold), static_cast<std::size_t>(pos) + 1);
  }
}

TEST(RecallAtK, Counting) {
  const std::vector<std::size_t> ranks = {1, 2, 7};
  EXPECT_NEAR(recall_at_k(ranks, 5, 100), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(recall_at_k(ranks, 100, 100), 1.0);
  const std::vector<std::size_t> ones = {1, 1, 1};
  EXPECT_EQ(recall_at_k(ones, 1, 100), 1.0);
  const std::vector<std::size_t> bad = {0};
  EXPECT_THROW(recall_at_k(bad, 1, 100), ContractError);
  const std::vector<std::size_t> over = {101};
  EXPECT_THROW(recall_at_k(over, 1, 100), ContractError);
}

TEST(RougeL, Examples) {
  EXPECT_EQ(rouge_l(T("a b c"), T("a b c")), 1.0);
  const RougeL r = rouge_l_detail(T("the cat sat"), T("the cat sat on the mat"));
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 0.5);
  EXPECT_NEAR(r.f1, 0.6667, 5e-5);
  EXPECT_EQ(rouge_l(T("x y"), T("a b")), 0.0);
  EXPECT_EQ(rouge_l({}, T("a")), 0.0);
  EXPECT_THROW(rouge_l(T("a"), {}), ContractError);
}

TEST(TokenF1, Examples) {
  EXPECT_NEAR(token_f1(T("a b c"), T("b c d")), 2.0 / 3.0, 1e-12);
  EXPECT_EQ(token_f1(T("a b"), T("a b")), 1.0);
  EXPECT_EQ(token_f1({}, T("a b")), 0.0);
  // Multiset: a repeated token only matches as often as the reference has it.
  EXPECT_NEAR(token_f1(T("a a a"), T("a b")), 2 * (1.0 / 3) * 0.5 / (1.0 / 3 + 0.5), 1e-12);
}

TEST(Bleu, Examples) {
  const std::vector<Tokens> same = {T("the cat sat on the mat"), T("a dog ran off")};
  const BleuResult perfect = bleu4(same, same);
  EXPECT_NEAR(perfect.bleu, 1.0, 1e-15);
  EXPECT_NEAR(perfect.bleu_unsmoothed, 1.0, 1e-15);

  const std::vector<Tokens> hyp = {T("cat")}, ref = {T("the cat sat on the mat")};
  const BleuResult short_hyp = bleu4(hyp, ref);
  EXPECT_LT(short_hyp.brevity_penalty, 1.0);
  EXPECT_EQ(short_hyp.precisions[0], 1.0);
  EXPECT_LT(short_hyp.bleu, short_hyp.precisions[0]);
  EXPECT_EQ(short_hyp.bleu_unsmoothed, 0.0);  // no bigrams at all
  EXPECT_NEAR(short_hyp.bleu_x100(), 100.0 * short_hyp.bleu, 1e-12);
  EXPECT_THROW(bleu4(std::vector<Tokens>{}, std::vector<Tokens>{}), ContractError);
}

TEST(MetricProperty, MatchOraclesExactly) {
  std::mt19937_64 rng(99);
  for (int t = 0; t < 300; ++t) {
    const auto hyp = oracle::random_tokens(rng, 0, 14, 5);
    const auto ref = oracle::random_tokens(rng, 1, 14, 5);
    EXPECT_EQ(lcs_length(hyp, ref), oracle::lcs(hyp, ref));
    EXPECT_EQ(rouge_l(hyp, ref), oracle::rouge_l(hyp, ref));
    EXPECT_EQ(token_f1(hyp, ref), oracle::token_f1(hyp, ref));
    const double r = rouge_l(hyp, ref);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    EXPECT_EQ(lcs_length(hyp, ref), lcs_length(ref, hyp));

    std::vector<Tokens> hs, rs;
    for (std::size_t k = 0, n = 1 + rng() % 6; k < n; ++k) {
      hs.push_back(oracle::random_tokens(rng, 0, 12, 4));
      rs.push_back(oracle::random_tokens(rng, 1, 12, 4));
    }
    const BleuResult b = bleu4(hs, rs);
    const auto tally = oracle::bleu_tally(hs, rs);
    EXPECT_EQ(b.bleu, oracle::bleu(tally, true));
    EXPECT_EQ(b.bleu_unsmoothed, oracle::bleu(tally, false));
    EXPECT_EQ(bleu_from_counts(b.counts, true), b.bleu);
    EXPECT_LE(b.bleu, 1.0);
  }
}

TEST(Binomial, Examples) {
  const BinomialTest half = binomial_two_tailed({5, 5});
  EXPECT_EQ(half.p_value, 1.0);
  EXPECT_EQ(half.numerator, "1024");
  const BinomialTest sweep = binomial_two_tailed({10, 0});
  EXPECT_EQ(sweep.p_value, 2.0 / 1024.0);
  EXPECT_EQ(binomial_two_tailed({0, 10}).p_value, 2.0 / 1024.0);
  EXPECT_EQ(binomial_two_tailed({1, 0}).p_value, 1.0);
  EXPECT_THROW(binomial_two_tailed({0, 0}), ContractError);
}

TEST(BinomialProperty, MatchesGmpEnumeration) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    const unsigned long n = 1 + rng() % 1500;
    const unsigned long w = rng() % (n + 1);
    const BinomialTest got = binomial_two_tailed({w, n - w});
    const oracle::Binomial want = oracle::binomial_two_tailed(n, w);
    EXPECT_EQ(got.numerator, want.numerator.get_str()) << n << " " << w;
    EXPECT_NEAR(got.p_value, want.p, 1e-15 * want.p) << n << " " << w;
    EXPECT_LE(got.p_value, 1.0);
    // Symmetric in the two outcomes.
    EXPECT_EQ(binomial_two_tailed({n - w, w}).numerator, got.numerator);
  }
}

TEST(IrBaseline, WeightsAndOverlap) {
  const std::vector<std::string> train = {"the dog", "the cat", "the bird"};
  const IrBaseline ir(train);
  EXPECT_NEAR(ir.weight("the"), 1.0 / (1.0 + std::log(4.0)), 1e-15);
  EXPECT_EQ(ir.weight("unseen"), 1.0);
  const std::vector<std::string> cands = {"a cat", "the cat", "zebra"};
  const auto s = ir.score_all("my cat is the best", cands);
  EXPECT_GT(s[1], s[0]);
  EXPECT_EQ(s[2], 0.0);
  const std::vector<std::string> none = {"x", "y", "z"};
  const RankingResult r = ir.rank("q", none);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.ranked[i].id, i);
    EXPECT_EQ(r.ranked[i].score, 0.0);
  }
}

TEST(MetricReport, OverallIsCountWeightedMean) {
  MetricAccumulator acc;
  acc.add(1, {{"m", 1.0}});
  acc.add(1, {{"m", 0.0}});
  acc.add(2, {{"m", 1.0}});
  const MetricReport r = acc.finish();
  EXPECT_EQ(r.turns.at(1).at("m"), 0.5);
  EXPECT_EQ(r.turns.at(2).at("m"), 1.0);
  EXPECT_NEAR(r.all.at("m"), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(r.total, 3u);
  const MetricReport back = MetricReport::from_json(r.to_json());
  EXPECT_EQ(back.to_json(), r.to_json());
  const std::string table = r.to_table({"m"}, 100.0);
  EXPECT_NE(table.find("Turn 1"), std::string::npos);
  EXPECT_NE(table.find("50"), std::string::npos);
}

TEST(MetricReportProperty, WeightedMeanInvariant) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    MetricAccumulator acc;
    double total = 0.0;
    const std::size_t n = 1 + rng() % 40;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = static_cast<double>(rng() % 1000) / 1000.0;
      total += v;
      acc.add(1 + static_cast<int>(rng() % 3), {{"x", v}});
    }
    const MetricReport r = acc.finish();
    double weighted = 0.0;
    for (const auto& [turn, m] : r.turns) weighted += m.at("x") * static_cast<double>(r.counts.at(turn));
    EXPECT_NEAR(r.all.at("x"), total / static_cast<double>(n), 1e-12);
    EXPECT_NEAR(weighted / static_cast<double>(n), r.all.at("x"), 1e-12);
  }
}
