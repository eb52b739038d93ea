// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation statistics: recall@k, ROUGE-L, corpus BLEU-4, token F1, the
// weighted word-overlap IR baseline, the exact two-tailed binomial test, and
// the per-turn MetricReport container.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace imagechat {

using Tokens = std::vector<std::string>;

// ------------------------------------------------------------- ranking

struct RankedCandidate {
  std::size_t id = 0;  // index into the scored candidate list
  double score = 0.0;
};

struct RankingResult {
  std::vector<RankedCandidate> ranked;  // scores non-increasing
  std::size_t gold_rank = 0;            // 1-based; 0 when no gold was given
};

// Descending score, ties broken by ascending candidate id.
std::vector<std::size_t> rank_order(std::span<const double> scores);
RankingResult rank_scores(std::span<const double> scores,
                          std::optional<std::size_t> gold_id = std::nullopt);
// 1-based rank of `gold_id` under rank_order, without sorting.
std::size_t gold_rank(std::span<const double> scores, std::size_t gold_id);

// Fraction of ranks <= k. Each rank must lie in [1, n_candidates].
double recall_at_k(std::span<const std::size_t> ranks, std::size_t k, std::size_t n_candidates);

// ---------------------------------------------------------- text metrics

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

struct RougeL {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// LCS F-measure with beta = 1. Empty hypothesis scores 0.
RougeL rouge_l_detail(std::span<const std::string> hyp, std::span<const std::string> ref);
double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref);

// Multiset token overlap F1. Empty hypothesis scores 0.
double token_f1(std::span<const std::string> hyp, std::span<const std::string> ref);

struct BleuCounts {
  std::array<std::uint64_t, 4> matches{};  // clipped n-gram matches, n = 1..4
  std::array<std::uint64_t, 4> totals{};   // hypothesis n-grams
  std::uint64_t hyp_length = 0;
  std::uint64_t ref_length = 0;
};

struct BleuResult {
  BleuCounts counts;
  double bleu = 0.0;             // add-one smoothing for n >= 2
  double bleu_unsmoothed = 0.0;  // plain corpus BLEU
  double brevity_penalty = 0.0;
  std::array<double, 4> precisions{};  // smoothed modified precisions

  double bleu_x100() const { return 100.0 * bleu; }
  double bleu_unsmoothed_x100() const { return 100.0 * bleu_unsmoothed; }
};

BleuCounts bleu_counts(std::span<const Tokens> hyps, std::span<const Tokens> refs);
// BLEU from accumulated counts: exp(mean_n log p_n) * BP, with
// p_1 = m_1 / t_1 and, when smoothed, p_n = (m_n + 1) / (t_n + 1) for n >= 2.
// BP = 1 if c > r else exp(1 - r / c); zero when c == 0 or any p_n == 0.
double bleu_from_counts(const BleuCounts& counts, bool smoothed);
// Corpus-level BLEU-4; corpora must be aligned and non-empty.
BleuResult bleu4(std::span<const Tokens> hyps, std::span<const Tokens> refs);

// ------------------------------------------------------------ IR baseline

// Ranks candidates by weighted word overlap with the context, using
// w(t) = 1 / (1 + log(1 + freq(t))) with freq counted over training responses.
class IrBaseline {
 public:
  IrBaseline() = default;
  explicit IrBaseline(std::span<const std::string> training_responses);

  double weight(const std::string& token) const;
  double score(std::span<const std::string> context, std::span<const std::string> candidate) const;
  std::vector<double> score_all(const std::string& context_text,
                                std::span<const std::string> candidates) const;
  RankingResult rank(const std::string& context_text,
                     std::span<const std::string> candidates) const;

 private:
  std::unordered_map<std::string, std::uint64_t> freq_;
};

// ------------------------------------------------------------- preference

struct PreferenceTally {
  std::uint64_t wins_model = 0;
  std::uint64_t wins_human = 0;
  std::uint64_t n() const { return wins_model + wins_human; }
};

struct BinomialTest {
  double p_value = 1.0;
  // Exact value numerator / 2^n as a decimal string.
  std::string numerator;
  std::uint64_t n = 0;
};

// Two-sided exact test at p = 0.5: sum of P(X = i) over every i with
// P(X = i) <= P(X = wins_model), X ~ Bin(n, 1/2). Requires n >= 1.
BinomialTest binomial_two_tailed(const PreferenceTally& tally);

// ------------------------------------------------------------- reports

// Per-turn and overall metric values. Overall per-example metrics are the
// count-weighted mean of the per-turn values; corpus-level metrics (BLEU)
// are set directly.
struct MetricReport {
  std::map<int, std::map<std::string, double>> turns;
  std::map<int, std::size_t> counts;
  std::map<std::string, double> all;
  std::size_t total = 0;
  nlohmann::json metadata = nlohmann::json::object();

  // {"turn1": {...,"count":n}, ..., "all": {...,"count":N}, metadata...}
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  // Fixed-width table with one column per turn plus "All".
  std::string to_table(const std::vector<std::string>& metrics, double scale = 1.0) const;
};

class MetricAccumulator {
 public:
  void add(int turn, const std::map<std::string, double>& values);
  MetricReport finish() const;

 private:
  std::map<int, std::map<std::string, double>> sums_;
  std::map<int, std::size_t> counts_;
};

}  // namespace imagechat
