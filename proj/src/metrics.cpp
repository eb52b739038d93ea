// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0

#include "imagechat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "imagechat/data.hpp"
#include "imagechat/errors.hpp"

namespace imagechat {

// ------------------------------------------------------------- ranking

std::vector<std::size_t> rank_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

RankingResult rank_scores(std::span<const double> scores, std::optional<std::size_t> gold_id) {
  RankingResult result;
  const auto order = rank_order(scores);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    result.ranked.push_back({order[pos], scores[order[pos]]});
    if (gold_id && order[pos] == *gold_id) result.gold_rank = pos + 1;
  }
  if (gold_id && result.gold_rank == 0) throw ContractError("gold id outside candidate list");
  return result;
}

std::size_t gold_rank(std::span<const double> scores, std::size_t gold_id) {
  if (gold_id >= scores.size()) throw ContractError("gold id outside candidate list");
  const double g = scores[gold_id];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > g || (scores[j] == g && j < gold_id)) ++rank;
  }
  return rank;
}

double recall_at_k(std::span<const std::size_t> ranks, std::size_t k, std::size_t n_candidates) {
  if (ranks.empty()) throw ContractError("recall_at_k: no ranks");
  std::size_t hits = 0;
  for (std::size_t r : ranks) {
    if (r < 1 || r > n_candidates) {
      throw ContractError("recall_at_k: rank " + std::to_string(r) + " outside [1, " +
                          std::to_string(n_candidates) + "]");
    }
    if (r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

// ---------------------------------------------------------- text metrics

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeL rouge_l_detail(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (ref.empty()) throw ContractError("rouge_l: empty reference");
  RougeL r;
  if (hyp.empty()) return r;
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0.0) return r;
  r.precision = lcs / static_cast<double>(hyp.size());
  r.recall = lcs / static_cast<double>(ref.size());
  r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

double rouge_l(std::span<const std::string> hyp, std::span<const std::string> ref) {
  return rouge_l_detail(hyp, ref).f1;
}

double token_f1(std::span<const std::string> hyp, std::span<const std::string> ref) {
  if (ref.empty()) throw ContractError("token_f1: empty reference");
  if (hyp.empty()) return 0.0;
  std::map<std::string, std::size_t> ref_counts;
  for (const auto& t : ref) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : hyp) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(hyp.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

namespace {

std::map<std::vector<std::string>, std::uint64_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::uint64_t> counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    ++counts[std::vector<std::string>(t.begin() + static_cast<std::ptrdiff_t>(i),
                                      t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuCounts bleu_counts(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  if (hyps.size() != refs.size()) {
    throw ContractError("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                        std::to_string(refs.size()) + " references");
  }
  BleuCounts c;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    c.hyp_length += hyps[s].size();
    c.ref_length += refs[s].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = ngram_counts(hyps[s], n);
      const auto r = ngram_counts(refs[s], n);
      for (const auto& [gram, count] : h) {
        c.totals[n - 1] += count;
        auto it = r.find(gram);
        if (it != r.end()) c.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  return c;
}

double bleu_from_counts(const BleuCounts& c, bool smoothed) {
  if (c.hyp_length == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double m = static_cast<double>(c.matches[n]);
    double t = static_cast<double>(c.totals[n]);
    if (smoothed && n > 0) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double hyp = static_cast<double>(c.hyp_length);
  const double ref = static_cast<double>(c.ref_length);
  const double bp = hyp > ref ? 1.0 : std::exp(1.0 - ref / hyp);
  return bp * std::exp(log_sum / 4.0);
}

BleuResult bleu4(std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  if (hyps.empty()) throw ContractError("bleu: empty corpus");
  BleuResult r;
  r.counts = bleu_counts(hyps, refs);
  r.bleu = bleu_from_counts(r.counts, true);
  r.bleu_unsmoothed = bleu_from_counts(r.counts, false);
  const double hyp = static_cast<double>(r.counts.hyp_length);
  const double ref = static_cast<double>(r.counts.ref_length);
  r.brevity_penalty = hyp == 0.0 ? 0.0 : (hyp > ref ? 1.0 : std::exp(1.0 - ref / hyp));
  for (std::size_t n = 0; n < 4; ++n) {
    const double add = n > 0 ? 1.0 : 0.0;
    const double t = static_cast<double>(r.counts.totals[n]) + add;
    r.precisions[n] = t == 0.0 ? 0.0 : (static_cast<double>(r.counts.matches[n]) + add) / t;
  }
  return r;
}

// ------------------------------------------------------------ IR baseline

IrBaseline::IrBaseline(std::span<const std::string> training_responses) {
  for (const auto& text : training_responses)
    for (const auto& t : tokenize(text)) ++freq_[t];
}

double IrBaseline::weight(const std::string& token) const {
  auto it = freq_.find(token);
  const double f = it == freq_.end() ? 0.0 : static_cast<double>(it->second);
  return 1.0 / (1.0 + std::log(1.0 + f));
}

double IrBaseline::score(std::span<const std::string> context,
                         std::span<const std::string> candidate) const {
  const std::set<std::string> a(context.begin(), context.end());
  const std::set<std::string> b(candidate.begin(), candidate.end());
  double s = 0.0;
  for (const auto& t : a)
    if (b.count(t)) s += weight(t);
  return s;
}

std::vector<double> IrBaseline::score_all(const std::string& context_text,
                                          std::span<const std::string> candidates) const {
  const auto ctx = tokenize(context_text);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(score(ctx, tokenize(c)));
  return out;
}

RankingResult IrBaseline::rank(const std::string& context_text,
                               std::span<const std::string> candidates) const {
  if (candidates.empty()) throw ContractError("ir baseline: no candidates");
  return rank_scores(score_all(context_text, candidates));
}

// ------------------------------------------------------------- preference

BinomialTest binomial_two_tailed(const PreferenceTally& tally) {
  using boost::multiprecision::cpp_int;
  const std::uint64_t n = tally.n();
  if (n == 0) throw ContractError("binomial test needs at least one judgement");
  const std::uint64_t w = tally.wins_model;

  cpp_int c = 1;  // C(n, i)
  std::vector<cpp_int> row;
  row.reserve(n + 1);
  for (std::uint64_t i = 0; i <= n; ++i) {
    row.push_back(c);
    c = c * (n - i) / (i + 1);
  }
  const cpp_int& observed = row[w];
  cpp_int total = 0;
  for (const auto& v : row)
    if (v <= observed) total += v;

  BinomialTest out;
  out.n = n;
  out.numerator = total.str();
  // p = total / 2^n, keeping the top 62 bits of the numerator.
  const std::size_t bits = total == 0 ? 0 : boost::multiprecision::msb(total) + 1;
  const std::size_t shift = bits > 62 ? bits - 62 : 0;
  const auto top = static_cast<std::uint64_t>(total >> shift);
  out.p_value = std::ldexp(static_cast<double>(top),
                           static_cast<int>(shift) - static_cast<int>(n));
  return out;
}

// ------------------------------------------------------------- reports

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = metadata.is_object() ? metadata : nlohmann::json::object();
  for (const auto& [turn, values] : turns) {
    nlohmann::json t(values);
    t["count"] = counts.count(turn) ? counts.at(turn) : 0;
    j["turn" + std::to_string(turn)] = t;
  }
  nlohmann::json a(all);
  a["count"] = total;
  j["all"] = a;
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& [key, value] : j.items()) {
    if (key.rfind("turn", 0) == 0 && key.size() > 4 && value.is_object()) {
      const int turn = std::stoi(key.substr(4));
      for (const auto& [m, v] : value.items()) {
        if (m == "count") {
          r.counts[turn] = v.get<std::size_t>();
        } else if (v.is_number()) {
          r.turns[turn][m] = v.get<double>();
        }
      }
    } else if (key == "all" && value.is_object()) {
      for (const auto& [m, v] : value.items()) {
        if (m == "count") {
          r.total = v.get<std::size_t>();
        } else if (v.is_number()) {
          r.all[m] = v.get<double>();
        }
      }
    } else {
      r.metadata[key] = value;
    }
  }
  return r;
}

std::string MetricReport::to_table(const std::vector<std::string>& metrics, double scale) const {
  std::ostringstream os;
  os << std::left << std::setw(12) << "metric";
  for (const auto& [turn, _] : turns) os << std::right << std::setw(10) << ("Turn " + std::to_string(turn));
  os << std::right << std::setw(10) << "All" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& m : metrics) {
    os << std::left << std::setw(12) << m;
    for (const auto& [turn, values] : turns) {
      auto it = values.find(m);
      os << std::right << std::setw(10);
      if (it == values.end()) {
        os << "-";
      } else {
        os << it->second * scale;
      }
    }
    auto it = all.find(m);
    os << std::right << std::setw(10);
    if (it == all.end()) {
      os << "-";
    } else {
      os << it->second * scale;
    }
    os << '\n';
  }
  os << std::left << std::setw(12) << "count";
  for (const auto& [turn, _] : turns) {
    os << std::right << std::setw(10) << (counts.count(turn) ? counts.at(turn) : 0);
  }
  os << std::right << std::setw(10) << total << '\n';
  return os.str();
}

void MetricAccumulator::add(int turn, const std::map<std::string, double>& values) {
  auto& sums = sums_[turn];
  for (const auto& [k, v] : values) sums[k] += v;
  ++counts_[turn];
}

MetricReport MetricAccumulator::finish() const {
  MetricReport r;
  std::map<std::string, double> grand;
  for (const auto& [turn, sums] : sums_) {
    const std::size_t n = counts_.at(turn);
    r.counts[turn] = n;
    r.total += n;
    for (const auto& [k, s] : sums) {
      r.turns[turn][k] = s / static_cast<double>(n);
      grand[k] += s;
    }
  }
  for (const auto& [k, s] : grand) r.all[k] = s / static_cast<double>(r.total);
  return r;
}

}  // namespace imagechat
