// Copyright 2026 The imagechat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations the library is checked against. They are written
// from the metric definitions, not from the library code, and favour
// obviousness over speed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include <gmpxx.h>

namespace imagechat::oracle {

using Toks = std::vector<std::string>;

// Textbook O(nm) table.
inline std::size_t lcs(const Toks& a, const Toks& b) {
  std::vector<std::vector<std::size_t>> t(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      t[i][j] = a[i - 1] == b[j - 1] ? t[i - 1][j - 1] + 1 : std::max(t[i - 1][j], t[i][j - 1]);
  return t[a.size()][b.size()];
}

inline double f_measure(double overlap, double hyp_len, double ref_len) {
  if (overlap == 0.0) return 0.0;
  const double p = overlap / hyp_len;
  const double r = overlap / ref_len;
  return 2.0 * p * r / (p + r);
}

inline double rouge_l(const Toks& hyp, const Toks& ref) {
  if (hyp.empty()) return 0.0;
  return f_measure(static_cast<double>(lcs(hyp, ref)), static_cast<double>(hyp.size()),
                   static_cast<double>(ref.size()));
}

// Multiset intersection size via sorted merge.
inline double token_f1(Toks hyp, Toks ref) {
  if (hyp.empty()) return 0.0;
  const double hl = static_cast<double>(hyp.size()), rl = static_cast<double>(ref.size());
  std::sort(hyp.begin(), hyp.end());
  std::sort(ref.begin(), ref.end());
  Toks common;
  std::set_intersection(hyp.begin(), hyp.end(), ref.begin(), ref.end(),
                        std::back_inserter(common));
  return f_measure(static_cast<double>(common.size()), hl, rl);
}

struct BleuTally {
  std::uint64_t match[4] = {0, 0, 0, 0};
  std::uint64_t total[4] = {0, 0, 0, 0};
  std::uint64_t c = 0, r = 0;
};

inline std::map<Toks, std::uint64_t> grams(const Toks& s, std::size_t n) {
  std::map<Toks, std::uint64_t> m;
  for (std::size_t i = 0; i + n <= s.size(); ++i) m[Toks(s.begin() + i, s.begin() + i + n)] += 1;
  return m;
}

inline BleuTally bleu_tally(const std::vector<Toks>& hyps, const std::vector<Toks>& refs) {
  BleuTally t;
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    t.c += hyps[k].size();
    t.r += refs[k].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = grams(hyps[k], n), r = grams(refs[k], n);
      for (const auto& [g, cnt] : h) {
        t.total[n - 1] += cnt;
        auto it = r.find(g);
        if (it != r.end()) t.match[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  return t;
}

// Geometric mean of the four precisions (add-one for n >= 2 when smoothed)
// times the brevity penalty.
inline double bleu(const BleuTally& t, bool smoothed) {
  if (t.c == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double add = smoothed && n > 0 ? 1.0 : 0.0;
    const double m = static_cast<double>(t.match[n]) + add;
    const double d = static_cast<double>(t.total[n]) + add;
    if (m == 0.0 || d == 0.0) return 0.0;
    log_sum += std::log(m / d);
  }
  const double c = static_cast<double>(t.c), r = static_cast<double>(t.r);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / 4.0);
}

struct Binomial {
  mpz_class numerator;
  double p = 0.0;
};

// Direct enumeration of P(X = i) <= P(X = w) with GMP binomials.
inline Binomial binomial_two_tailed(unsigned long n, unsigned long w) {
  mpz_class observed, c, total = 0;
  mpz_bin_uiui(observed.get_mpz_t(), n, w);
  for (unsigned long i = 0; i <= n; ++i) {
    mpz_bin_uiui(c.get_mpz_t(), n, i);
    if (c <= observed) total += c;
  }
  mpz_class denom = 1;
  denom <<= n;
  mpq_class q(total, denom);
  q.canonicalize();
  return {total, q.get_d()};
}

inline bool is_question(const std::string& text) {
  static const std::regex lead(R"(^\s*(who|what|when|where|why|how)([\s.,!?'"]|$))",
                               std::regex::icase);
  return text.find('?') != std::string::npos || std::regex_search(text, lead);
}

// Random token sequences over a small alphabet so that overlaps are common.
inline Toks random_tokens(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                          std::size_t alphabet) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len), pick(0, alphabet - 1);
  Toks t(len(rng));
  for (auto& s : t) s = "t" + std::to_string(pick(rng));
  return t;
}

}  // namespace imagechat::oracle
