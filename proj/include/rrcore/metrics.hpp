// SPDX-License-Identifier: Apache-2.0
/**
 * @file   metrics.hpp
 * @brief  Corpus-level BLEU-4 with clipped n-gram precisions.
 *
 * Precision denominators count candidate n-grams. A zero precision enters
 * the geometric mean as log(1e-9) so tiny corpora stay finite.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"

namespace rrcore {

struct BleuReport {
  double bleu4 = 0.0;                ///< 0..100
  std::array<double, 4> precision{}; ///< p_1..p_4 in [0, 1]
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 1.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

namespace detail {

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const TokenList &toks,
                                                                    std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> c;
  if (toks.size() < n)
    return c;
  for (std::size_t i = 0; i + n <= toks.size(); ++i)
    ++c[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                 toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

inline void check_pairs(std::span<const TokenList> cands, std::span<const TokenList> refs) {
  if (cands.empty())
    throw DataError("BLEU over an empty candidate corpus");
  if (cands.size() != refs.size())
    throw DataError("BLEU needs one reference per candidate (" + std::to_string(cands.size()) +
                    " vs " + std::to_string(refs.size()) + ")");
}

} // namespace detail

/// Clipped matches and candidate n-gram total summed over the corpus.
inline std::pair<std::size_t, std::size_t> ngram_matches(std::span<const TokenList> cands,
                                                         std::span<const TokenList> refs,
                                                         std::size_t n) {
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    auto hc = detail::ngram_counts(cands[i], n);
    auto hr = detail::ngram_counts(refs[i], n);
    for (const auto &[g, c] : hc) {
      total += c;
      auto it = hr.find(g);
      if (it != hr.end())
        hit += std::min(c, it->second);
    }
  }
  return {hit, total};
}

inline double modified_precision(std::span<const TokenList> cands, std::span<const TokenList> refs,
                                 std::size_t n) {
  detail::check_pairs(cands, refs);
  if (n < 1 || n > 4)
    throw ConfigError("n-gram order must be in 1..4");
  auto [hit, total] = ngram_matches(cands, refs, n);
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

inline BleuReport corpus_bleu4(std::span<const TokenList> cands, std::span<const TokenList> refs) {
  detail::check_pairs(cands, refs);
  BleuReport r;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    r.candidate_length += cands[i].size();
    r.reference_length += refs[i].size();
  }
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto [hit, total] = ngram_matches(cands, refs, n);
    r.matches[n - 1] = hit;
    r.totals[n - 1] = total;
    r.precision[n - 1] = total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
    log_sum += 0.25 * std::log(std::max(r.precision[n - 1], 1e-9));
  }
  const double c = static_cast<double>(r.candidate_length);
  const double ref = static_cast<double>(r.reference_length);
  if (c > ref)
    r.brevity_penalty = 1.0;
  else if (c == 0.0)
    r.brevity_penalty = 0.0;
  else
    r.brevity_penalty = std::exp(1.0 - ref / c);
  r.bleu4 = 100.0 * r.brevity_penalty * std::exp(log_sum);
  return r;
}

} // namespace rrcore
