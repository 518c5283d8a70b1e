// SPDX-License-Identifier: Apache-2.0
/**
 * @file   generation.hpp
 * @brief  Greedy and beam decoding, attention alignment export.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"
#include "rrcore/model.hpp"

namespace rrcore {

enum class Termination { eos, max_len };

inline const char *termination_name(Termination t) {
  return t == Termination::eos ? "eos" : "max_len";
}

/// Per-step attention summary, copied out of the graph as plain numbers.
struct StepSummary {
  std::vector<double> review;      ///< review token attention
  std::vector<double> description; ///< empty when the description is absent
  std::vector<double> responses;   ///< response-level weights over K, empty when absent
  std::optional<double> gamma;
  std::optional<double> theta;
};

struct GenerationResult {
  IdList ids; ///< emitted ids, EOS excluded
  TokenList tokens;
  Termination termination = Termination::max_len;
  double log_prob = 0.0; ///< sum of log P over emitted tokens, EOS included
  std::size_t scored_steps = 0;
  std::vector<StepSummary> steps; ///< empty in lightweight mode

  /// Length-normalized log probability used to rank beam hypotheses.
  double score() const {
    return scored_steps == 0 ? 0.0 : log_prob / static_cast<double>(scored_steps);
  }
};

struct DecodeOptions {
  std::size_t max_len = kDefaultMaxLen;
  bool keep_steps = false;
  Ablation ablation = Ablation::full();
};

namespace detail {

inline void check_decode_inputs(const EncodedExample &ex, const Vocabulary &vocab,
                                std::size_t model_vocab, std::size_t max_len) {
  if (ex.vocab_hash != vocab.hash())
    throw DataError("example was encoded with vocabulary " + hex64(ex.vocab_hash) +
                    ", model uses " + hex64(vocab.hash()));
  if (vocab.size() != model_vocab)
    throw DataError("vocabulary size " + std::to_string(vocab.size()) +
                    " does not match the model (" + std::to_string(model_vocab) + ")");
  if (max_len == 0)
    throw ConfigError("max_len must be at least 1");
}

template <class Real> std::vector<double> to_doubles(const Tensor<Real> &t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

template <class Real> StepSummary summarize(const DecoderStepOutput<Real> &s) {
  StepSummary out;
  out.review = to_doubles(s.review.weights);
  if (s.description)
    out.description = to_doubles(s.description->attention.weights);
  if (s.retrieved)
    out.responses = to_doubles(s.retrieved->response_level.weights);
  if (s.fusion) {
    out.gamma = static_cast<double>(s.fusion->gamma.item());
    out.theta = static_cast<double>(s.theta.item());
  }
  return out;
}

/// Highest-probability id; ties go to the lowest id and PAD is never chosen.
template <class Real> TokenId argmax_id(const Tensor<Real> &p) {
  auto v = p.values();
  std::size_t best = 1;
  for (std::size_t j = 2; j < v.size(); ++j)
    if (v[j] > v[best])
      best = j;
  return static_cast<TokenId>(best);
}

inline TokenList surface(const IdList &ids, const Vocabulary &vocab, const EncodedExample &ex) {
  return decode_ids(ids, vocab, ex.ext_map);
}

} // namespace detail

template <class Real>
GenerationResult greedy_decode(const ModelParams<Real> &p, const Vocabulary &vocab,
                               const EncodedExample &ex, const DecodeOptions &opt = {}) {
  detail::check_decode_inputs(ex, vocab, p.config.vocab_size, opt.max_len);
  NoGradGuard ng;
  std::mt19937_64 unused(0);
  const std::size_t ext = ex.extended_size();
  auto enc = encode_sources(ex, p, opt.ablation, false, unused);
  auto states = initial_states(enc, p);
  GenerationResult res;
  TokenId prev = kSos;
  for (std::size_t t = 0; t < opt.max_len; ++t) {
    auto step = decoder_step(p, enc, states, prev, ext, false, unused);
    const TokenId y = detail::argmax_id(step.p_final);
    res.log_prob += std::log(std::max<double>(step.p_final.values()[y], 1e-12));
    ++res.scored_steps;
    if (opt.keep_steps)
      res.steps.push_back(detail::summarize(step));
    if (y == kEos) {
      res.termination = Termination::eos;
      break;
    }
    res.ids.push_back(y);
    states = std::move(step.states);
    prev = y;
  }
  res.tokens = detail::surface(res.ids, vocab, ex);
  return res;
}

/// Beam search ranked by length-normalized log probability. The greedy
/// hypothesis is always among the candidates, so the result never scores
/// below greedy decoding.
template <class Real>
GenerationResult beam_decode(const ModelParams<Real> &p, const Vocabulary &vocab,
                             const EncodedExample &ex, std::size_t width,
                             const DecodeOptions &opt = {}) {
  if (width == 0)
    throw ConfigError("beam width must be at least 1");
  detail::check_decode_inputs(ex, vocab, p.config.vocab_size, opt.max_len);
  NoGradGuard ng;
  std::mt19937_64 unused(0);
  const std::size_t ext = ex.extended_size();
  auto enc = encode_sources(ex, p, opt.ablation, false, unused);

  struct Hyp {
    GenerationResult r;
    std::vector<Tensor<Real>> states;
    TokenId prev = kSos;
  };
  std::vector<Hyp> beam(1);
  beam[0].states = initial_states(enc, p);
  std::vector<GenerationResult> finished;

  for (std::size_t t = 0; t < opt.max_len && !beam.empty(); ++t) {
    struct Cand {
      std::size_t parent;
      TokenId id;
      double log_prob;
    };
    std::vector<Cand> cands;
    std::vector<DecoderStepOutput<Real>> outs;
    outs.reserve(beam.size());
    for (std::size_t b = 0; b < beam.size(); ++b) {
      outs.push_back(decoder_step(p, enc, beam[b].states, beam[b].prev, ext, false, unused));
      auto v = outs.back().p_final.values();
      // Top `width` ids of this hypothesis, ties to the lower id.
      std::vector<std::size_t> idx;
      for (std::size_t j = 1; j < v.size(); ++j)
        idx.push_back(j);
      const std::size_t n = std::min(width, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                        [&](std::size_t a, std::size_t c) {
                          return v[a] != v[c] ? v[a] > v[c] : a < c;
                        });
      for (std::size_t i = 0; i < n; ++i)
        cands.push_back({b, static_cast<TokenId>(idx[i]),
                         beam[b].r.log_prob + std::log(std::max<double>(v[idx[i]], 1e-12))});
    }
    const double len = static_cast<double>(t + 1);
    std::stable_sort(cands.begin(), cands.end(), [&](const Cand &a, const Cand &c) {
      return a.log_prob / len > c.log_prob / len;
    });
    std::vector<Hyp> next;
    for (const auto &c : cands) {
      if (next.size() >= width)
        break;
      Hyp h;
      h.r = beam[c.parent].r;
      h.r.log_prob = c.log_prob;
      h.r.scored_steps = t + 1;
      if (opt.keep_steps)
        h.r.steps.push_back(detail::summarize(outs[c.parent]));
      if (c.id == kEos) {
        h.r.termination = Termination::eos;
        finished.push_back(std::move(h.r));
        continue;
      }
      h.r.ids.push_back(c.id);
      h.states = outs[c.parent].states;
      h.prev = c.id;
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }
  for (auto &h : beam) {
    h.r.termination = Termination::max_len;
    finished.push_back(std::move(h.r));
  }
  finished.push_back(greedy_decode(p, vocab, ex, opt));
  // First best wins on ties; the greedy fallback is last.
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score() > finished[best].score())
      best = i;
  GenerationResult out = std::move(finished[best]);
  out.tokens = detail::surface(out.ids, vocab, ex);
  return out;
}

/// Alignment matrices plus axis labels as JSON.
inline nlohmann::json alignment_json(const GenerationResult &r, const EncodedExample &ex) {
  if (r.steps.empty())
    throw DataError("generation result carries no step outputs; decode with keep_steps");
  nlohmann::json j;
  j["generated"] = r.tokens;
  if (r.termination == Termination::eos && r.steps.size() == r.tokens.size() + 1) {
    auto labels = r.tokens;
    labels.push_back(Vocabulary().token(kEos));
    j["steps"] = labels;
  } else {
    j["steps"] = r.tokens;
  }
  j["review_tokens"] = ex.review_tokens;
  j["description_tokens"] = ex.description_tokens;
  auto &rev = j["review"] = nlohmann::json::array();
  auto &desc = j["description"] = nlohmann::json::array();
  auto &resp = j["responses"] = nlohmann::json::array();
  auto &gam = j["gamma"] = nlohmann::json::array();
  auto &the = j["theta"] = nlohmann::json::array();
  for (const auto &s : r.steps) {
    rev.push_back(s.review);
    if (!s.description.empty())
      desc.push_back(s.description);
    if (!s.responses.empty())
      resp.push_back(s.responses);
    gam.push_back(s.gamma ? nlohmann::json(*s.gamma) : nlohmann::json());
    the.push_back(s.theta ? nlohmann::json(*s.theta) : nlohmann::json());
  }
  return j;
}

inline void export_attention(const GenerationResult &r, const EncodedExample &ex,
                             const std::string &path) {
  auto j = alignment_json(r, ex);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw DataError("cannot write " + path);
  out << j.dump(1) << '\n';
}

} // namespace rrcore
