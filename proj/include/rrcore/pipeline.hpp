// SPDX-License-Identifier: Apache-2.0
/**
 * @file   pipeline.hpp
 * @brief  Synthetic corpus generator, preprocessing with retrieval, and the
 *         four-way ablation run.
 */
#pragma once

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"
#include "rrcore/retrieval.hpp"
#include "rrcore/training.hpp"

namespace rrcore {

// ---------------------------------------------------------------------------
// Synthetic corpus
//
// Each app's description names one feature token. A review mentions an issue
// subtype keyword and a device; the response names the app's feature (only in
// its description) and a fix token keyed by (issue, subtype, device), which
// similar reviews' responses share.

struct SynthIssue {
  const char *name;
  std::vector<const char *> subtypes;
};

inline const std::vector<SynthIssue> &synth_issues() {
  static const std::vector<SynthIssue> issues = {
      {"crash", {"freezes", "closes", "restarts", "hangs", "stalls", "quits"}},
      {"battery", {"drains", "overheats", "heats", "draws", "empties", "burns"}},
      {"ads", {"popups", "banners", "videos", "interstitials", "trackers", "promos"}},
      {"login", {"password", "signin", "logout", "otp", "captcha", "account"}},
      {"sync", {"backup", "cloud", "upload", "merge", "conflict", "offline"}},
  };
  return issues;
}

inline const std::vector<const char *> &synth_devices() {
  static const std::vector<const char *> d = {"phone", "tablet", "chromebook", "watch"};
  return d;
}

struct SynthOptions {
  std::size_t apps = 25;
};

namespace detail {

/// Pronounceable nonsense word of `syllables` consonant-vowel pairs plus a
/// closing consonant.
template <class Rng> std::string pseudo_word(Rng &rng, std::size_t syllables) {
  static const char cons[] = "bdfgklmnprstvz";
  static const char vow[] = "aeiou";
  std::uniform_int_distribution<std::size_t> c(0, sizeof(cons) - 2), v(0, sizeof(vow) - 2);
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w += cons[c(rng)];
    w += vow[v(rng)];
  }
  w += cons[c(rng)];
  return w;
}

template <class Rng> std::string fresh_word(Rng &rng, std::set<std::string> &used, std::size_t syl) {
  for (;;) {
    auto w = pseudo_word(rng, syl);
    if (used.insert(w).second)
      return w;
  }
}

} // namespace detail

inline std::vector<RawRecord> synth_corpus(std::size_t n, std::uint64_t seed,
                                           const SynthOptions &opt = {}) {
  if (n < 10)
    throw ConfigError("synthetic corpus needs at least 10 records");
  if (opt.apps == 0)
    throw ConfigError("synthetic corpus needs at least one app");
  std::mt19937_64 rng(seed);
  const auto &issues = synth_issues();
  const auto &devices = synth_devices();
  std::set<std::string> used;

  struct App {
    std::string name;
    std::string feature;
    std::string description;
  };
  static const char *adjectives[] = {"simple", "fast", "friendly", "free", "powerful", "tiny"};
  std::vector<App> apps(opt.apps);
  for (auto &a : apps) {
    a.name = detail::fresh_word(rng, used, 2);
    std::string adj = adjectives[std::uniform_int_distribution<std::size_t>(0, 5)(rng)];
    a.feature = detail::fresh_word(rng, used, 3);
    a.description = a.name + " is a " + adj + " app. most problems go away with " + a.feature +
                    " turned on.";
  }
  // fixes[issue][subtype][device]
  std::vector<std::vector<std::vector<std::string>>> fixes(issues.size());
  for (std::size_t i = 0; i < issues.size(); ++i) {
    fixes[i].resize(issues[i].subtypes.size());
    for (auto &s : fixes[i])
      for (std::size_t d = 0; d < devices.size(); ++d)
        s.push_back(detail::fresh_word(rng, used, 3));
  }

  static const char *review_templates[] = {
      "the app {s} on my {d} every time i open it.",
      "since the last update it {s} on my {d}. please fix!",
      "{s} problem on my {d}, really annoying.",
      "why does it keep {s} on the {d}? one star.",
  };
  std::vector<RawRecord> out;
  out.reserve(n);
  auto pick = [&](std::size_t m) { return std::uniform_int_distribution<std::size_t>(0, m - 1)(rng); };
  std::string rare;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t a = pick(apps.size());
    const std::size_t i = pick(issues.size());
    const std::size_t s = pick(issues[i].subtypes.size());
    const std::size_t d = pick(devices.size());
    std::string review = review_templates[pick(4)];
    auto subst = [](std::string t, const std::string &key, const std::string &val) {
      auto pos = t.find(key);
      return t.replace(pos, key.size(), val);
    };
    review = subst(review, "{s}", issues[i].subtypes[s]);
    review = subst(review, "{d}", devices[d]);
    std::string response = std::string("hi, sorry about the ") + issues[i].name +
                           " problem. please turn on " + apps[a].feature +
                           " in settings and update to " + fixes[i][s][d] + " for your " +
                           devices[d] + ". thanks!";
    // Every 50th record and its successor share a ticket token that occurs
    // nowhere else.
    const bool opens = r % 50 == 0 && r + 1 < n;
    if (opens)
      rare = detail::fresh_word(rng, used, 4);
    if (opens || r % 50 == 1) {
      review += " ticket " + rare + ".";
      response += " ticket " + rare + ".";
    }
    out.push_back({apps[a].name, review, response, apps[a].description});
  }
  return out;
}

inline nlohmann::json raw_to_json(const RawRecord &r) {
  return {{"app_id", r.app_id},
          {"review", r.review},
          {"response", r.response},
          {"description", r.description}};
}

inline void write_corpus(const std::string &path, std::span<const RawRecord> records) {
  std::vector<nlohmann::json> rows;
  rows.reserve(records.size());
  for (const auto &r : records)
    rows.push_back(raw_to_json(r));
  write_jsonl(path, rows);
}

// ---------------------------------------------------------------------------
// Splits and preprocessing

struct SplitSizes {
  std::size_t train = 0, valid = 0, test = 0;
};

struct PreprocessConfig {
  std::size_t vocab_cap = kDefaultVocabCap;
  std::size_t min_freq = 1;
  std::size_t k_store = 5; ///< retrievals kept per record; runs may use any K up to this
  bool lemmatize = false;
  double valid_fraction = 14727.0 / 309246.0;
  double test_fraction = 14727.0 / 309246.0;
  std::uint64_t seed = 1;
};

inline SplitSizes split_sizes(std::size_t n, double valid_fraction, double test_fraction) {
  if (valid_fraction < 0.0 || test_fraction < 0.0 || valid_fraction + test_fraction >= 1.0)
    throw ConfigError("split fractions must be non-negative and sum below 1");
  SplitSizes s;
  s.valid = static_cast<std::size_t>(std::llround(static_cast<double>(n) * valid_fraction));
  s.test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
  if (s.valid + s.test >= n)
    throw DataError("corpus of " + std::to_string(n) + " records is too small to split");
  s.train = n - s.valid - s.test;
  return s;
}

/// Seeded permutation cut into train / valid / test index lists.
inline std::array<std::vector<std::size_t>, 3> split_indices(std::size_t n, const SplitSizes &s,
                                                             std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::array<std::vector<std::size_t>, 3> out;
  out[0].assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(s.train));
  out[1].assign(idx.begin() + static_cast<std::ptrdiff_t>(s.train),
                idx.begin() + static_cast<std::ptrdiff_t>(s.train + s.valid));
  out[2].assign(idx.begin() + static_cast<std::ptrdiff_t>(s.train + s.valid), idx.end());
  return out;
}

/// A tokenized record with its ranked retrievals attached.
struct PreparedRecord {
  std::size_t source_index = 0; ///< line in the raw corpus
  TokenizedRecord record;
  std::vector<TokenList> retrieved;
  std::vector<std::size_t> retrieved_docs;
  std::vector<double> retrieved_scores;

  nlohmann::json to_json() const {
    return {{"source_index", source_index},
            {"app_id", record.app_id},
            {"review", record.review},
            {"response", record.response},
            {"description", record.description},
            {"retrieved", retrieved},
            {"retrieved_docs", retrieved_docs},
            {"retrieved_scores", retrieved_scores}};
  }
  static PreparedRecord from_json(const nlohmann::json &j) {
    try {
      PreparedRecord p;
      p.source_index = j.at("source_index").get<std::size_t>();
      p.record.app_id = j.value("app_id", "");
      p.record.review = j.at("review").get<TokenList>();
      p.record.response = j.at("response").get<TokenList>();
      p.record.description = j.at("description").get<TokenList>();
      p.retrieved = j.at("retrieved").get<std::vector<TokenList>>();
      p.retrieved_docs = j.at("retrieved_docs").get<std::vector<std::size_t>>();
      p.retrieved_scores = j.at("retrieved_scores").get<std::vector<double>>();
      return p;
    } catch (const nlohmann::json::exception &e) {
      throw DataError(std::string("malformed prepared record: ") + e.what());
    }
  }
};

struct PreparedCorpus {
  Vocabulary vocab;
  TfIdfIndex index;
  std::vector<PreparedRecord> train, valid, test;
};

inline void attach_retrievals(PreparedRecord &p, const TfIdfIndex &index, std::size_t k,
                              std::optional<std::size_t> exclude) {
  auto hits = index.top_k(p.record.review, k, exclude);
  p.retrieved.clear();
  p.retrieved_docs.clear();
  p.retrieved_scores.clear();
  for (const auto &h : hits) {
    p.retrieved.push_back(index.doc_meta(h.doc).response);
    p.retrieved_docs.push_back(h.doc);
    p.retrieved_scores.push_back(h.score);
  }
}

/// Tokenizes, splits, builds the vocabulary and index over the training
/// split, and attaches top-k retrievals (leave-one-out for training rows).
inline PreparedCorpus preprocess(std::span<const RawRecord> raw, const PreprocessConfig &cfg) {
  if (raw.empty())
    throw DataError("input corpus has 0 records");
  if (cfg.k_store == 0)
    throw ConfigError("k_store must be at least 1");
  TokenizeOptions topt{cfg.lemmatize};
  std::vector<TokenizedRecord> tok;
  tok.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    tok.push_back(tokenize_record(raw[i], topt));
    if (tok.back().review.empty())
      throw DataError("record " + std::to_string(i + 1) + ": review is empty after tokenization");
  }
  auto sizes = split_sizes(raw.size(), cfg.valid_fraction, cfg.test_fraction);
  auto parts = split_indices(raw.size(), sizes, cfg.seed);

  PreparedCorpus pc;
  std::vector<TokenizedRecord> train_records;
  std::vector<TokenList> train_reviews;
  std::vector<DocMeta> meta;
  for (std::size_t i : parts[0]) {
    train_records.push_back(tok[i]);
    train_reviews.push_back(tok[i].review);
    meta.push_back({"r" + std::to_string(i), tok[i].response});
  }
  pc.vocab = Vocabulary::build(train_records, cfg.vocab_cap, cfg.min_freq);
  pc.index = TfIdfIndex::build(train_reviews, std::move(meta));

  std::vector<PreparedRecord> *dest[3] = {&pc.train, &pc.valid, &pc.test};
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t j = 0; j < parts[s].size(); ++j) {
      PreparedRecord p;
      p.source_index = parts[s][j];
      p.record = tok[parts[s][j]];
      attach_retrievals(p, pc.index, cfg.k_store,
                        s == 0 ? std::optional<std::size_t>(j) : std::nullopt);
      dest[s]->push_back(std::move(p));
    }
  return pc;
}

inline void save_prepared(const std::string &dir, const PreparedCorpus &pc) {
  std::filesystem::create_directories(dir);
  pc.vocab.save(dir + "/vocab.txt");
  pc.index.save(dir + "/index");
  const std::pair<const char *, const std::vector<PreparedRecord> *> parts[] = {
      {"train", &pc.train}, {"valid", &pc.valid}, {"test", &pc.test}};
  for (const auto &[name, recs] : parts) {
    std::vector<nlohmann::json> rows;
    for (const auto &r : *recs)
      rows.push_back(r.to_json());
    write_jsonl(dir + "/" + name + ".jsonl", rows);
  }
}

inline std::vector<PreparedRecord> load_prepared_split(const std::string &path) {
  std::vector<PreparedRecord> out;
  for (const auto &j : read_jsonl(path))
    out.push_back(PreparedRecord::from_json(j));
  return out;
}

inline PreparedCorpus load_prepared(const std::string &dir) {
  PreparedCorpus pc;
  pc.vocab = Vocabulary::load(dir + "/vocab.txt");
  pc.index = TfIdfIndex::load(dir + "/index");
  pc.train = load_prepared_split(dir + "/train.jsonl");
  pc.valid = load_prepared_split(dir + "/valid.jsonl");
  pc.test = load_prepared_split(dir + "/test.jsonl");
  return pc;
}

inline std::vector<EncodedExample> encode_split(std::span<const PreparedRecord> recs,
                                                const Vocabulary &vocab, std::size_t k,
                                                std::size_t max_len,
                                                EncodeMode mode = EncodeMode::train) {
  std::vector<EncodedExample> out;
  out.reserve(recs.size());
  for (const auto &r : recs) {
    if (k > r.retrieved.size() && r.retrieved.size() < r.retrieved_docs.size())
      throw DataError("prepared record holds fewer retrievals than requested");
    auto ret = pad_retrieved(r.retrieved, k);
    out.push_back(encode_example(r.record, ret, vocab, max_len, mode));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  Ablation ablation;
  BleuReport valid;
  BleuReport test;
  std::size_t best_step = 0;
  double seconds = 0.0;
};

inline nlohmann::json bleu_json(const BleuReport &b) {
  return {{"bleu4", b.bleu4},
          {"p1", b.precision[0]},
          {"p2", b.precision[1]},
          {"p3", b.precision[2]},
          {"p4", b.precision[3]},
          {"brevity_penalty", b.brevity_penalty},
          {"candidate_length", b.candidate_length},
          {"reference_length", b.reference_length}};
}

inline nlohmann::json ablation_json(std::span<const AblationRow> rows) {
  auto out = nlohmann::json::array();
  for (const auto &r : rows)
    out.push_back({{"model", r.ablation.label()},
                   {"ablation", r.ablation.name()},
                   {"valid", bleu_json(r.valid)},
                   {"test", bleu_json(r.test)},
                   {"best_step", r.best_step},
                   {"seconds", r.seconds}});
  return out;
}

/// Trains and evaluates the full model and the three reduced variants with
/// identical data and seed. Test BLEU comes from each run's best-validation
/// parameters.
template <class Real>
std::vector<AblationRow> run_ablation(const TrainConfig &base, const PreparedCorpus &pc,
                                      const std::string &out_dir = {},
                                      std::function<void(const std::string &)> progress = {}) {
  const std::size_t k = base.K;
  auto train_set = encode_split(pc.train, pc.vocab, k, base.max_len);
  auto valid_set = encode_split(pc.valid, pc.vocab, k, base.max_len);
  auto test_set = encode_split(pc.test, pc.vocab, k, base.max_len);
  std::vector<AblationRow> rows;
  for (auto ab : {Ablation::full(), Ablation::no_retrieval(), Ablation::no_description(),
                  Ablation::only_review()}) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = base;
    cfg.ablation = ab;
    TrainOptions opts;
    if (!out_dir.empty())
      opts.out_dir = out_dir + "/" + ab.name();
    if (progress)
      opts.on_row = [&](const MetricsRow &r) {
        progress(ab.name() + " step " + std::to_string(r.step) + " loss " +
                 std::to_string(r.train_loss) +
                 (r.val_bleu4 ? " val_bleu4 " + std::to_string(*r.val_bleu4) : std::string()));
      };
    auto res = train<Real>(cfg, pc.vocab, train_set, valid_set, opts);
    AblationRow row;
    row.ablation = ab;
    row.best_step = res.best_step;
    row.valid = evaluate_bleu(res.best, pc.vocab, valid_set, ab, cfg.decode_max_len).bleu;
    if (!test_set.empty())
      row.test = evaluate_bleu(res.best, pc.vocab, test_set, ab, cfg.decode_max_len).bleu;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  }
  return rows;
}

} // namespace rrcore
