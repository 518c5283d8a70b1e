// SPDX-License-Identifier: Apache-2.0
/**
 * @file   corpus.hpp
 * @brief  Text normalization, vocabulary construction and example encoding
 *         with per-example extended vocabularies for copyable OOV tokens.
 */
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rrcore/errors.hpp"

namespace rrcore {

using TokenList = std::vector<std::string>;
using TokenId = std::int32_t;
using IdList = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kSos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kDefaultVocabCap = 10000;
inline constexpr std::size_t kDefaultMaxLen = 200;

/// 64-bit FNV-1a. Stable across platforms, used for corpus and vocabulary
/// fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

struct TokenizeOptions {
  bool lemmatize = false;
};

/// Rule-based suffix stripper: -ing, -ed, -es, -s (not -ss). The stem must
/// keep at least three characters.
inline std::string strip_suffix(const std::string &token) {
  auto ends_with = [&](std::string_view suf) {
    return token.size() >= suf.size() + 3 &&
           token.compare(token.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with("ing"))
    return token.substr(0, token.size() - 3);
  if (ends_with("ed"))
    return token.substr(0, token.size() - 2);
  if (ends_with("es"))
    return token.substr(0, token.size() - 2);
  if (ends_with("s") && !ends_with("ss"))
    return token.substr(0, token.size() - 1);
  return token;
}

/// Lowercases ASCII, splits on whitespace and isolates every ASCII
/// punctuation character as its own token. Non-ASCII bytes are kept inside
/// words untouched.
inline TokenList tokenize(std::string_view text, const TokenizeOptions &opts = {}) {
  TokenList out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty())
      return;
    out.push_back(opts.lemmatize ? strip_suffix(cur) : cur);
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i)
      out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records

struct RawRecord {
  std::string app_id;
  std::string review;
  std::string response;
  std::string description;
};

struct TokenizedRecord {
  std::string app_id;
  TokenList review;
  TokenList response;
  TokenList description;
};

inline TokenizedRecord tokenize_record(const RawRecord &r, const TokenizeOptions &opts = {}) {
  return {r.app_id, tokenize(r.review, opts), tokenize(r.response, opts),
          tokenize(r.description, opts)};
}

namespace detail {
inline std::string string_field(const nlohmann::json &j, const char *key, bool required,
                                std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    if (required)
      throw DataError("line " + std::to_string(line) + ": missing key '" + key + "'");
    return {};
  }
  if (!it->is_string())
    throw DataError("line " + std::to_string(line) + ": key '" + key + "' is not a string");
  return it->get<std::string>();
}
} // namespace detail

inline RawRecord parse_record(const nlohmann::json &j, std::size_t line = 0) {
  if (!j.is_object())
    throw DataError("line " + std::to_string(line) + ": expected a JSON object");
  RawRecord r;
  r.app_id = detail::string_field(j, "app_id", false, line);
  r.review = detail::string_field(j, "review", true, line);
  r.response = detail::string_field(j, "response", false, line);
  r.description = detail::string_field(j, "description", false, line);
  return r;
}

/// Reads every non-blank line of a JSONL file as a JSON value.
inline std::vector<nlohmann::json> read_jsonl(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open " + path);
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception &e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_jsonl(const std::string &path, std::span<const nlohmann::json> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw DataError("cannot write " + path);
  for (const auto &r : rows)
    out << r.dump() << '\n';
}

inline std::vector<RawRecord> read_corpus(const std::string &path) {
  auto rows = read_jsonl(path);
  std::vector<RawRecord> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.push_back(parse_record(rows[i], i + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Closed token <-> id map. Ids 0..3 are PAD, UNK, SOS, EOS; corpus tokens
/// follow in descending frequency order with lexicographic tie-breaking.
class Vocabulary {
public:
  Vocabulary() { init_specials(); }

  /// Counts review and response tokens. Description and retrieved text are
  /// copy sources and do not compete for generation slots.
  static Vocabulary build(std::span<const TokenizedRecord> records,
                          std::size_t cap = kDefaultVocabCap, std::size_t min_freq = 1) {
    if (cap == 0)
      throw ConfigError("vocabulary cap must be at least 1");
    if (records.empty())
      throw DataError("cannot build a vocabulary from an empty corpus");
    std::unordered_map<std::string, std::size_t> freq;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto &r : records) {
      for (const TokenList *field : {&r.review, &r.response}) {
        for (const auto &t : *field) {
          ++freq[t];
          h = fnv1a64(t, h);
          h = fnv1a64(" ", h);
        }
        h = fnv1a64("\n", h);
      }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto &a, const auto &b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    v.cap_ = cap;
    v.min_freq_ = min_freq;
    v.corpus_hash_ = h;
    for (const auto &[tok, n] : ranked) {
      if (v.id_to_token_.size() - kNumSpecials >= cap || n < min_freq)
        break;
      v.add(tok);
    }
    return v;
  }

  static Vocabulary build(std::span<const RawRecord> records, std::size_t cap,
                          const TokenizeOptions &opts = {}) {
    std::vector<TokenizedRecord> tok;
    tok.reserve(records.size());
    for (const auto &r : records)
      tok.push_back(tokenize_record(r, opts));
    return build(std::span<const TokenizedRecord>(tok), cap);
  }

  /// Builds from an explicit token list (no frequency ranking).
  static Vocabulary from_tokens(std::span<const std::string> tokens, std::size_t cap,
                                std::uint64_t corpus_hash = 0, std::size_t min_freq = 1) {
    Vocabulary v;
    v.cap_ = cap;
    v.min_freq_ = min_freq;
    v.corpus_hash_ = corpus_hash;
    for (const auto &t : tokens) {
      if (v.token_to_id_.count(t))
        throw DataError("duplicate vocabulary token '" + t + "'");
      v.add(t);
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t cap() const { return cap_; }
  std::size_t min_freq() const { return min_freq_; }
  std::uint64_t corpus_hash() const { return corpus_hash_; }

  std::optional<TokenId> find(const std::string &token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end())
      return std::nullopt;
    return it->second;
  }
  bool contains(const std::string &token) const { return token_to_id_.count(token) > 0; }
  TokenId id_or_unk(const std::string &token) const { return find(token).value_or(kUnk); }

  const std::string &token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  /// Corpus tokens in id order (specials excluded).
  std::span<const std::string> corpus_tokens() const {
    return std::span<const std::string>(id_to_token_).subspan(kNumSpecials);
  }

  /// Fingerprint over the id -> token table.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto &t : id_to_token_) {
      h = fnv1a64(t, h);
      h = fnv1a64("\n", h);
    }
    return h;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "#rrcore-vocab cap=" << cap_ << " min_freq=" << min_freq_
       << " corpus_hash=" << hex64(corpus_hash_) << '\n';
    for (const auto &t : corpus_tokens())
      os << t << '\n';
    return os.str();
  }

  void save(const std::string &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw DataError("cannot write " + path);
    out << serialize();
  }

  static Vocabulary load(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw DataError("cannot open " + path);
    return read(in, path);
  }

  static Vocabulary deserialize(const std::string &text) {
    std::istringstream in(text);
    return read(in, "<vocabulary>");
  }

  static Vocabulary read(std::istream &in, const std::string &where) {
    std::string header;
    std::getline(in, header);
    std::istringstream hs(header);
    std::string magic;
    hs >> magic;
    if (magic != "#rrcore-vocab")
      throw DataError(where + ": not a vocabulary file");
    std::size_t cap = 0, min_freq = 1;
    std::uint64_t corpus_hash = 0;
    std::string kv;
    while (hs >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos)
        continue;
      auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "cap")
        cap = std::stoull(val);
      else if (key == "min_freq")
        min_freq = std::stoull(val);
      else if (key == "corpus_hash")
        corpus_hash = std::stoull(val, nullptr, 16);
    }
    TokenList tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r')
        line.pop_back();
      if (line.empty())
        throw DataError(where + ": empty token line");
      tokens.push_back(line);
    }
    return from_tokens(tokens, cap, corpus_hash, min_freq);
  }

  bool operator==(const Vocabulary &o) const {
    return id_to_token_ == o.id_to_token_ && cap_ == o.cap_ && corpus_hash_ == o.corpus_hash_;
  }

private:
  void init_specials() {
    id_to_token_ = {"<pad>", "<unk>", "<s>", "</s>"};
  }
  void add(const std::string &tok) {
    token_to_id_.emplace(tok, static_cast<TokenId>(id_to_token_.size()));
    id_to_token_.push_back(tok);
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::size_t cap_ = kDefaultVocabCap;
  std::size_t min_freq_ = 1;
  std::uint64_t corpus_hash_ = 0;
};

// ---------------------------------------------------------------------------
// Extended vocabulary

/// Example-local ids for source-side OOV tokens, dense from `base`
/// (the vocabulary size) upward.
class ExtendedVocabMap {
public:
  ExtendedVocabMap() = default;
  explicit ExtendedVocabMap(std::size_t base) : base_(base) {}

  TokenId add(const std::string &token) {
    auto [it, inserted] =
        ids_.emplace(token, static_cast<TokenId>(base_ + tokens_.size()));
    if (inserted)
      tokens_.push_back(token);
    return it->second;
  }
  std::optional<TokenId> find(const std::string &token) const {
    auto it = ids_.find(token);
    if (it == ids_.end())
      return std::nullopt;
    return it->second;
  }
  bool is_extended(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) >= base_ &&
           static_cast<std::size_t>(id) < base_ + tokens_.size();
  }
  const std::string &token(TokenId id) const {
    if (!is_extended(id))
      throw DataError("id " + std::to_string(id) + " is not an extended id");
    return tokens_[static_cast<std::size_t>(id) - base_];
  }
  std::size_t base() const { return base_; }
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  const TokenList &tokens() const { return tokens_; }

private:
  std::size_t base_ = 0;
  std::map<std::string, TokenId> ids_;
  TokenList tokens_;
};

// ---------------------------------------------------------------------------
// Encoding

enum class EncodeMode { train, infer };

struct EncodedExample {
  IdList review_ids;
  IdList response_ids; ///< EOS-terminated target; empty in inference mode
  IdList description_ids;
  std::vector<IdList> retrieved_ids; ///< exactly K slots, empty when padded
  ExtendedVocabMap ext_map;
  std::uint64_t vocab_hash = 0;
  std::size_t vocab_size = 0;

  // Surface forms after truncation; used for references and attention labels.
  TokenList review_tokens;
  TokenList response_tokens;
  TokenList description_tokens;

  /// Size of the extended output support |vocab| + |ext_map|.
  std::size_t extended_size() const { return vocab_size + ext_map.size(); }
  std::size_t k() const { return retrieved_ids.size(); }
};

/// Pads or truncates a retrieval list to exactly K entries.
inline std::vector<TokenList> pad_retrieved(std::span<const TokenList> retrieved, std::size_t k) {
  std::vector<TokenList> out(retrieved.begin(),
                             retrieved.begin() + static_cast<std::ptrdiff_t>(
                                                     std::min(k, retrieved.size())));
  out.resize(k);
  return out;
}

inline EncodedExample encode_example(const TokenizedRecord &record,
                                     std::span<const TokenList> retrieved,
                                     const Vocabulary &vocab,
                                     std::size_t max_len = kDefaultMaxLen,
                                     EncodeMode mode = EncodeMode::train) {
  if (max_len == 0)
    throw ConfigError("max_len must be at least 1");
  if (record.review.empty())
    throw DataError("review is empty after tokenization");
  if (mode == EncodeMode::train && record.response.empty())
    throw DataError("training record has an empty response");

  EncodedExample ex;
  ex.vocab_hash = vocab.hash();
  ex.vocab_size = vocab.size();
  ex.ext_map = ExtendedVocabMap(vocab.size());

  auto truncate = [&](const TokenList &t, std::size_t n) {
    return TokenList(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(n, t.size())));
  };
  auto encode_source = [&](const TokenList &tokens) {
    IdList ids;
    ids.reserve(tokens.size());
    for (const auto &t : tokens) {
      auto id = vocab.find(t);
      ids.push_back(id ? *id : ex.ext_map.add(t));
    }
    return ids;
  };

  ex.review_tokens = truncate(record.review, max_len);
  ex.description_tokens = truncate(record.description, max_len);
  ex.review_ids = encode_source(ex.review_tokens);
  ex.description_ids = encode_source(ex.description_tokens);
  ex.retrieved_ids.reserve(retrieved.size());
  for (const auto &r : retrieved)
    ex.retrieved_ids.push_back(encode_source(truncate(r, max_len)));

  if (!record.response.empty()) {
    ex.response_tokens = truncate(record.response, max_len - 1);
    for (const auto &t : ex.response_tokens) {
      if (auto id = vocab.find(t))
        ex.response_ids.push_back(*id);
      else
        ex.response_ids.push_back(ex.ext_map.find(t).value_or(kUnk));
    }
    ex.response_ids.push_back(kEos);
  }
  return ex;
}

/// Maps ids back to surface tokens through the vocabulary and the
/// example's extended map.
inline TokenList decode_ids(std::span<const TokenId> ids, const Vocabulary &vocab,
                            const ExtendedVocabMap &ext) {
  TokenList out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 0 && static_cast<std::size_t>(id) < vocab.size())
      out.push_back(vocab.token(id));
    else
      out.push_back(ext.token(id));
  }
  return out;
}

} // namespace rrcore
