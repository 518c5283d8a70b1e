// SPDX-License-Identifier: Apache-2.0
/**
 * @file   retrieval.hpp
 * @brief  Unigram tf-idf index with cosine top-K search.
 *
 * tf is the raw count, idf(t) = ln((1 + N) / (1 + df(t))) + 1, and every
 * document vector is L2-normalized. Term ids follow lexicographic token
 * order so vectors are reproducible across runs.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"

namespace rrcore {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

/// Sparse vector of (term id, weight), sorted by term id, no duplicates.
using SparseVector = std::vector<std::pair<std::uint32_t, double>>;

inline double dot(const SparseVector &a, const SparseVector &b) {
  double s = 0.0;
  auto ia = a.begin(), ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->first < ib->first)
      ++ia;
    else if (ib->first < ia->first)
      ++ib;
    else {
      s += ia->second * ib->second;
      ++ia;
      ++ib;
    }
  }
  return s;
}

inline double l2_norm(const SparseVector &v) {
  double s = 0.0;
  for (const auto &[_, w] : v)
    s += w * w;
  return std::sqrt(s);
}

/// Cosine similarity; 0 when either side is the zero vector.
inline double cosine(const SparseVector &a, const SparseVector &b) {
  double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0)
    return 0.0;
  return dot(a, b) / (na * nb);
}

struct DocMeta {
  std::string review_id;
  TokenList response;
};

struct RetrievalHit {
  std::size_t doc = 0;
  double score = 0.0;
};

using RetrievalResult = std::vector<RetrievalHit>;

class TfIdfIndex {
public:
  static constexpr int kFormatVersion = 1;

  TfIdfIndex() = default;

  /// Indexes `reviews`. `meta`, when given, must be parallel to `reviews`.
  static TfIdfIndex build(std::span<const TokenList> reviews, std::vector<DocMeta> meta = {}) {
    if (reviews.empty())
      throw DataError("cannot index an empty collection");
    if (!meta.empty() && meta.size() != reviews.size())
      throw DataError("document metadata is not parallel to the reviews");
    TfIdfIndex idx;
    idx.num_docs_ = reviews.size();
    std::map<std::string, std::size_t> df;
    for (const auto &doc : reviews) {
      std::vector<std::string> uniq(doc.begin(), doc.end());
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      for (const auto &t : uniq)
        ++df[t];
    }
    idx.terms_.reserve(df.size());
    idx.df_.reserve(df.size());
    for (const auto &[t, n] : df) {
      idx.term_ids_.emplace(t, static_cast<std::uint32_t>(idx.terms_.size()));
      idx.terms_.push_back(t);
      idx.df_.push_back(n);
      idx.idf_.push_back(idx.smoothed_idf(n));
    }
    idx.vectors_.reserve(reviews.size());
    for (const auto &doc : reviews)
      idx.vectors_.push_back(idx.vectorize(doc));
    idx.meta_ = std::move(meta);
    if (idx.meta_.empty())
      idx.meta_.resize(reviews.size());
    return idx;
  }

  std::size_t num_docs() const { return num_docs_; }
  std::size_t num_terms() const { return terms_.size(); }
  const std::vector<std::string> &terms() const { return terms_; }
  const SparseVector &doc_vector(std::size_t i) const { return vectors_.at(i); }
  const DocMeta &doc_meta(std::size_t i) const { return meta_.at(i); }

  std::optional<std::uint32_t> term_id(const std::string &t) const {
    auto it = term_ids_.find(t);
    if (it == term_ids_.end())
      return std::nullopt;
    return it->second;
  }

  /// Smoothed idf; tokens never seen get ln(1 + N) + 1.
  double idf(const std::string &token) const {
    auto id = term_id(token);
    return id ? idf_[*id] : smoothed_idf(0);
  }

  /// tf-idf vector over the indexed terms, L2-normalized. Tokens outside the
  /// index have no dimension and are dropped; all-unknown input gives the
  /// zero vector.
  SparseVector vectorize(std::span<const std::string> tokens) const {
    std::map<std::uint32_t, double> counts;
    for (const auto &t : tokens)
      if (auto id = term_id(t))
        counts[*id] += 1.0;
    SparseVector v;
    v.reserve(counts.size());
    for (const auto &[id, tf] : counts)
      v.emplace_back(id, tf * idf_[id]);
    double n = l2_norm(v);
    if (n > 0.0)
      for (auto &[_, w] : v)
        w /= n;
    return v;
  }

  /// Top-k documents by cosine similarity, ties broken by lower index.
  RetrievalResult top_k(const SparseVector &query, std::size_t k,
                        std::optional<std::size_t> exclude = std::nullopt) const {
    if (num_docs_ == 0)
      throw DataError("retrieval over an empty index");
    if (k == 0)
      throw ConfigError("k must be at least 1");
    RetrievalResult all;
    all.reserve(num_docs_);
    for (std::size_t i = 0; i < num_docs_; ++i) {
      if (exclude && *exclude == i)
        continue;
      all.push_back({i, dot(query, vectors_[i])});
    }
    auto better = [](const RetrievalHit &a, const RetrievalHit &b) {
      return a.score != b.score ? a.score > b.score : a.doc < b.doc;
    };
    std::size_t n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      better);
    all.resize(n);
    return all;
  }

  RetrievalResult top_k(std::span<const std::string> query, std::size_t k,
                        std::optional<std::size_t> exclude = std::nullopt) const {
    return top_k(vectorize(query), k, exclude);
  }

  /// Writes `<stem>.json` (manifest) and `<stem>.bin` (vector entries).
  void save(const std::string &stem) const {
    nlohmann::json m;
    m["format"] = "rrcore-tfidf";
    m["version"] = kFormatVersion;
    m["num_docs"] = num_docs_;
    auto &terms = m["terms"] = nlohmann::json::array();
    for (std::size_t i = 0; i < terms_.size(); ++i)
      terms.push_back({terms_[i], df_[i], idf_[i]});
    auto &meta = m["doc_meta"] = nlohmann::json::array();
    for (const auto &d : meta_)
      meta.push_back({{"review_id", d.review_id}, {"response", d.response}});
    m["vectors"] = base_name(stem) + ".bin";
    std::ofstream js(stem + ".json", std::ios::binary);
    if (!js)
      throw DataError("cannot write " + stem + ".json");
    js << m.dump() << '\n';

    std::ofstream bin(stem + ".bin", std::ios::binary);
    if (!bin)
      throw DataError("cannot write " + stem + ".bin");
    bin.write("RRTFIDF1", 8);
    put(bin, static_cast<std::uint64_t>(num_docs_));
    for (const auto &v : vectors_) {
      put(bin, static_cast<std::uint32_t>(v.size()));
      for (const auto &[id, w] : v) {
        put(bin, id);
        put(bin, w);
      }
    }
  }

  static TfIdfIndex load(const std::string &stem) {
    std::ifstream js(stem + ".json", std::ios::binary);
    if (!js)
      throw DataError("cannot open " + stem + ".json");
    nlohmann::json m;
    try {
      js >> m;
    } catch (const nlohmann::json::exception &e) {
      throw DataError(stem + ".json: " + e.what());
    }
    if (m.value("format", "") != "rrcore-tfidf" || m.value("version", 0) != kFormatVersion)
      throw DataError(stem + ".json: unsupported index format");
    TfIdfIndex idx;
    idx.num_docs_ = m.at("num_docs").get<std::size_t>();
    for (const auto &t : m.at("terms")) {
      idx.term_ids_.emplace(t[0].get<std::string>(), static_cast<std::uint32_t>(idx.terms_.size()));
      idx.terms_.push_back(t[0].get<std::string>());
      idx.df_.push_back(t[1].get<std::size_t>());
      idx.idf_.push_back(t[2].get<double>());
    }
    for (const auto &d : m.at("doc_meta"))
      idx.meta_.push_back({d.at("review_id").get<std::string>(),
                           d.at("response").get<TokenList>()});

    std::ifstream bin(stem + ".bin", std::ios::binary);
    if (!bin)
      throw DataError("cannot open " + stem + ".bin");
    char magic[8];
    bin.read(magic, 8);
    if (!bin || std::memcmp(magic, "RRTFIDF1", 8) != 0)
      throw DataError(stem + ".bin: bad magic");
    auto n = get<std::uint64_t>(bin);
    if (n != idx.num_docs_ || idx.meta_.size() != n)
      throw DataError(stem + ": manifest and vector file disagree on document count");
    idx.vectors_.resize(n);
    for (auto &v : idx.vectors_) {
      auto nnz = get<std::uint32_t>(bin);
      v.resize(nnz);
      for (auto &[id, w] : v) {
        id = get<std::uint32_t>(bin);
        w = get<double>(bin);
        if (id >= idx.terms_.size())
          throw DataError(stem + ".bin: term id out of range");
      }
    }
    if (!bin)
      throw DataError(stem + ".bin: truncated");
    return idx;
  }

private:
  double smoothed_idf(std::size_t df) const {
    return std::log((1.0 + static_cast<double>(num_docs_)) / (1.0 + static_cast<double>(df))) +
           1.0;
  }

  static std::string base_name(const std::string &p) {
    auto slash = p.find_last_of('/');
    return slash == std::string::npos ? p : p.substr(slash + 1);
  }
  template <class T> static void put(std::ostream &os, T v) {
    os.write(reinterpret_cast<const char *>(&v), sizeof(T));
  }
  template <class T> static T get(std::istream &is) {
    T v{};
    is.read(reinterpret_cast<char *>(&v), sizeof(T));
    return v;
  }

  std::size_t num_docs_ = 0;
  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::uint32_t> term_ids_;
  std::vector<std::size_t> df_;
  std::vector<double> idf_;
  std::vector<SparseVector> vectors_;
  std::vector<DocMeta> meta_;
};

} // namespace rrcore
