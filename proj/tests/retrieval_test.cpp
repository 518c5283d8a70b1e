// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "rrcore/retrieval.hpp"

using namespace rrcore;

namespace {

/// Dense brute-force tf-idf written independently of the index.
struct DenseOracle {
  std::vector<std::string> terms;
  std::vector<double> idf;
  std::vector<std::vector<double>> docs;

  explicit DenseOracle(const std::vector<TokenList> &corpus) {
    std::set<std::string> all;
    for (const auto &d : corpus)
      all.insert(d.begin(), d.end());
    terms.assign(all.begin(), all.end());
    const double N = static_cast<double>(corpus.size());
    for (const auto &t : terms) {
      double df = 0;
      for (const auto &d : corpus)
        df += std::find(d.begin(), d.end(), t) != d.end() ? 1 : 0;
      idf.push_back(std::log((1 + N) / (1 + df)) + 1);
    }
    for (const auto &d : corpus)
      docs.push_back(vec(d));
  }
  std::vector<double> vec(const TokenList &toks) const {
    std::vector<double> v(terms.size(), 0.0);
    for (std::size_t i = 0; i < terms.size(); ++i)
      v[i] = static_cast<double>(std::count(toks.begin(), toks.end(), terms[i])) * idf[i];
    double n = 0;
    for (double x : v)
      n += x * x;
    n = std::sqrt(n);
    if (n > 0)
      for (double &x : v)
        x /= n;
    return v;
  }
  std::vector<std::size_t> rank(const TokenList &q, std::optional<std::size_t> exclude) const {
    auto qv = vec(q);
    std::vector<std::pair<double, std::size_t>> s;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (exclude && *exclude == i)
        continue;
      double d = 0;
      for (std::size_t j = 0; j < qv.size(); ++j)
        d += qv[j] * docs[i][j];
      s.push_back({d, i});
    }
    // Full sort: score descending, index ascending.
    std::sort(s.begin(), s.end(), [](auto &a, auto &b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<std::size_t> out;
    for (auto &p : s)
      out.push_back(p.second);
    return out;
  }
};

std::vector<TokenList> random_docs(std::mt19937 &rng, std::size_t n, std::size_t vocab,
                                   std::size_t max_len) {
  std::vector<TokenList> out(n);
  for (auto &d : out) {
    std::size_t len = 1 + rng() % max_len;
    for (std::size_t i = 0; i < len; ++i)
      d.push_back("t" + std::to_string(rng() % vocab));
  }
  return out;
}

} // namespace

TEST(TfIdf, SingleDocumentIdfIsOne) {
  std::vector<TokenList> c = {{"a", "b", "a"}};
  auto idx = TfIdfIndex::build(c);
  EXPECT_DOUBLE_EQ(idx.idf("a"), 1.0);
  EXPECT_DOUBLE_EQ(idx.idf("b"), 1.0);
}

TEST(TfIdf, UnseenTokenWeight) {
  std::vector<TokenList> c = {{"a"}, {"b"}, {"a", "c"}};
  auto idx = TfIdfIndex::build(c);
  EXPECT_NEAR(idx.idf("zzz"), std::log(4.0) + 1.0, 1e-15);
  for (const auto &t : idx.terms())
    EXPECT_GE(idx.idf(t), 0.0);
}

TEST(TfIdf, DuplicateDocsIdenticalVectors) {
  std::vector<TokenList> c = {{"x", "y"}, {"x", "y"}, {"z"}};
  auto idx = TfIdfIndex::build(c);
  EXPECT_EQ(idx.doc_vector(0), idx.doc_vector(1));
}

TEST(TfIdf, VectorizeOracle) {
  std::vector<TokenList> c = {{"a", "b"}, {"a", "c"}, {"c", "d"}};
  auto idx = TfIdfIndex::build(c);
  // Hand arithmetic: N = 3, df(a) = 1+1 = 2, df(b) = 1.
  const double ia = std::log(4.0 / 3.0) + 1, ib = std::log(4.0 / 2.0) + 1;
  const double n = std::sqrt(ia * ia + ib * ib);
  TokenList q = {"a", "b"};
  auto v = idx.vectorize(q);
  ASSERT_EQ(v.size(), 2u);
  EXPECT_NEAR(v[0].second, ia / n, 1e-12);
  EXPECT_NEAR(v[1].second, ib / n, 1e-12);
  EXPECT_TRUE(idx.vectorize(TokenList{}).empty());
  EXPECT_TRUE(idx.vectorize(TokenList{"nope"}).empty());
}

TEST(TfIdf, RepeatedTokenDoublesTf) {
  std::vector<TokenList> c = {{"a", "b"}, {"b", "c"}, {"c"}};
  auto idx = TfIdfIndex::build(c);
  auto once = idx.vectorize(TokenList{"a", "b"});
  auto twice = idx.vectorize(TokenList{"a", "a", "b"});
  const double r1 = once[0].second / once[1].second, r2 = twice[0].second / twice[1].second;
  EXPECT_NEAR(r2, 2 * r1, 1e-12);
}

TEST(Cosine, Examples) {
  SparseVector a = {{0, 1 / std::sqrt(2.0)}, {1, 1 / std::sqrt(2.0)}}, b = {{0, 1.0}};
  EXPECT_NEAR(cosine(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine(a, b), 0.70710678118654752, 1e-15);
  EXPECT_DOUBLE_EQ(cosine(b, SparseVector{{2, 1.0}}), 0.0);
  EXPECT_DOUBLE_EQ(cosine(SparseVector{}, a), 0.0);
}

TEST(TopK, SelfMatchFirstAndShortCorpus) {
  std::vector<TokenList> c = {{"a", "b"}, {"c"}, {"d", "e"}, {"x", "y", "z"}};
  auto idx = TfIdfIndex::build(c);
  auto r = idx.top_k(c[3], 2);
  EXPECT_EQ(r[0].doc, 3u);
  EXPECT_NEAR(r[0].score, 1.0, 1e-12);
  EXPECT_EQ(idx.top_k(c[0], 10).size(), 4u);
  auto ex = idx.top_k(c[0], 10, 0);
  EXPECT_EQ(ex.size(), 3u);
  for (const auto &h : ex)
    EXPECT_NE(h.doc, 0u);
}

TEST(TopK, Errors) {
  TfIdfIndex empty;
  EXPECT_THROW(empty.top_k(TokenList{"a"}, 1), DataError);
  std::vector<TokenList> none;
  EXPECT_THROW(TfIdfIndex::build(none), DataError);
  std::vector<TokenList> c = {{"a"}};
  EXPECT_THROW(TfIdfIndex::build(c).top_k(TokenList{"a"}, 0), ConfigError);
}

TEST(TopK, TiesGoToLowerIndex) {
  std::vector<TokenList> c = {{"q"}, {"a"}, {"a"}, {"a"}};
  auto idx = TfIdfIndex::build(c);
  auto r = idx.top_k(TokenList{"a"}, 3);
  EXPECT_EQ(r[0].doc, 1u);
  EXPECT_EQ(r[1].doc, 2u);
  EXPECT_EQ(r[2].doc, 3u);
  auto z = idx.top_k(TokenList{"none"}, 2);
  EXPECT_EQ(z[0].doc, 0u);
  EXPECT_EQ(z[1].doc, 1u);
}

TEST(TopKProperty, MatchesBruteForce) {
  std::mt19937 rng(17);
  auto docs = random_docs(rng, 200, 30, 8);
  auto idx = TfIdfIndex::build(docs);
  DenseOracle oracle(docs);
  for (int q = 0; q < 50; ++q) {
    auto query = random_docs(rng, 1, 35, 6)[0];
    const std::size_t k = 1 + rng() % 10;
    std::optional<std::size_t> ex;
    if (q % 3 == 0)
      ex = rng() % docs.size();
    auto got = idx.top_k(query, k, ex);
    auto want = oracle.rank(query, ex);
    ASSERT_EQ(got.size(), k);
    for (std::size_t i = 0; i < k; ++i)
      EXPECT_EQ(got[i].doc, want[i]) << "query " << q << " rank " << i;
    for (std::size_t i = 1; i < got.size(); ++i)
      EXPECT_GE(got[i - 1].score, got[i].score);
  }
}

TEST(TfIdfProperty, UnitNormOrZero) {
  std::mt19937 rng(23);
  auto docs = random_docs(rng, 100, 20, 10);
  auto idx = TfIdfIndex::build(docs);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    double n = l2_norm(idx.doc_vector(i));
    EXPECT_TRUE(std::abs(n - 1.0) < 1e-9 || n == 0.0);
  }
}

TEST(TfIdfProperty, ScalingCountsKeepsVector) {
  std::mt19937 rng(29);
  auto docs = random_docs(rng, 40, 15, 6);
  auto idx = TfIdfIndex::build(docs);
  for (const auto &d : docs) {
    TokenList tripled;
    for (int r = 0; r < 3; ++r)
      tripled.insert(tripled.end(), d.begin(), d.end());
    auto a = idx.vectorize(d), b = idx.vectorize(tripled);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      EXPECT_NEAR(a[i].second, b[i].second, 1e-12);
  }
}

TEST(TfIdf, SaveLoadRoundTrip) {
  std::mt19937 rng(31);
  auto docs = random_docs(rng, 30, 12, 6);
  std::vector<DocMeta> meta;
  for (std::size_t i = 0; i < docs.size(); ++i)
    meta.push_back({"r" + std::to_string(i), {"resp", std::to_string(i)}});
  auto idx = TfIdfIndex::build(docs, meta);
  auto dir = std::filesystem::temp_directory_path() / "rrcore_retrieval_test";
  std::filesystem::create_directories(dir);
  auto stem = (dir / "idx").string();
  idx.save(stem);
  auto back = TfIdfIndex::load(stem);
  EXPECT_EQ(back.num_docs(), idx.num_docs());
  EXPECT_EQ(back.terms(), idx.terms());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(back.doc_vector(i), idx.doc_vector(i));
    EXPECT_EQ(back.doc_meta(i).response, meta[i].response);
  }
  auto q = docs[3];
  auto a = idx.top_k(q, 5), b = back.top_k(q, 5);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(a[i].doc, b[i].doc);
  EXPECT_THROW(TfIdfIndex::load((dir / "missing").string()), DataError);
}
