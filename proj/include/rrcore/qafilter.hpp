// SPDX-License-Identifier: Apache-2.0
/**
 * @file   qafilter.hpp
 * @brief  Bad-response filter: tf-idf review features, random Fourier
 *         features for a Gaussian kernel, Pegasos hinge-loss SGD, and
 *         stratified k-fold cross-validation.
 *
 * Labels: bad = +1, not_bad = -1. The bias is an extra constant-1 feature.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"
#include "rrcore/retrieval.hpp"

namespace rrcore {

using DenseVector = std::vector<double>;

struct LabeledReview {
  TokenList review;
  bool bad = false;
};

/// Bad iff any annotator gave an accuracy score of 3 or lower.
inline bool label_from_scores(std::span<const int> scores) {
  if (scores.empty())
    throw DataError("accuracy_scores is empty");
  return std::any_of(scores.begin(), scores.end(), [](int s) { return s <= 3; });
}

/// Gold rows are {review, accuracy_scores: [int...]} or {review, label}.
inline std::vector<LabeledReview> read_gold(const std::string &path,
                                            const TokenizeOptions &opts = {}) {
  std::vector<LabeledReview> out;
  std::size_t line = 0;
  for (const auto &j : read_jsonl(path)) {
    ++line;
    auto where = path + ":" + std::to_string(line);
    if (!j.contains("review") || !j["review"].is_string())
      throw DataError(where + ": missing review");
    LabeledReview r;
    r.review = tokenize(j["review"].get<std::string>(), opts);
    if (j.contains("accuracy_scores")) {
      auto s = j["accuracy_scores"].get<std::vector<int>>();
      r.bad = label_from_scores(s);
    } else if (j.contains("label")) {
      auto l = j["label"].get<std::string>();
      if (l != "bad" && l != "not_bad")
        throw DataError(where + ": label must be bad or not_bad");
      r.bad = l == "bad";
    } else {
      throw DataError(where + ": needs accuracy_scores or label");
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Dense tf-idf rows through the shared retrieval vectorizer.
inline std::vector<DenseVector> featurize(std::span<const TokenList> reviews,
                                          const TfIdfIndex &index) {
  std::vector<DenseVector> out;
  out.reserve(reviews.size());
  for (const auto &r : reviews) {
    DenseVector d(index.num_terms(), 0.0);
    for (const auto &[id, w] : index.vectorize(r))
      d[id] = w;
    out.push_back(std::move(d));
  }
  return out;
}

inline double squared_distance(const DenseVector &a, const DenseVector &b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

/// 1 / (2 median^2) over pairwise distances; falls back to 1 when the
/// median distance is 0.
inline double median_bandwidth(std::span<const DenseVector> x) {
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j)
      d.push_back(std::sqrt(squared_distance(x[i], x[j])));
  if (d.empty())
    return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) {
    const double lo = *std::max_element(d.begin(), mid);
    med = 0.5 * (med + lo);
  }
  return med > 0.0 ? 1.0 / (2.0 * med * med) : 1.0;
}

/// z(x) = sqrt(2/D) cos(Omega x + beta) with Omega ~ N(0, 2 gamma),
/// beta ~ U[0, 2 pi); E[z(x).z(y)] = exp(-gamma |x - y|^2).
struct RffMap {
  std::size_t input_dim = 0;
  std::size_t D = 0;
  double gamma = 1.0;
  std::vector<double> omega; ///< D x input_dim
  std::vector<double> beta;  ///< D

  static RffMap make(std::size_t input_dim, std::size_t D, double gamma, std::uint64_t seed) {
    if (D == 0)
      throw ConfigError("random feature count must be at least 1");
    if (!(gamma > 0.0))
      throw ConfigError("kernel bandwidth must be positive");
    RffMap m{input_dim, D, gamma, {}, {}};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 * gamma));
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    m.omega.resize(D * input_dim);
    for (auto &w : m.omega)
      w = n(rng);
    m.beta.resize(D);
    for (auto &b : m.beta)
      b = u(rng);
    return m;
  }

  DenseVector operator()(const DenseVector &x) const {
    if (x.size() != input_dim)
      throw ShapeError("feature width " + std::to_string(x.size()) + " vs map input " +
                       std::to_string(input_dim));
    DenseVector z(D);
    const double s = std::sqrt(2.0 / static_cast<double>(D));
    for (std::size_t r = 0; r < D; ++r) {
      const double *row = omega.data() + r * input_dim;
      double a = beta[r];
      for (std::size_t c = 0; c < input_dim; ++c)
        a += row[c] * x[c];
      z[r] = s * std::cos(a);
    }
    return z;
  }
};

struct FilterConfig {
  std::size_t features = 1024; ///< D; 0 trains a linear SVM on the raw inputs
  double lambda = 1e-3;
  std::size_t epochs = 50;
  double gamma = 0.0; ///< 0 selects the median heuristic
  bool class_weights = true;
  std::uint64_t seed = 1;
};

struct FilterModel {
  bool kernel = true;
  RffMap map;
  DenseVector w; ///< last entry is the bias weight
  double weight_bad = 1.0;
  double weight_not_bad = 1.0;

  DenseVector transform(const DenseVector &x) const {
    DenseVector z = kernel ? map(x) : x;
    z.push_back(1.0);
    return z;
  }
  double decision(const DenseVector &x) const {
    auto z = transform(x);
    if (z.size() != w.size())
      throw ShapeError("filter input width mismatch");
    return std::inner_product(z.begin(), z.end(), w.begin(), 0.0);
  }
  /// True = bad. A score of exactly 0 is not_bad.
  bool predict(const DenseVector &x) const { return decision(x) > 0.0; }

  nlohmann::json to_json() const {
    return {{"kernel", kernel},
            {"input_dim", map.input_dim},
            {"D", map.D},
            {"gamma", map.gamma},
            {"omega", map.omega},
            {"beta", map.beta},
            {"w", w},
            {"weight_bad", weight_bad},
            {"weight_not_bad", weight_not_bad}};
  }
  static FilterModel from_json(const nlohmann::json &j) {
    FilterModel m;
    try {
      m.kernel = j.at("kernel").get<bool>();
      m.map.input_dim = j.at("input_dim").get<std::size_t>();
      m.map.D = j.at("D").get<std::size_t>();
      m.map.gamma = j.at("gamma").get<double>();
      m.map.omega = j.at("omega").get<std::vector<double>>();
      m.map.beta = j.at("beta").get<std::vector<double>>();
      m.w = j.at("w").get<DenseVector>();
      m.weight_bad = j.at("weight_bad").get<double>();
      m.weight_not_bad = j.at("weight_not_bad").get<double>();
    } catch (const nlohmann::json::exception &e) {
      throw DataError(std::string("malformed filter model: ") + e.what());
    }
    return m;
  }
};

/// lambda/2 |w|^2 + mean_i c_i max(0, 1 - y_i w.z_i)
inline double svm_objective(const FilterModel &m, std::span<const DenseVector> z,
                            std::span<const int> y, double lambda) {
  double reg = 0.0;
  for (double v : m.w)
    reg += v * v;
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double s = std::inner_product(z[i].begin(), z[i].end(), m.w.begin(), 0.0);
    const double c = y[i] > 0 ? m.weight_bad : m.weight_not_bad;
    loss += c * std::max(0.0, 1.0 - y[i] * s);
  }
  return 0.5 * lambda * reg + loss / static_cast<double>(z.size());
}

/// Pegasos: per-example steps of size 1/(lambda t) over shuffled epochs.
inline FilterModel train_svm_sgd(std::span<const DenseVector> x, std::span<const std::uint8_t> bad,
                                 const FilterConfig &cfg,
                                 std::vector<double> *objective_trace = nullptr) {
  if (x.empty() || x.size() != bad.size())
    throw DataError("filter training needs one label per feature row");
  const std::size_t n_bad = static_cast<std::size_t>(
      std::count_if(bad.begin(), bad.end(), [](std::uint8_t b) { return b != 0; }));
  if (n_bad == 0 || n_bad == x.size())
    throw DataError("filter training needs both bad and not_bad examples");
  if (!(cfg.lambda > 0.0) || cfg.epochs == 0)
    throw ConfigError("lambda must be positive and epochs at least 1");

  FilterModel m;
  m.kernel = cfg.features > 0;
  if (m.kernel) {
    const double g = cfg.gamma > 0.0 ? cfg.gamma : median_bandwidth(x);
    m.map = RffMap::make(x[0].size(), cfg.features, g, cfg.seed);
  }
  const double n = static_cast<double>(x.size());
  if (cfg.class_weights) {
    m.weight_bad = n / (2.0 * static_cast<double>(n_bad));
    m.weight_not_bad = n / (2.0 * static_cast<double>(x.size() - n_bad));
  }
  std::vector<DenseVector> z;
  std::vector<int> y;
  z.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    z.push_back(m.transform(x[i]));
    y.push_back(bad[i] ? 1 : -1);
  }
  m.w.assign(z[0].size(), 0.0);
  if (objective_trace)
    objective_trace->push_back(svm_objective(m, z, y, cfg.lambda));

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t t = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      ++t;
      const double eta = 1.0 / (cfg.lambda * static_cast<double>(t));
      const double margin = y[i] * std::inner_product(z[i].begin(), z[i].end(), m.w.begin(), 0.0);
      const double shrink = 1.0 - eta * cfg.lambda;
      for (auto &v : m.w)
        v *= shrink;
      if (margin < 1.0) {
        const double c = (y[i] > 0 ? m.weight_bad : m.weight_not_bad) * eta * y[i];
        for (std::size_t j = 0; j < m.w.size(); ++j)
          m.w[j] += c * z[i][j];
      }
    }
    if (objective_trace)
      objective_trace->push_back(svm_objective(m, z, y, cfg.lambda));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cross-validation

/// Each class is shuffled, then the classes are dealt round-robin onto the
/// folds with one running counter, so every fold's per-class count differs
/// by at most one and fold sizes stay balanced overall.
inline std::vector<std::size_t> stratified_kfold(std::span<const std::uint8_t> bad, std::size_t k,
                                                 std::uint64_t seed) {
  if (k < 2)
    throw ConfigError("k-fold cross-validation needs k >= 2");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold(bad.size(), 0);
  std::size_t next = 0;
  for (std::uint8_t cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < bad.size(); ++i)
      if ((bad[i] != 0) == (cls != 0))
        idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx)
      fold[i] = next++ % k;
  }
  return fold;
}

struct ConfusionMatrix {
  std::size_t tn = 0;     ///< predicted not_bad, actually not_bad
  std::size_t fn_bad = 0; ///< predicted not_bad, actually bad
  std::size_t fp = 0;     ///< predicted bad, actually not_bad
  std::size_t tp = 0;     ///< predicted bad, actually bad

  std::size_t total() const { return tn + fn_bad + fp + tp; }
  void add(bool predicted_bad, bool actual_bad) {
    if (predicted_bad)
      ++(actual_bad ? tp : fp);
    else
      ++(actual_bad ? fn_bad : tn);
  }
};

struct FilterMetrics {
  double not_bad_precision = 0.0; ///< tn / (tn + fn_bad)
  double not_bad_recall = 0.0;    ///< tn / (tn + fp)
  double bad_precision = 0.0;     ///< tp / (tp + fp)
  double bad_recall = 0.0;        ///< tp / (tp + fn_bad)
  double bad_reduction = 0.0;     ///< same as bad_recall
  double accuracy = 0.0;
};

inline FilterMetrics filter_metrics(const ConfusionMatrix &c) {
  auto ratio = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  FilterMetrics m;
  m.not_bad_precision = ratio(c.tn, c.tn + c.fn_bad);
  m.not_bad_recall = ratio(c.tn, c.tn + c.fp);
  m.bad_precision = ratio(c.tp, c.tp + c.fp);
  m.bad_recall = ratio(c.tp, c.tp + c.fn_bad);
  m.bad_reduction = m.bad_recall;
  m.accuracy = ratio(c.tn + c.tp, c.total());
  return m;
}

inline nlohmann::json filter_report_json(const ConfusionMatrix &c) {
  auto m = filter_metrics(c);
  return {{"confusion", {{"tn", c.tn}, {"fn_bad", c.fn_bad}, {"fp", c.fp}, {"tp", c.tp}}},
          {"precision", m.not_bad_precision},
          {"recall", m.not_bad_recall},
          {"bad_reduction", m.bad_reduction},
          {"accuracy", m.accuracy},
          {"not_bad", {{"precision", m.not_bad_precision}, {"recall", m.not_bad_recall}}},
          {"bad", {{"precision", m.bad_precision}, {"recall", m.bad_recall}}}};
}

struct CvResult {
  ConfusionMatrix confusion;
  std::vector<std::size_t> folds;
  std::vector<std::uint8_t> predicted_bad;
};

/// k-fold CV over dense features: train on k-1 folds, predict the held-out
/// fold, aggregate one confusion matrix.
inline CvResult cross_validate_features(std::span<const DenseVector> x, std::span<const std::uint8_t> bad,
                                        std::size_t k, const FilterConfig &cfg) {
  CvResult r;
  r.folds = stratified_kfold(bad, k, cfg.seed);
  r.predicted_bad.assign(x.size(), false);
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<DenseVector> tx;
    std::vector<std::uint8_t> ty;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (r.folds[i] != f) {
        tx.push_back(x[i]);
        ty.push_back(bad[i]);
      }
    if (tx.size() == x.size())
      continue;
    auto m = train_svm_sgd(tx, ty, cfg);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (r.folds[i] == f)
        r.predicted_bad[i] = m.predict(x[i]);
  }
  for (std::size_t i = 0; i < x.size(); ++i)
    r.confusion.add(r.predicted_bad[i] != 0, bad[i] != 0);
  return r;
}

/// Gold-set CV; the tf-idf index is built over all gold reviews.
inline CvResult cross_validate(std::span<const LabeledReview> gold, std::size_t k,
                               const FilterConfig &cfg) {
  std::vector<TokenList> reviews;
  std::vector<std::uint8_t> labels;
  for (const auto &g : gold) {
    reviews.push_back(g.review);
    labels.push_back(g.bad);
  }
  auto index = TfIdfIndex::build(reviews);
  auto x = featurize(reviews, index);
  return cross_validate_features(x, labels, k, cfg);
}

} // namespace rrcore
