// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "rrcore/pipeline.hpp"
#include "rrcore/training.hpp"

using namespace rrcore;

namespace {

std::string tmp_dir(const std::string &name) {
  auto d = std::filesystem::temp_directory_path() / "rrcore_training_test" / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d.string();
}

struct SmallData {
  PreparedCorpus pc;
  std::vector<EncodedExample> train, valid;
};

SmallData small_data(std::size_t n = 60, std::size_t k = 2) {
  SmallData d;
  auto raw = synth_corpus(n, 3);
  d.pc = preprocess(raw, {});
  d.train = encode_split(d.pc.train, d.pc.vocab, k, 40);
  d.valid = encode_split(d.pc.valid, d.pc.vocab, k, 40);
  return d;
}

TrainConfig small_config() {
  TrainConfig c;
  c.hidden_units = 8;
  c.emb_dim = 8;
  c.K = 2;
  c.batch_size = 4;
  c.epochs = 1;
  c.max_steps = 10;
  c.checkpoint_every = 5;
  c.decode_max_len = 12;
  c.dropout = 0.0;
  c.learning_rate = 0.01;
  return c;
}

} // namespace

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p({1, 3}, {1.0, -2.0, 0.5}, true);
  p.mutable_grad()[0] = 0.3;
  p.mutable_grad()[1] = -7.0;
  p.mutable_grad()[2] = 1e-3;
  std::vector<Tensor<double>> ps = {p};
  AdamState st;
  adam_step(std::span<Tensor<double>>(ps), st, 1e-3);
  // Bias correction makes the first step lr * g / (|g| + eps).
  EXPECT_NEAR(p.values()[0], 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), 1e-12);
  EXPECT_NEAR(p.values()[1], -2.0 + 1e-3 * 7.0 / (7.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p.values()[2], 0.5 - 1e-3 * 1e-3 / (1e-3 + 1e-8), 1e-12);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, SecondStepMatchesHandRecurrence) {
  Tensor<double> p({1, 1}, std::vector<double>{0.0}, true);
  std::vector<Tensor<double>> ps = {p};
  AdamState st;
  p.mutable_grad()[0] = 1.0;
  adam_step(std::span<Tensor<double>>(ps), st, 0.1);
  p.mutable_grad()[0] = -0.5;
  adam_step(std::span<Tensor<double>>(ps), st, 0.1);
  const double m1 = 0.1, v1 = 0.001;
  const double m2 = 0.9 * m1 + 0.1 * -0.5, v2 = 0.999 * v1 + 0.001 * 0.25;
  const double mh = m2 / (1 - 0.81), vh = v2 / (1 - 0.999 * 0.999);
  const double want = -0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p.values()[0], want, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({2, 2}, {1, 2, 3, 4}, true);
  std::vector<Tensor<double>> ps = {p};
  AdamState st;
  adam_step(std::span<Tensor<double>>(ps), st, 1e-3);
  EXPECT_EQ(p.values()[3], 4.0);
}

TEST(Adam, NonFiniteGradientRaisesBeforeUpdate) {
  Tensor<double> a({1, 2}, {1, 2}, true), b({1, 1}, std::vector<double>{3}, true);
  a.mutable_grad()[0] = 1.0;
  b.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Tensor<double>> ps = {a, b};
  AdamState st;
  EXPECT_THROW(adam_step(std::span<Tensor<double>>(ps), st, 1e-3), NumericError);
  EXPECT_EQ(a.values()[0], 1.0);
  EXPECT_EQ(st.step, 0u);
  b.mutable_grad()[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(adam_step(std::span<Tensor<double>>(ps), st, 1e-3), NumericError);
}

TEST(Clip, RescalesJointNorm) {
  Tensor<double> a({1, 1}, std::vector<double>{0}, true), b({1, 1}, std::vector<double>{0}, true);
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  std::vector<Tensor<double>> ps = {a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(std::span<Tensor<double>>(ps), 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(global_grad_norm(std::span<Tensor<double>>(ps)), 1.0, 1e-15);
  clip_grad_norm(std::span<Tensor<double>>(ps), 10.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsAndJsonRoundTrip) {
  TrainConfig c;
  EXPECT_EQ(c.hidden_units, 200u);
  EXPECT_EQ(c.emb_dim, 100u);
  EXPECT_EQ(c.K, 4u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_DOUBLE_EQ(c.dropout, 0.1);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-3);
  c.hidden_units = 17;
  c.ablation = Ablation::no_description();
  auto back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(TrainConfig::from_json({{"hiden_units", 3}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"hidden_units", "big"}}), ConfigError);
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(TrainConfig::from_json({{"ablation", "no-everything"}}), ConfigError);
  auto c = TrainConfig::from_json({{"K", 0}});
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig::from_json({{"dropout", 1.0}});
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig::from_json({{"learning_rate", 0.0}});
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsExact) {
  auto v = Vocabulary::from_tokens(std::vector<std::string>{"a", "b", "c"}, 10);
  auto p = ModelParams<double>::init({v.size(), 3, 4, 2, 0.1}, 5);
  auto dir = tmp_dir("ck");
  TrainConfig cfg;
  cfg.hidden_units = 4;
  save_checkpoint(dir + "/x.rrck", p, v, {cfg, 42, 12.5, {{"val_bleu4", 12.5}}});
  auto ck = load_checkpoint<double>(dir + "/x.rrck");
  EXPECT_EQ(ck.vocab, v);
  EXPECT_EQ(ck.info.step, 42u);
  EXPECT_DOUBLE_EQ(ck.info.best_bleu, 12.5);
  EXPECT_EQ(ck.info.config.hidden_units, 4u);
  EXPECT_EQ(ck.params.config.layers, 2u);
  auto a = p.named(), b = ck.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(std::equal(a[i].second->values().begin(), a[i].second->values().end(),
                           b[i].second->values().begin()));
  }
}

TEST(Checkpoint, CrossPrecision) {
  auto v = Vocabulary::from_tokens(std::vector<std::string>{"a"}, 10);
  auto p = ModelParams<float>::init({v.size(), 2, 2, 1, 0.0}, 1);
  auto dir = tmp_dir("cross");
  save_checkpoint(dir + "/f.rrck", p, v, {});
  auto d = load_checkpoint<double>(dir + "/f.rrck");
  EXPECT_EQ(d.params.embedding(4, 1), static_cast<double>(p.embedding(4, 1)));
}

TEST(Checkpoint, CorruptFilesRaiseDataError) {
  auto dir = tmp_dir("bad");
  EXPECT_THROW(load_checkpoint<double>(dir + "/missing.rrck"), DataError);
  {
    std::ofstream o(dir + "/junk.rrck", std::ios::binary);
    o << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint<double>(dir + "/junk.rrck"), DataError);
  auto v = Vocabulary::from_tokens(std::vector<std::string>{"a"}, 10);
  auto p = ModelParams<double>::init({v.size(), 2, 2, 1, 0.0}, 1);
  save_checkpoint(dir + "/t.rrck", p, v, {});
  std::filesystem::resize_file(dir + "/t.rrck", std::filesystem::file_size(dir + "/t.rrck") - 8);
  EXPECT_THROW(load_checkpoint<double>(dir + "/t.rrck"), DataError);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, LossDecreasesOverTenSteps) {
  auto d = small_data();
  auto c = small_config();
  c.batch_size = 8;
  c.epochs = 3;
  auto res = train<double>(c, d.pc.vocab, d.train, d.valid, {"", false, false, {}});
  ASSERT_EQ(res.losses.size(), 10u);
  const double first = (res.losses[0] + res.losses[1] + res.losses[2]) / 3;
  const double last = (res.losses[7] + res.losses[8] + res.losses[9]) / 3;
  EXPECT_LT(last, first);
}

TEST(Train, SeededRunsAreIdentical) {
  auto d = small_data();
  auto c = small_config();
  auto a = train<double>(c, d.pc.vocab, d.train, d.valid);
  auto b = train<double>(c, d.pc.vocab, d.train, d.valid);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.best_bleu, b.best_bleu);
  c.seed = 2;
  auto other = train<double>(c, d.pc.vocab, d.train, d.valid);
  EXPECT_NE(other.losses, a.losses);
}

TEST(Train, WritesCheckpointsAndMetrics) {
  auto d = small_data();
  auto c = small_config();
  auto dir = tmp_dir("run");
  TrainOptions o;
  o.out_dir = dir;
  o.keep_all_checkpoints = true;
  auto res = train<double>(c, d.pc.vocab, d.train, d.valid, o);
  EXPECT_TRUE(std::filesystem::exists(dir + "/best.rrck"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/last.rrck"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/step5.rrck"));
  std::ifstream in(dir + "/metrics.jsonl");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("step") && j.contains("train_loss") && j.contains("val_bleu4") &&
                j.contains("timestamp"));
    ++rows;
  }
  EXPECT_EQ(rows, 2u);
  // The stored best model reproduces the recorded validation BLEU.
  auto ck = load_checkpoint<double>(dir + "/best.rrck");
  auto ev = evaluate_bleu(ck.params, ck.vocab, d.valid, c.ablation, c.decode_max_len);
  EXPECT_EQ(ev.bleu.bleu4, res.best_bleu);
  EXPECT_EQ(ck.info.best_bleu, res.best_bleu);
}

TEST(Train, ErrorsOnTinyDataOrForeignVocab) {
  auto d = small_data();
  auto c = small_config();
  c.batch_size = d.train.size() + 1;
  EXPECT_THROW(train<double>(c, d.pc.vocab, d.train, d.valid), ConfigError);
  c = small_config();
  auto other = Vocabulary::from_tokens(std::vector<std::string>{"zz"}, 10);
  EXPECT_THROW(train<double>(c, other, d.train, d.valid), DataError);
}

// ---------------------------------------------------------------------------
// Sweep

TEST(Sweep, CartesianCardinality) {
  TrainConfig base;
  SweepGrid g = {{"K", {1, 2, 4}}, {"hidden_units", {50, 100}}, {"dropout", {0.0, 0.1}}};
  auto cfgs = expand_grid(base, g);
  EXPECT_EQ(cfgs.size(), 12u);
  std::set<std::string> seen;
  for (const auto &c : cfgs)
    seen.insert(c.to_json().dump());
  EXPECT_EQ(seen.size(), 12u);
  EXPECT_EQ(expand_grid(base, {}).size(), 1u);
  EXPECT_THROW(expand_grid(base, {{"learning_rate", {0.1}}}), ConfigError);
  EXPECT_THROW(expand_grid(base, {{"K", {}}}), ConfigError);
}
