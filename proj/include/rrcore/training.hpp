// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Minibatch Adam training, checkpoints, validation BLEU selection
 *         and the hyperparameter sweep.
 */
#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"
#include "rrcore/generation.hpp"
#include "rrcore/metrics.hpp"
#include "rrcore/model.hpp"

namespace rrcore {

struct TrainConfig {
  std::size_t hidden_units = 200;
  std::size_t emb_dim = 100;
  std::size_t K = 4;
  double dropout = 0.1;
  std::size_t layers = 1;
  std::size_t batch_size = 32;
  std::size_t vocab_cap = kDefaultVocabCap;
  std::size_t min_freq = 1;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t decode_max_len = kDefaultMaxLen;
  std::size_t epochs = 3;
  std::size_t max_steps = 0; ///< 0 = no limit beyond epochs
  std::size_t checkpoint_every = 200;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::full();

  void validate() const {
    for (auto [name, v] : {std::pair<const char *, std::size_t>{"hidden_units", hidden_units},
                           {"emb_dim", emb_dim},
                           {"K", K},
                           {"layers", layers},
                           {"batch_size", batch_size},
                           {"vocab_cap", vocab_cap},
                           {"min_freq", min_freq},
                           {"max_len", max_len},
                           {"decode_max_len", decode_max_len},
                           {"epochs", epochs},
                           {"checkpoint_every", checkpoint_every}})
      if (v < 1)
        throw ConfigError(std::string(name) + " must be at least 1");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("dropout must lie in [0, 1)");
    if (!(learning_rate > 0.0))
      throw ConfigError("learning_rate must be positive");
    if (!(clip_norm > 0.0))
      throw ConfigError("clip_norm must be positive");
  }

  ModelConfig model_config(std::size_t vocab_size) const {
    return {vocab_size, emb_dim, hidden_units, layers, dropout};
  }

  nlohmann::json to_json() const {
    return {{"hidden_units", hidden_units},
            {"emb_dim", emb_dim},
            {"K", K},
            {"dropout", dropout},
            {"layers", layers},
            {"batch_size", batch_size},
            {"vocab_cap", vocab_cap},
            {"min_freq", min_freq},
            {"max_len", max_len},
            {"decode_max_len", decode_max_len},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"checkpoint_every", checkpoint_every},
            {"learning_rate", learning_rate},
            {"clip_norm", clip_norm},
            {"seed", seed},
            {"ablation", ablation.name()}};
  }

  /// Overlays the keys of `j` onto this config; unknown keys are rejected.
  void merge_json(const nlohmann::json &j) {
    if (!j.is_object())
      throw ConfigError("training config must be a JSON object");
    try {
      for (auto it = j.begin(); it != j.end(); ++it) {
        const auto &k = it.key();
        const auto &v = it.value();
        if (k == "hidden_units") hidden_units = v.get<std::size_t>();
        else if (k == "emb_dim") emb_dim = v.get<std::size_t>();
        else if (k == "K") K = v.get<std::size_t>();
        else if (k == "dropout") dropout = v.get<double>();
        else if (k == "layers") layers = v.get<std::size_t>();
        else if (k == "batch_size") batch_size = v.get<std::size_t>();
        else if (k == "vocab_cap") vocab_cap = v.get<std::size_t>();
        else if (k == "min_freq") min_freq = v.get<std::size_t>();
        else if (k == "max_len") max_len = v.get<std::size_t>();
        else if (k == "decode_max_len") decode_max_len = v.get<std::size_t>();
        else if (k == "epochs") epochs = v.get<std::size_t>();
        else if (k == "max_steps") max_steps = v.get<std::size_t>();
        else if (k == "checkpoint_every") checkpoint_every = v.get<std::size_t>();
        else if (k == "learning_rate") learning_rate = v.get<double>();
        else if (k == "clip_norm") clip_norm = v.get<double>();
        else if (k == "seed") seed = v.get<std::uint64_t>();
        else if (k == "ablation") ablation = Ablation::parse(v.get<std::string>());
        else throw ConfigError("unknown config key '" + k + "'");
      }
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError(std::string("bad config value: ") + e.what());
    }
  }

  static TrainConfig from_json(const nlohmann::json &j) {
    TrainConfig c;
    c.merge_json(j);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

template <class Real> double global_grad_norm(std::span<Tensor<Real>> params) {
  double s = 0.0;
  for (auto &t : params)
    for (Real g : t.grad())
      s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class Real> double clip_grad_norm(std::span<Tensor<Real>> params, double max_norm) {
  const double n = global_grad_norm(params);
  if (n > max_norm) {
    const Real f = static_cast<Real>(max_norm / n);
    for (auto &t : params)
      for (auto &g : t.mutable_grad())
        g *= f;
  }
  return n;
}

/// Bias-corrected Adam update. Non-finite gradients abort before any
/// parameter or moment changes.
template <class Real>
void adam_step(std::span<Tensor<Real>> params, AdamState &st, double lr) {
  for (std::size_t t = 0; t < params.size(); ++t)
    for (Real g : params[t].grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient in parameter tensor " + std::to_string(t) +
                           " at optimizer step " + std::to_string(st.step + 1));
  if (st.m.empty()) {
    for (auto &p : params) {
      st.m.emplace_back(p.size(), 0.0);
      st.v.emplace_back(p.size(), 0.0);
    }
  }
  if (st.m.size() != params.size())
    throw ShapeError("optimizer state does not match the parameter list");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto vals = params[t].values();
    auto grad = params[t].grad();
    auto &m = st.m[t];
    auto &v = st.v[t];
    if (m.size() != vals.size())
      throw ShapeError("optimizer moment size mismatch at tensor " + std::to_string(t));
    if (grad.empty())
      continue;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      vals[i] = static_cast<Real>(static_cast<double>(vals[i]) - lr * mh / (std::sqrt(vh) + st.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "RRCK" | u32 version | u64 header length | JSON header | raw
// little-endian buffers in the header's tensor order.

template <class Real> constexpr const char *dtype_name() {
  return sizeof(Real) == 4 ? "f32" : "f64";
}

struct CheckpointInfo {
  TrainConfig config;
  std::size_t step = 0;
  double best_bleu = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
};

template <class Real>
void save_checkpoint(const std::string &path, ModelParams<Real> &p, const Vocabulary &vocab,
                     const CheckpointInfo &info) {
  nlohmann::json h;
  h["format"] = "rrcore-checkpoint";
  h["dtype"] = dtype_name<Real>();
  h["config"] = info.config.to_json();
  h["model"] = {{"vocab_size", p.config.vocab_size},
                {"emb_dim", p.config.emb_dim},
                {"hidden", p.config.hidden},
                {"layers", p.config.layers},
                {"dropout", p.config.dropout}};
  h["vocab_hash"] = hex64(vocab.hash());
  h["vocab"] = vocab.serialize();
  h["step"] = info.step;
  h["best_bleu"] = info.best_bleu;
  h["metrics"] = info.metrics;
  auto &shapes = h["tensors"] = nlohmann::json::array();
  p.visit([&](const std::string &name, Tensor<Real> &t) {
    shapes.push_back({name, t.rows(), t.cols()});
  });
  const std::string header = h.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw DataError("cannot write checkpoint " + path);
  out.write("RRCK", 4);
  const std::uint32_t version = 1;
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char *>(&version), sizeof version);
  out.write(reinterpret_cast<const char *>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  p.visit([&](const std::string &, Tensor<Real> &t) {
    out.write(reinterpret_cast<const char *>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(Real)));
  });
  if (!out)
    throw DataError("short write on checkpoint " + path);
}

template <class Real> struct LoadedCheckpoint {
  ModelParams<Real> params;
  Vocabulary vocab;
  CheckpointInfo info;
};

/// Reads a checkpoint. Stored buffers are converted when their precision
/// differs from Real.
template <class Real> LoadedCheckpoint<Real> load_checkpoint(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError("cannot open checkpoint " + path);
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char *>(&version), sizeof version);
  in.read(reinterpret_cast<char *>(&len), sizeof len);
  if (!in || std::memcmp(magic, "RRCK", 4) != 0)
    throw DataError(path + ": not a checkpoint");
  if (version != 1)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception &e) {
    throw DataError(path + ": bad header: " + e.what());
  }
  LoadedCheckpoint<Real> ck;
  try {
    ck.vocab = Vocabulary::deserialize(h.at("vocab").get<std::string>());
    if (hex64(ck.vocab.hash()) != h.at("vocab_hash").get<std::string>())
      throw DataError(path + ": vocabulary hash mismatch");
    ck.info.config = TrainConfig::from_json(h.at("config"));
    ck.info.step = h.at("step").get<std::size_t>();
    ck.info.best_bleu = h.at("best_bleu").get<double>();
    ck.info.metrics = h.value("metrics", nlohmann::json::object());
    const auto &m = h.at("model");
    ModelConfig mc{m.at("vocab_size").get<std::size_t>(), m.at("emb_dim").get<std::size_t>(),
                   m.at("hidden").get<std::size_t>(), m.at("layers").get<std::size_t>(),
                   m.at("dropout").get<double>()};
    ck.params = ModelParams<Real>::init(mc, 0);
    const bool f32 = h.at("dtype").get<std::string>() == "f32";
    const auto &shapes = h.at("tensors");
    std::size_t i = 0;
    ck.params.visit([&](const std::string &name, Tensor<Real> &t) {
      if (i >= shapes.size() || shapes[i][0].get<std::string>() != name ||
          shapes[i][1].get<std::size_t>() != t.rows() || shapes[i][2].get<std::size_t>() != t.cols())
        throw DataError(path + ": tensor layout mismatch at " + name);
      ++i;
      auto vals = t.values();
      if (f32) {
        std::vector<float> buf(vals.size());
        in.read(reinterpret_cast<char *>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        std::copy(buf.begin(), buf.end(), vals.begin());
      } else {
        std::vector<double> buf(vals.size());
        in.read(reinterpret_cast<char *>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(double)));
        std::transform(buf.begin(), buf.end(), vals.begin(),
                       [](double d) { return static_cast<Real>(d); });
      }
    });
  } catch (const nlohmann::json::exception &e) {
    throw DataError(path + ": malformed header: " + e.what());
  }
  if (!in)
    throw DataError(path + ": truncated tensor data");
  return ck;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  BleuReport bleu;
  std::vector<TokenList> candidates;
  std::vector<TokenList> references;
};

template <class Real>
EvalResult evaluate_bleu(const ModelParams<Real> &p, const Vocabulary &vocab,
                         std::span<const EncodedExample> data, const Ablation &ablation,
                         std::size_t max_len, std::size_t beam = 1) {
  EvalResult r;
  DecodeOptions opt;
  opt.max_len = max_len;
  opt.ablation = ablation;
  for (const auto &ex : data) {
    auto g = beam <= 1 ? greedy_decode(p, vocab, ex, opt) : beam_decode(p, vocab, ex, beam, opt);
    r.candidates.push_back(g.tokens);
    r.references.push_back(ex.response_tokens);
  }
  r.bleu = corpus_bleu4(r.candidates, r.references);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  std::optional<double> val_bleu4;
  double timestamp = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"train_loss", train_loss},
            {"val_bleu4", val_bleu4 ? nlohmann::json(*val_bleu4) : nlohmann::json()},
            {"timestamp", timestamp}};
  }
};

struct TrainOptions {
  std::string out_dir;             ///< empty: nothing is written
  bool keep_all_checkpoints = false;
  bool validate = true;            ///< run validation BLEU at checkpoints
  std::function<void(const MetricsRow &)> on_row;
};

template <class Real> struct TrainResult {
  ModelParams<Real> best;    ///< parameters with the highest validation BLEU
  ModelParams<Real> last;
  double best_bleu = -1.0;
  std::size_t best_step = 0;
  std::size_t steps = 0;
  std::vector<double> losses; ///< per batch
  std::vector<MetricsRow> rows;
};

/// Mean loss over one batch with gradients accumulated into the parameters.
template <class Real, class Rng>
double batch_loss_and_grad(ModelParams<Real> &p, std::span<const EncodedExample> data,
                           std::span<const std::size_t> batch, const Ablation &ablation,
                           Rng &rng) {
  double total = 0.0;
  const Real inv = Real(1) / static_cast<Real>(batch.size());
  for (std::size_t i : batch) {
    auto fr = forward_loss(data[i], p, ablation, true, rng);
    total += static_cast<double>(fr.loss.item());
    backward(scale(fr.loss, inv));
  }
  return total / static_cast<double>(batch.size());
}

template <class Real>
TrainResult<Real> train(const TrainConfig &cfg, const Vocabulary &vocab,
                        std::span<const EncodedExample> train_set,
                        std::span<const EncodedExample> valid_set,
                        const TrainOptions &opts = {}) {
  cfg.validate();
  if (train_set.size() < cfg.batch_size)
    throw ConfigError("training set has " + std::to_string(train_set.size()) +
                      " examples, fewer than one batch of " + std::to_string(cfg.batch_size) +
                      "; lower batch_size");
  for (const auto &ex : train_set)
    if (ex.vocab_hash != vocab.hash())
      throw DataError("training example encoded against a different vocabulary");

  TrainResult<Real> res;
  auto params = ModelParams<Real>::init(cfg.model_config(vocab.size()), cfg.seed);
  auto tensors = params.tensors();
  std::span<Tensor<Real>> ps(tensors);
  AdamState adam;
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5eedULL);
  std::mt19937_64 drop_rng(cfg.seed + 1);
  const auto t0 = std::chrono::steady_clock::now();
  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir + "/metrics.jsonl", std::ios::binary);
  }

  auto checkpoint = [&](double window_loss) {
    MetricsRow row;
    row.step = res.steps;
    row.train_loss = window_loss;
    row.timestamp = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.validate && !valid_set.empty()) {
      auto ev = evaluate_bleu(params, vocab, valid_set, cfg.ablation, cfg.decode_max_len);
      row.val_bleu4 = ev.bleu.bleu4;
      if (ev.bleu.bleu4 > res.best_bleu) {
        res.best_bleu = ev.bleu.bleu4;
        res.best_step = res.steps;
        res.best = params.clone();
        if (!opts.out_dir.empty())
          save_checkpoint(opts.out_dir + "/best.rrck", res.best, vocab,
                          {cfg, res.steps, res.best_bleu, row.to_json()});
      }
    }
    if (!opts.out_dir.empty()) {
      if (opts.keep_all_checkpoints)
        save_checkpoint(opts.out_dir + "/step" + std::to_string(res.steps) + ".rrck", params,
                        vocab, {cfg, res.steps, std::max(res.best_bleu, 0.0), row.to_json()});
      log << row.to_json().dump() << '\n' << std::flush;
    }
    res.rows.push_back(row);
    if (opts.on_row)
      opts.on_row(row);
  };

  std::vector<std::size_t> order(train_set.size());
  double window = 0.0;
  std::size_t window_n = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < order.size() && !done; b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + b, e - b);
      params.zero_grad();
      const double loss = batch_loss_and_grad(params, train_set, batch, cfg.ablation, drop_rng);
      if (!std::isfinite(loss))
        throw NumericError("non-finite training loss at step " + std::to_string(res.steps + 1));
      clip_grad_norm(ps, cfg.clip_norm);
      adam_step(ps, adam, cfg.learning_rate);
      ++res.steps;
      res.losses.push_back(loss);
      window += loss;
      ++window_n;
      if (res.steps % cfg.checkpoint_every == 0) {
        checkpoint(window / static_cast<double>(window_n));
        window = 0.0;
        window_n = 0;
      }
      if (cfg.max_steps && res.steps >= cfg.max_steps)
        done = true;
    }
  }
  if (window_n > 0)
    checkpoint(window / static_cast<double>(window_n));
  if (res.best_bleu < 0.0) {
    res.best = params.clone();
    res.best_step = res.steps;
  }
  res.last = std::move(params);
  if (!opts.out_dir.empty()) {
    save_checkpoint(opts.out_dir + "/last.rrck", res.last, vocab,
                    {cfg, res.steps, std::max(res.best_bleu, 0.0), nlohmann::json::object()});
    if (res.best_bleu < 0.0)
      save_checkpoint(opts.out_dir + "/best.rrck", res.best, vocab,
                      {cfg, res.steps, 0.0, nlohmann::json::object()});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sweep

using SweepGrid = std::map<std::string, std::vector<double>>;

inline const std::vector<std::string> &sweep_keys() {
  static const std::vector<std::string> k = {"K", "hidden_units", "layers", "dropout", "emb_dim"};
  return k;
}

/// Cartesian product of the grid applied to `base`, in key order. An empty
/// grid yields just the base config.
inline std::vector<TrainConfig> expand_grid(const TrainConfig &base, const SweepGrid &grid) {
  for (const auto &[k, vals] : grid) {
    if (std::find(sweep_keys().begin(), sweep_keys().end(), k) == sweep_keys().end())
      throw ConfigError("cannot sweep over '" + k + "'");
    if (vals.empty())
      throw ConfigError("sweep axis '" + k + "' has no values");
  }
  std::vector<TrainConfig> out{base};
  for (const auto &[k, vals] : grid) {
    std::vector<TrainConfig> next;
    for (const auto &c : out)
      for (double v : vals) {
        auto n = c;
        nlohmann::json j;
        if (k == "dropout")
          j[k] = v;
        else
          j[k] = static_cast<std::size_t>(std::llround(v));
        n.merge_json(j);
        n.validate();
        next.push_back(n);
      }
    out = std::move(next);
  }
  return out;
}

} // namespace rrcore
