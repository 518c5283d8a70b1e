// SPDX-License-Identifier: Apache-2.0
// Command-line driver: synth, preprocess, retrieve, train, sweep, generate,
// evaluate, ablate, filter-cv, filter-predict.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "rrcore/pipeline.hpp"
#include "rrcore/qafilter.hpp"
#include "rrcore/training.hpp"

using namespace rrcore;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Configuration: CLI flag > config file > default.

struct PipelineConfig {
  TrainConfig train;
  PreprocessConfig prep;
  FilterConfig filter;
  std::map<std::string, std::string> paths;
};

const std::set<std::string> &path_keys() {
  static const std::set<std::string> k = {"corpus", "data", "out",    "checkpoint",
                                          "index",  "gold", "input", "model"};
  return k;
}

PipelineConfig load_config(const std::string &path) {
  PipelineConfig pc;
  if (path.empty())
    return pc;
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception &e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (!j.is_object())
    throw ConfigError(path + ": config must be a JSON object");
  const auto train_keys = TrainConfig().to_json();
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto &k = it.key();
      const auto &v = it.value();
      if (train_keys.contains(k))
        pc.train.merge_json({{k, v}});
      else if (k == "valid_fraction") pc.prep.valid_fraction = v.get<double>();
      else if (k == "test_fraction") pc.prep.test_fraction = v.get<double>();
      else if (k == "k_store") pc.prep.k_store = v.get<std::size_t>();
      else if (k == "lemmatize") pc.prep.lemmatize = v.get<bool>();
      else if (k == "filter_features") pc.filter.features = v.get<std::size_t>();
      else if (k == "filter_lambda") pc.filter.lambda = v.get<double>();
      else if (k == "filter_epochs") pc.filter.epochs = v.get<std::size_t>();
      else if (k == "filter_gamma") pc.filter.gamma = v.get<double>();
      else if (k == "filter_class_weights") pc.filter.class_weights = v.get<bool>();
      else if (path_keys().count(k)) pc.paths[k] = v.get<std::string>();
      else throw ConfigError(path + ": unknown config key '" + k + "'");
    }
  } catch (const json::exception &e) {
    throw ConfigError(path + ": " + e.what());
  }
  pc.prep.vocab_cap = pc.train.vocab_cap;
  pc.prep.min_freq = pc.train.min_freq;
  pc.prep.seed = pc.train.seed;
  pc.filter.seed = pc.train.seed;
  return pc;
}

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  int precision = 32;
};

struct TrainFlags {
  std::optional<std::size_t> hidden, emb, K, layers, batch, epochs, max_steps, every, decode_max_len;
  std::optional<double> dropout, lr, clip;
  std::optional<std::string> ablation;

  void add(CLI::App *app) {
    app->add_option("--hidden", hidden, "GRU hidden units");
    app->add_option("--emb", emb, "embedding size");
    app->add_option("--K", K, "retrieved responses per example");
    app->add_option("--layers", layers, "decoder layers");
    app->add_option("--batch-size", batch, "examples per batch");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--max-steps", max_steps, "stop after this many steps (0 = no limit)");
    app->add_option("--checkpoint-every", every, "steps between checkpoints");
    app->add_option("--decode-max-len", decode_max_len, "maximum generated length");
    app->add_option("--dropout", dropout, "dropout rate");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--clip", clip, "gradient norm clip");
    app->add_option("--ablation", ablation, "full | no-retrieval | no-description | only-review");
  }
  void apply(TrainConfig &c) const {
    auto set = [](auto &dst, const auto &src) {
      if (src)
        dst = *src;
    };
    set(c.hidden_units, hidden);
    set(c.emb_dim, emb);
    set(c.K, K);
    set(c.layers, layers);
    set(c.batch_size, batch);
    set(c.epochs, epochs);
    set(c.max_steps, max_steps);
    set(c.checkpoint_every, every);
    set(c.decode_max_len, decode_max_len);
    set(c.dropout, dropout);
    set(c.learning_rate, lr);
    set(c.clip_norm, clip);
    if (ablation)
      c.ablation = Ablation::parse(*ablation);
  }
};

PipelineConfig resolve(const Globals &g) {
  auto pc = load_config(g.config);
  if (g.seed) {
    pc.train.seed = *g.seed;
    pc.prep.seed = *g.seed;
    pc.filter.seed = *g.seed;
  }
  return pc;
}

std::string need_path(const std::string &flag, const std::string &key, const PipelineConfig &pc) {
  if (!flag.empty())
    return flag;
  auto it = pc.paths.find(key);
  if (it != pc.paths.end() && !it->second.empty())
    return it->second;
  throw ConfigError("missing --" + key + " (or \"" + key + "\" in the config file)");
}

template <class F> auto with_precision(int precision, F &&f) {
  if (precision == 64)
    return f(double{});
  if (precision == 32)
    return f(float{});
  throw ConfigError("--precision must be 32 or 64");
}

void emit(const json &j) { std::cout << j.dump(2) << '\n'; }

void write_rows(const std::string &path, const std::vector<json> &rows) {
  if (path.empty() || path == "-") {
    for (const auto &r : rows)
      std::cout << r.dump() << '\n';
  } else {
    write_jsonl(path, rows);
  }
}

TokenList text_or_tokens(const json &j) {
  if (j.is_string())
    return tokenize(j.get<std::string>());
  if (j.is_array())
    return j.get<TokenList>();
  throw DataError("expected a string or token array");
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const Globals &g, std::size_t n, const std::string &out_flag) {
  auto pc = resolve(g);
  auto out = need_path(out_flag, "corpus", pc);
  auto raw = synth_corpus(n, pc.train.seed);
  write_corpus(out, raw);
  emit({{"records", raw.size()}, {"path", out}});
  return 0;
}

struct PrepFlags {
  std::string input, out;
  std::optional<std::size_t> k_store, vocab_cap, min_freq;
  std::optional<double> valid_fraction, test_fraction;
  bool lemmatize = false;
};

int cmd_preprocess(const Globals &g, const PrepFlags &f) {
  auto pc = resolve(g);
  auto input = need_path(f.input, "corpus", pc);
  auto out = need_path(f.out, "data", pc);
  auto &c = pc.prep;
  if (f.k_store) c.k_store = *f.k_store;
  if (f.vocab_cap) c.vocab_cap = *f.vocab_cap;
  if (f.min_freq) c.min_freq = *f.min_freq;
  if (f.valid_fraction) c.valid_fraction = *f.valid_fraction;
  if (f.test_fraction) c.test_fraction = *f.test_fraction;
  if (f.lemmatize) c.lemmatize = true;
  auto raw = read_corpus(input);
  auto prepared = preprocess(raw, c);
  save_prepared(out, prepared);
  emit({{"train", prepared.train.size()},
        {"valid", prepared.valid.size()},
        {"test", prepared.test.size()},
        {"vocab_size", prepared.vocab.size()},
        {"vocab_hash", hex64(prepared.vocab.hash())},
        {"dir", out}});
  return 0;
}

int cmd_retrieve(const Globals &g, const std::string &index_flag, std::size_t k,
                 const std::string &queries, const std::string &out) {
  auto pc = resolve(g);
  auto index = TfIdfIndex::load(need_path(index_flag, "index", pc));
  std::vector<json> rows;
  for (const auto &q : read_jsonl(queries)) {
    if (!q.contains("review"))
      throw DataError(queries + ": query rows need a review");
    auto toks = text_or_tokens(q["review"]);
    json hits = json::array();
    for (const auto &h : index.top_k(toks, k))
      hits.push_back({{"doc", h.doc},
                      {"score", h.score},
                      {"response", join_tokens(index.doc_meta(h.doc).response)}});
    rows.push_back({{"review", q["review"]}, {"retrieved", hits}});
  }
  write_rows(out, rows);
  return 0;
}

struct Split {
  PreparedCorpus pc;
  std::vector<EncodedExample> train, valid;
};

Split load_split(const std::string &dir, const TrainConfig &c) {
  Split s;
  s.pc = load_prepared(dir);
  s.train = encode_split(s.pc.train, s.pc.vocab, c.K, c.max_len);
  s.valid = encode_split(s.pc.valid, s.pc.vocab, c.K, c.max_len);
  return s;
}

TrainOptions progress_options(const std::string &out, const std::string &tag = {}) {
  TrainOptions o;
  o.out_dir = out;
  o.on_row = [tag](const MetricsRow &r) {
    std::cerr << tag << "step " << r.step << " loss " << r.train_loss;
    if (r.val_bleu4)
      std::cerr << " val_bleu4 " << *r.val_bleu4;
    std::cerr << '\n';
  };
  return o;
}

int cmd_train(const Globals &g, const TrainFlags &tf, const std::string &data_flag,
              const std::string &out_flag) {
  auto pc = resolve(g);
  tf.apply(pc.train);
  pc.train.validate();
  auto data = load_split(need_path(data_flag, "data", pc), pc.train);
  auto out = need_path(out_flag, "out", pc);
  return with_precision(g.precision, [&](auto tag) {
    using Real = decltype(tag);
    auto res = train<Real>(pc.train, data.pc.vocab, data.train, data.valid, progress_options(out));
    emit({{"best_bleu4", res.best_bleu},
          {"best_step", res.best_step},
          {"steps", res.steps},
          {"best_checkpoint", out + "/best.rrck"},
          {"config", pc.train.to_json()}});
    return 0;
  });
}

int cmd_sweep(const Globals &g, const TrainFlags &tf, const std::string &data_flag,
              const std::string &out_flag, const std::string &grid_text) {
  auto pc = resolve(g);
  tf.apply(pc.train);
  SweepGrid grid;
  try {
    auto j = json::parse(grid_text);
    if (!j.is_object())
      throw ConfigError("--grid must be a JSON object of value lists");
    for (auto it = j.begin(); it != j.end(); ++it)
      grid[it.key()] = it.value().get<std::vector<double>>();
  } catch (const json::exception &e) {
    throw ConfigError(std::string("bad --grid: ") + e.what());
  }
  auto cfgs = expand_grid(pc.train, grid);
  for (const auto &c : cfgs)
    c.validate();
  auto dir = need_path(data_flag, "data", pc);
  auto out = need_path(out_flag, "out", pc);
  auto prepared = load_prepared(dir);
  std::vector<json> rows;
  with_precision(g.precision, [&](auto tag) {
    using Real = decltype(tag);
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      const auto &c = cfgs[i];
      auto tr = encode_split(prepared.train, prepared.vocab, c.K, c.max_len);
      auto va = encode_split(prepared.valid, prepared.vocab, c.K, c.max_len);
      const auto run = out + "/run" + std::to_string(i);
      auto res = train<Real>(c, prepared.vocab, tr, va,
                             progress_options(run, "[" + std::to_string(i) + "] "));
      rows.push_back({{"run", i},
                      {"config", c.to_json()},
                      {"best_bleu4", res.best_bleu},
                      {"best_step", res.best_step},
                      {"dir", run}});
      write_jsonl(out + "/sweep.jsonl", rows);
    }
    return 0;
  });
  emit(rows);
  return 0;
}

struct GenFlags {
  std::string checkpoint, input, out, dump_attention, index;
  std::size_t beam = 1;
  std::optional<std::size_t> max_len;
};

/// Input rows are prepared records (token arrays plus retrievals) or raw
/// {review, description}; raw rows are retrieved against --index if given.
EncodedExample encode_input(const json &row, const Vocabulary &vocab, const TrainConfig &c,
                            const std::optional<TfIdfIndex> &index) {
  if (!row.contains("review"))
    throw DataError("input rows need a review");
  TokenizedRecord rec;
  std::vector<TokenList> retrieved;
  if (row["review"].is_array()) {
    auto p = PreparedRecord::from_json(row);
    rec = p.record;
    retrieved = p.retrieved;
  } else {
    rec = tokenize_record(parse_record(row));
    if (index)
      for (const auto &h : index->top_k(rec.review, c.K))
        retrieved.push_back(index->doc_meta(h.doc).response);
  }
  return encode_example(rec, pad_retrieved(retrieved, c.K), vocab, c.max_len, EncodeMode::infer);
}

int cmd_generate(const Globals &g, const GenFlags &f) {
  auto pc = resolve(g);
  auto ckpath = need_path(f.checkpoint, "checkpoint", pc);
  auto input = need_path(f.input, "input", pc);
  if (f.beam == 0)
    throw ConfigError("--beam must be at least 1");
  std::optional<TfIdfIndex> index;
  if (!f.index.empty() || pc.paths.count("index"))
    index = TfIdfIndex::load(need_path(f.index, "index", pc));
  if (!f.dump_attention.empty())
    std::filesystem::create_directories(f.dump_attention);
  return with_precision(g.precision, [&](auto tag) {
    using Real = decltype(tag);
    auto ck = load_checkpoint<Real>(ckpath);
    const auto &c = ck.info.config;
    DecodeOptions opt;
    opt.max_len = f.max_len.value_or(c.decode_max_len);
    opt.ablation = c.ablation;
    opt.keep_steps = !f.dump_attention.empty();
    std::vector<json> rows;
    std::size_t i = 0;
    for (const auto &row : read_jsonl(input)) {
      auto ex = encode_input(row, ck.vocab, c, index);
      auto r = f.beam == 1 ? greedy_decode(ck.params, ck.vocab, ex, opt)
                           : beam_decode(ck.params, ck.vocab, ex, f.beam, opt);
      json o = {{"review", join_tokens(ex.review_tokens)},
                {"generated_response", join_tokens(r.tokens)},
                {"termination", termination_name(r.termination)}};
      if (row.contains("response"))
        o["response"] = row["response"].is_array() ? json(join_tokens(row["response"].get<TokenList>()))
                                                   : row["response"];
      if (opt.keep_steps)
        export_attention(r, ex, f.dump_attention + "/attention_" + std::to_string(i) + ".json");
      rows.push_back(std::move(o));
      ++i;
    }
    write_rows(f.out, rows);
    return 0;
  });
}

std::vector<TokenList> read_texts(const std::string &path, std::initializer_list<const char *> keys) {
  std::vector<TokenList> out;
  std::size_t line = 0;
  for (const auto &j : read_jsonl(path)) {
    ++line;
    const json *field = nullptr;
    for (const char *k : keys)
      if (j.contains(k)) {
        field = &j[k];
        break;
      }
    if (!field)
      throw DataError(path + ":" + std::to_string(line) + ": no text field");
    out.push_back(text_or_tokens(*field));
  }
  return out;
}

int cmd_evaluate(const std::string &cands, const std::string &refs) {
  auto c = read_texts(cands, {"generated_response", "candidate", "response", "text"});
  auto r = read_texts(refs, {"response", "reference", "text"});
  auto b = corpus_bleu4(c, r);
  auto j = bleu_json(b);
  j["matches"] = b.matches;
  j["totals"] = b.totals;
  emit(j);
  return 0;
}

int cmd_ablate(const Globals &g, const TrainFlags &tf, const std::string &data_flag,
               const std::string &out) {
  auto pc = resolve(g);
  tf.apply(pc.train);
  pc.train.validate();
  auto prepared = load_prepared(need_path(data_flag, "data", pc));
  return with_precision(g.precision, [&](auto tag) {
    using Real = decltype(tag);
    auto rows = run_ablation<Real>(pc.train, prepared, out,
                                   [](const std::string &s) { std::cerr << s << '\n'; });
    auto j = ablation_json(rows);
    if (!out.empty()) {
      std::ofstream o(out + "/ablation.json");
      o << j.dump(2) << '\n';
    }
    emit(j);
    return 0;
  });
}

struct FilterFlags {
  std::string gold, save_model, model, input, out;
  std::size_t k = 10;
  std::optional<std::size_t> features, epochs;
  std::optional<double> lambda, gamma;

  void apply(FilterConfig &c) const {
    if (features) c.features = *features;
    if (epochs) c.epochs = *epochs;
    if (lambda) c.lambda = *lambda;
    if (gamma) c.gamma = *gamma;
  }
};

int cmd_filter_cv(const Globals &g, const FilterFlags &f) {
  auto pc = resolve(g);
  f.apply(pc.filter);
  auto gold = read_gold(need_path(f.gold, "gold", pc));
  auto cv = cross_validate(gold, f.k, pc.filter);
  auto j = filter_report_json(cv.confusion);
  j["k"] = f.k;
  if (!f.save_model.empty()) {
    std::vector<TokenList> reviews;
    std::vector<std::uint8_t> labels;
    for (const auto &x : gold) {
      reviews.push_back(x.review);
      labels.push_back(x.bad);
    }
    auto index = TfIdfIndex::build(reviews);
    auto m = train_svm_sgd(featurize(reviews, index), labels, pc.filter);
    std::ofstream o(f.save_model, std::ios::binary);
    if (!o)
      throw DataError("cannot write " + f.save_model);
    o << json{{"filter", m.to_json()}, {"gold_reviews", reviews}}.dump() << '\n';
    j["model"] = f.save_model;
  }
  emit(j);
  return 0;
}

int cmd_filter_predict(const Globals &g, const FilterFlags &f) {
  auto pc = resolve(g);
  auto path = need_path(f.model, "model", pc);
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open filter model " + path);
  json saved;
  try {
    saved = json::parse(in);
  } catch (const json::exception &e) {
    throw DataError(path + ": " + e.what());
  }
  if (!saved.contains("filter") || !saved.contains("gold_reviews"))
    throw DataError(path + ": not a filter model");
  auto m = FilterModel::from_json(saved["filter"]);
  auto reviews = saved["gold_reviews"].get<std::vector<TokenList>>();
  auto index = TfIdfIndex::build(reviews);
  std::vector<json> rows;
  for (const auto &row : read_jsonl(need_path(f.input, "input", pc))) {
    if (!row.contains("review"))
      throw DataError("input rows need a review");
    std::vector<TokenList> one = {text_or_tokens(row["review"])};
    const double score = m.decision(featurize(one, index)[0]);
    auto o = row;
    o["label"] = score > 0.0 ? "bad" : "not_bad";
    o["score"] = score;
    rows.push_back(std::move(o));
  }
  write_rows(f.out, rows);
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"rrcore: retrieval-augmented review response generation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed for splits, init, shuffling and folds");
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--precision", g.precision, "32 or 64 bit floats")->check(CLI::IsMember({32, 64}));

  std::function<int()> run;

  auto *synth = app.add_subcommand("synth", "write a synthetic corpus");
  std::size_t synth_n = 2000;
  std::string synth_out;
  synth->add_option("--n", synth_n, "number of records");
  synth->add_option("--out", synth_out, "output JSONL");
  synth->callback([&] { run = [&] { return cmd_synth(g, synth_n, synth_out); }; });

  auto *prep = app.add_subcommand("preprocess", "tokenize, split, build vocabulary and index");
  PrepFlags pf;
  prep->add_option("--input", pf.input, "raw corpus JSONL");
  prep->add_option("--out", pf.out, "output directory");
  prep->add_option("--k-store", pf.k_store, "retrievals stored per record");
  prep->add_option("--vocab-cap", pf.vocab_cap, "vocabulary size cap");
  prep->add_option("--min-freq", pf.min_freq, "minimum token count for the vocabulary");
  prep->add_option("--valid-fraction", pf.valid_fraction, "validation share");
  prep->add_option("--test-fraction", pf.test_fraction, "test share");
  prep->add_flag("--lemmatize", pf.lemmatize, "strip common suffixes");
  prep->callback([&] { run = [&] { return cmd_preprocess(g, pf); }; });

  auto *ret = app.add_subcommand("retrieve", "top-k similar reviews' responses");
  std::string ret_index, ret_queries, ret_out;
  std::size_t ret_k = 4;
  ret->add_option("--index", ret_index, "index stem (DIR/index)");
  ret->add_option("--k", ret_k, "responses per query");
  ret->add_option("--query-file", ret_queries, "JSONL with review fields")->required();
  ret->add_option("--out", ret_out, "output JSONL (default stdout)");
  ret->callback([&] { run = [&] { return cmd_retrieve(g, ret_index, ret_k, ret_queries, ret_out); }; });

  TrainFlags tf;
  std::string data_dir, out_dir;
  auto *tr = app.add_subcommand("train", "train a model on a preprocessed corpus");
  tr->add_option("--data", data_dir, "preprocessed directory");
  tr->add_option("--out", out_dir, "run directory");
  tf.add(tr);
  tr->callback([&] { run = [&] { return cmd_train(g, tf, data_dir, out_dir); }; });

  auto *sw = app.add_subcommand("sweep", "train over a hyperparameter grid");
  std::string grid = "{}";
  sw->add_option("--data", data_dir, "preprocessed directory");
  sw->add_option("--out", out_dir, "sweep directory");
  sw->add_option("--grid", grid, R"(JSON object, e.g. {"K":[1,2,4],"hidden_units":[100,200]})");
  tf.add(sw);
  sw->callback([&] { run = [&] { return cmd_sweep(g, tf, data_dir, out_dir, grid); }; });

  auto *gen = app.add_subcommand("generate", "decode responses with a checkpoint");
  GenFlags gf;
  gen->add_option("--checkpoint", gf.checkpoint, "checkpoint file");
  gen->add_option("--input", gf.input, "JSONL of raw or prepared records");
  gen->add_option("--out", gf.out, "output JSONL (default stdout)");
  gen->add_option("--beam", gf.beam, "beam width (1 = greedy)");
  gen->add_option("--max-len", gf.max_len, "maximum generated length");
  gen->add_option("--index", gf.index, "index stem used to retrieve for raw rows");
  gen->add_option("--dump-attention", gf.dump_attention, "directory for attention JSON");
  gen->callback([&] { run = [&] { return cmd_generate(g, gf); }; });

  auto *ev = app.add_subcommand("evaluate", "corpus BLEU-4");
  std::string ev_c, ev_r;
  ev->add_option("--candidates", ev_c, "JSONL of generated responses")->required();
  ev->add_option("--references", ev_r, "JSONL of reference responses")->required();
  ev->callback([&] { run = [&] { return cmd_evaluate(ev_c, ev_r); }; });

  auto *ab = app.add_subcommand("ablate", "full model and the three reduced variants");
  std::string ab_out;
  ab->add_option("--data", data_dir, "preprocessed directory");
  ab->add_option("--out", ab_out, "directory for per-variant runs and ablation.json");
  tf.add(ab);
  ab->callback([&] { run = [&] { return cmd_ablate(g, tf, data_dir, ab_out); }; });

  FilterFlags ff;
  auto *fcv = app.add_subcommand("filter-cv", "cross-validate the quality filter");
  fcv->add_option("--gold", ff.gold, "gold JSONL");
  fcv->add_option("--k", ff.k, "folds");
  fcv->add_option("--save-model", ff.save_model, "also fit on all gold rows and save");
  fcv->add_option("--features", ff.features, "random Fourier features (0 = linear)");
  fcv->add_option("--lambda", ff.lambda, "regularization");
  fcv->add_option("--epochs", ff.epochs, "SGD epochs");
  fcv->add_option("--gamma", ff.gamma, "kernel width (0 = median heuristic)");
  fcv->callback([&] { run = [&] { return cmd_filter_cv(g, ff); }; });

  auto *fp = app.add_subcommand("filter-predict", "label reviews with a saved filter");
  fp->add_option("--model", ff.model, "model from filter-cv --save-model");
  fp->add_option("--input", ff.input, "JSONL with review fields");
  fp->add_option("--out", ff.out, "output JSONL (default stdout)");
  fp->callback([&] { run = [&] { return cmd_filter_predict(g, ff); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return run();
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError &e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
