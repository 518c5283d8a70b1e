// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Retrieval-augmented pointer-generator network.
 *
 * Three bi-GRU encoders (review, app description, retrieved responses; the
 * K retrieved responses share one encoder) feed a GRU decoder. At each step
 * the decoder state attends over
 *   - the review, producing the fixed-vocabulary distribution,
 *   - the description, producing a copy distribution over its tokens,
 *   - each retrieved response (token level) and then across the K response
 *     contexts (response level), producing a hierarchical copy distribution.
 * A two-way attention over the description and retrieval contexts gives the
 * fusion weight gamma; a sigmoid gate theta mixes the vocabulary
 * distribution with the fused copy distribution over the extended
 * vocabulary.
 *
 * Attention scores are additive: e_j = v^T tanh(W_h h_j + W_s s).
 */
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rrcore/corpus.hpp"
#include "rrcore/errors.hpp"
#include "rrcore/numerics.hpp"

namespace rrcore {

/// Which contextual copy sources take part in decoding.
struct Ablation {
  bool use_description = true;
  bool use_retrieval = true;

  static Ablation full() { return {true, true}; }
  static Ablation no_retrieval() { return {true, false}; }
  static Ablation no_description() { return {false, true}; }
  static Ablation only_review() { return {false, false}; }

  /// Row label used in ablation reports.
  std::string label() const {
    if (use_description && use_retrieval)
      return "CoRe";
    if (use_description)
      return "-Retrieval";
    if (use_retrieval)
      return "-Description";
    return "Only review (NMT)";
  }
  /// Short machine name: full, no-retrieval, no-description, only-review.
  std::string name() const {
    if (use_description && use_retrieval)
      return "full";
    if (use_description)
      return "no-retrieval";
    if (use_retrieval)
      return "no-description";
    return "only-review";
  }
  static Ablation parse(const std::string &s) {
    if (s == "full")
      return full();
    if (s == "no-retrieval" || s == "-retrieval")
      return no_retrieval();
    if (s == "no-description" || s == "-description")
      return no_description();
    if (s == "only-review" || s == "nmt")
      return only_review();
    throw ConfigError("unknown ablation '" + s +
                      "' (expected full, no-retrieval, no-description, only-review)");
  }
  bool operator==(const Ablation &) const = default;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t emb_dim = 100;
  std::size_t hidden = 200;
  std::size_t layers = 1;
  double dropout = 0.1;

  void validate() const {
    if (vocab_size <= kNumSpecials)
      throw ConfigError("vocabulary must contain at least one corpus token");
    if (emb_dim == 0 || hidden == 0 || layers == 0)
      throw ConfigError("emb_dim, hidden and layers must be at least 1");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("dropout must lie in [0, 1)");
  }
  bool operator==(const ModelConfig &) const = default;
};

template <class Real> struct AttentionWeights {
  Tensor<Real> Wh; ///< source_dim x A
  Tensor<Real> Ws; ///< state_dim x A
  Tensor<Real> v;  ///< A x 1

  template <class Rng>
  static AttentionWeights init(std::size_t source_dim, std::size_t state_dim, std::size_t att_dim,
                               Rng &rng) {
    return {xavier<Real>({source_dim, att_dim}, rng), xavier<Real>({state_dim, att_dim}, rng),
            xavier<Real>({att_dim, 1}, rng)};
  }
  AttentionWeights clone() const { return {Wh.clone(), Ws.clone(), v.clone()}; }
};

template <class Real> struct BiGruWeights {
  std::vector<GruWeights<Real>> fwd;
  std::vector<GruWeights<Real>> bwd;

  template <class Rng>
  static BiGruWeights init(std::size_t input, std::size_t hidden, std::size_t layers, Rng &rng) {
    BiGruWeights w;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t in = l == 0 ? input : 2 * hidden;
      w.fwd.push_back(GruWeights<Real>::init(in, hidden, rng));
      w.bwd.push_back(GruWeights<Real>::init(in, hidden, rng));
    }
    return w;
  }
  BiGruWeights clone() const {
    BiGruWeights w;
    for (const auto &g : fwd)
      w.fwd.push_back(g.clone());
    for (const auto &g : bwd)
      w.bwd.push_back(g.clone());
    return w;
  }
};

/// Every learnable weight of the network. One embedding table is shared by
/// all encoders and the decoder.
template <class Real> struct ModelParams {
  ModelConfig config;

  Tensor<Real> embedding; ///< V x E

  BiGruWeights<Real> review_encoder;
  BiGruWeights<Real> description_encoder;
  BiGruWeights<Real> response_encoder;

  std::vector<GruWeights<Real>> decoder; ///< one per layer
  std::vector<Tensor<Real>> bridge_W;    ///< 2H x H, per decoder layer
  std::vector<Tensor<Real>> bridge_b;    ///< 1 x H

  AttentionWeights<Real> att_review;
  AttentionWeights<Real> att_description;
  AttentionWeights<Real> att_token;    ///< token level, inside each retrieved response
  AttentionWeights<Real> att_response; ///< response level, across the K contexts
  AttentionWeights<Real> att_fuse;

  Tensor<Real> out_v;  ///< 3H x H
  Tensor<Real> out_b;  ///< 1 x H
  Tensor<Real> out_v2; ///< H x V
  Tensor<Real> out_b2; ///< 1 x V

  Tensor<Real> gate_f; ///< 2H x 1
  Tensor<Real> gate_s; ///< H x 1
  Tensor<Real> gate_x; ///< E x 1
  Tensor<Real> gate_b; ///< 1 x 1

  std::vector<std::uint8_t> vocab_mask; ///< masks PAD in the vocabulary softmax

  static ModelParams init(const ModelConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t V = cfg.vocab_size, E = cfg.emb_dim, H = cfg.hidden, L = cfg.layers;
    ModelParams p;
    p.config = cfg;
    p.embedding = uniform_tensor<Real>({V, E}, Real(0.1), rng);
    p.review_encoder = BiGruWeights<Real>::init(E, H, L, rng);
    p.description_encoder = BiGruWeights<Real>::init(E, H, L, rng);
    p.response_encoder = BiGruWeights<Real>::init(E, H, L, rng);
    for (std::size_t l = 0; l < L; ++l) {
      p.decoder.push_back(GruWeights<Real>::init(l == 0 ? E : H, H, rng));
      p.bridge_W.push_back(xavier<Real>({2 * H, H}, rng));
      p.bridge_b.push_back(zeros_param<Real>({1, H}));
    }
    p.att_review = AttentionWeights<Real>::init(2 * H, H, H, rng);
    p.att_description = AttentionWeights<Real>::init(2 * H, H, H, rng);
    p.att_token = AttentionWeights<Real>::init(2 * H, H, H, rng);
    p.att_response = AttentionWeights<Real>::init(2 * H, H, H, rng);
    p.att_fuse = AttentionWeights<Real>::init(2 * H, H, H, rng);
    p.out_v = xavier<Real>({3 * H, H}, rng);
    p.out_b = zeros_param<Real>({1, H});
    p.out_v2 = xavier<Real>({H, V}, rng);
    p.out_b2 = zeros_param<Real>({1, V});
    p.gate_f = xavier<Real>({2 * H, 1}, rng);
    p.gate_s = xavier<Real>({H, 1}, rng);
    p.gate_x = xavier<Real>({E, 1}, rng);
    p.gate_b = zeros_param<Real>({1, 1});
    p.build_mask();
    return p;
  }

  /// Calls f(name, tensor) for every parameter in a fixed declaration order.
  template <class F> void visit(F &&f) {
    auto gru = [&](const std::string &pre, GruWeights<Real> &g) {
      f(pre + ".W", g.W);
      f(pre + ".U", g.U);
      f(pre + ".Uh", g.Uh);
      f(pre + ".b", g.b);
    };
    auto bigru = [&](const std::string &pre, BiGruWeights<Real> &b) {
      for (std::size_t l = 0; l < b.fwd.size(); ++l) {
        gru(pre + ".l" + std::to_string(l) + ".fwd", b.fwd[l]);
        gru(pre + ".l" + std::to_string(l) + ".bwd", b.bwd[l]);
      }
    };
    auto att = [&](const std::string &pre, AttentionWeights<Real> &a) {
      f(pre + ".Wh", a.Wh);
      f(pre + ".Ws", a.Ws);
      f(pre + ".v", a.v);
    };
    f(std::string("embedding"), embedding);
    bigru("enc_review", review_encoder);
    bigru("enc_description", description_encoder);
    bigru("enc_response", response_encoder);
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      gru("decoder.l" + std::to_string(l), decoder[l]);
      f("bridge.l" + std::to_string(l) + ".W", bridge_W[l]);
      f("bridge.l" + std::to_string(l) + ".b", bridge_b[l]);
    }
    att("att_review", att_review);
    att("att_description", att_description);
    att("att_token", att_token);
    att("att_response", att_response);
    att("att_fuse", att_fuse);
    f(std::string("out.v"), out_v);
    f(std::string("out.b"), out_b);
    f(std::string("out.v2"), out_v2);
    f(std::string("out.b2"), out_b2);
    f(std::string("gate.f"), gate_f);
    f(std::string("gate.s"), gate_s);
    f(std::string("gate.x"), gate_x);
    f(std::string("gate.b"), gate_b);
  }

  std::vector<std::pair<std::string, Tensor<Real> *>> named() {
    std::vector<std::pair<std::string, Tensor<Real> *>> out;
    visit([&](const std::string &n, Tensor<Real> &t) { out.emplace_back(n, &t); });
    return out;
  }

  std::vector<Tensor<Real>> tensors() {
    std::vector<Tensor<Real>> out;
    visit([&](const std::string &, Tensor<Real> &t) { out.push_back(t); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string &, Tensor<Real> &t) { n += t.size(); });
    return n;
  }

  void zero_grad() {
    visit([](const std::string &, Tensor<Real> &t) { t.zero_grad(); });
  }

  /// Deep copy with independent value and gradient buffers.
  ModelParams clone() const {
    ModelParams p = *this;
    p.visit([](const std::string &, Tensor<Real> &t) { t = t.clone(); });
    return p;
  }

  void build_mask() {
    vocab_mask.assign(config.vocab_size, 1);
    vocab_mask[kPad] = 0;
  }
};

/// Loads whitespace-separated "token v1 ... vE" lines (GloVe text format)
/// into matching embedding rows. Returns the number of rows replaced.
template <class Real>
std::size_t load_pretrained_embeddings(ModelParams<Real> &params, const Vocabulary &vocab,
                                       const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open " + path);
  const std::size_t E = params.config.emb_dim;
  std::size_t loaded = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream is(line);
    std::string tok;
    if (!(is >> tok))
      continue;
    std::vector<Real> row;
    double x;
    while (is >> x)
      row.push_back(static_cast<Real>(x));
    if (row.size() != E)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(E) +
                      " values, got " + std::to_string(row.size()));
    if (auto id = vocab.find(tok)) {
      auto v = params.embedding.values();
      std::copy(row.begin(), row.end(), v.begin() + static_cast<std::ptrdiff_t>(*id * E));
      ++loaded;
    }
  }
  return loaded;
}

// ---------------------------------------------------------------------------
// Encoding

template <class Real> struct SourceMemory {
  Tensor<Real> hiddens;           ///< n x 2H
  Tensor<Real> keys;              ///< n x A, hiddens projected by the attention W_h
  std::vector<std::uint8_t> mask; ///< n
  IdList ids;                     ///< extended-vocabulary ids, for copy aggregation

  bool present() const { return hiddens.defined(); }
  std::size_t length() const { return present() ? hiddens.rows() : 0; }
};

template <class Real> struct EncoderOutputs {
  SourceMemory<Real> review;
  SourceMemory<Real> description;            ///< absent when empty or ablated
  std::vector<SourceMemory<Real>> responses; ///< K slots; empty slots absent
  Tensor<Real> review_final;                 ///< 1 x 2H [forward last | backward first]
  Tensor<Real> description_final;
  std::vector<Tensor<Real>> response_final;
};

/// Maps extended ids (copy-only tokens) to UNK for embedding lookup.
inline IdList embedding_ids(std::span<const TokenId> ids, std::size_t vocab_size) {
  IdList out(ids.begin(), ids.end());
  for (auto &id : out)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      id = kUnk;
  return out;
}

/// Runs a (possibly stacked) bidirectional GRU over `inputs` (n x in).
/// Returns per-position [forward | backward] states of the top layer and
/// the final state [forward at n-1 | backward at 0].
template <class Real>
std::pair<Tensor<Real>, Tensor<Real>> bi_gru(const BiGruWeights<Real> &w, Tensor<Real> inputs) {
  const std::size_t n = inputs.rows();
  if (n == 0)
    throw DataError("cannot encode an empty sequence");
  Tensor<Real> final_state;
  for (std::size_t l = 0; l < w.fwd.size(); ++l) {
    const auto &f = w.fwd[l];
    const auto &b = w.bwd[l];
    const std::size_t H = f.hidden();
    auto gx_f = add(matmul(inputs, f.W), f.b);
    auto gx_b = add(matmul(inputs, b.W), b.b);
    std::vector<Tensor<Real>> fs(n), bs(n);
    Tensor<Real> h(Shape{1, H});
    for (std::size_t t = 0; t < n; ++t)
      fs[t] = h = gru_step(slice_rows(gx_f, t, t + 1), h, f);
    h = Tensor<Real>(Shape{1, H});
    for (std::size_t t = n; t-- > 0;)
      bs[t] = h = gru_step(slice_rows(gx_b, t, t + 1), h, b);
    inputs = concat_cols(concat_rows<Real>(fs), concat_rows<Real>(bs));
    final_state = concat_cols(fs[n - 1], bs[0]);
  }
  return {inputs, final_state};
}

template <class Real, class Rng>
SourceMemory<Real> encode_sequence(const ModelParams<Real> &p, const BiGruWeights<Real> &enc,
                                   const AttentionWeights<Real> &att, std::span<const TokenId> ids,
                                   bool train, Rng &rng, Tensor<Real> *final_state = nullptr) {
  SourceMemory<Real> m;
  if (ids.empty())
    return m;
  auto emb_ids = embedding_ids(ids, p.config.vocab_size);
  auto x = dropout(embedding_lookup<Real, TokenId>(p.embedding, emb_ids), p.config.dropout, train,
                   rng);
  auto [hs, fin] = bi_gru(enc, x);
  m.hiddens = hs;
  m.keys = matmul(hs, att.Wh);
  m.mask.assign(ids.size(), 1);
  m.ids.assign(ids.begin(), ids.end());
  if (final_state)
    *final_state = fin;
  return m;
}

/// Encodes review, description and every retrieved response. Ablated or
/// empty sources come back absent.
template <class Real, class Rng>
EncoderOutputs<Real> encode_sources(const EncodedExample &ex, const ModelParams<Real> &p,
                                    const Ablation &ablation, bool train, Rng &rng) {
  if (ex.vocab_size != p.config.vocab_size)
    throw DataError("example encoded against a vocabulary of size " +
                    std::to_string(ex.vocab_size) + ", model expects " +
                    std::to_string(p.config.vocab_size));
  if (ex.review_ids.empty())
    throw DataError("cannot encode an empty review");
  EncoderOutputs<Real> out;
  out.review = encode_sequence(p, p.review_encoder, p.att_review, ex.review_ids, train, rng,
                               &out.review_final);
  if (ablation.use_description)
    out.description = encode_sequence(p, p.description_encoder, p.att_description,
                                      ex.description_ids, train, rng, &out.description_final);
  out.responses.resize(ex.retrieved_ids.size());
  out.response_final.resize(ex.retrieved_ids.size());
  if (ablation.use_retrieval)
    for (std::size_t k = 0; k < ex.retrieved_ids.size(); ++k)
      out.responses[k] = encode_sequence(p, p.response_encoder, p.att_token, ex.retrieved_ids[k],
                                         train, rng, &out.response_final[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Decoder pieces

template <class Real> struct AttentionResult {
  Tensor<Real> scores;  ///< 1 x n pre-softmax e_j
  Tensor<Real> weights; ///< 1 x n alpha
  Tensor<Real> context; ///< 1 x source_dim
};

/// Additive attention over a memory whose keys are already projected.
template <class Real>
AttentionResult<Real> attend(const SourceMemory<Real> &mem, const Tensor<Real> &state,
                             const AttentionWeights<Real> &w) {
  if (!mem.present())
    throw ShapeError("attention over an absent source");
  auto query = matmul(state, w.Ws);
  auto e = transpose(matmul(tanh(add(mem.keys, query)), w.v));
  auto alpha = masked_softmax(e, std::span<const std::uint8_t>(mem.mask));
  return {e, alpha, matmul(alpha, mem.hiddens)};
}

/// Additive attention computed from raw hidden states.
template <class Real>
AttentionResult<Real> attend(const Tensor<Real> &hiddens, const Tensor<Real> &state,
                             std::span<const std::uint8_t> mask, const AttentionWeights<Real> &w) {
  SourceMemory<Real> mem;
  mem.hiddens = hiddens;
  mem.keys = matmul(hiddens, w.Wh);
  mem.mask = mask.empty() ? std::vector<std::uint8_t>(hiddens.rows(), 1)
                          : std::vector<std::uint8_t>(mask.begin(), mask.end());
  return attend(mem, state, w);
}

/// weight * a + (1 - weight) * b for a 1 x 1 `weight`.
template <class Real>
Tensor<Real> mix(const Tensor<Real> &weight, const Tensor<Real> &a, const Tensor<Real> &b) {
  return add(mul_scalar(a, weight), mul_scalar(b, one_minus(weight)));
}

/// softmax(v'(v [s, c] + b) + b') over the fixed vocabulary with PAD masked.
template <class Real>
Tensor<Real> vocab_dist(const Tensor<Real> &state, const Tensor<Real> &context,
                        const ModelParams<Real> &p) {
  auto hidden = add(matmul(concat_cols(state, context), p.out_v), p.out_b);
  auto logits = add(matmul(hidden, p.out_v2), p.out_b2);
  return masked_softmax(logits, std::span<const std::uint8_t>(p.vocab_mask));
}

template <class Real> struct CopyDist {
  AttentionResult<Real> attention;
  Tensor<Real> dist; ///< 1 x extended_size
};

/// Attention over the description, aggregated by token identity.
template <class Real>
std::optional<CopyDist<Real>> desc_copy_dist(const SourceMemory<Real> &mem,
                                             const Tensor<Real> &state,
                                             const AttentionWeights<Real> &w,
                                             std::size_t extended_size) {
  if (!mem.present())
    return std::nullopt;
  auto att = attend(mem, state, w);
  auto dist = scatter_add_cols<Real, TokenId>(att.weights, mem.ids, extended_size);
  return CopyDist<Real>{att, dist};
}

template <class Real> struct RetrievedCopy {
  std::vector<std::optional<AttentionResult<Real>>> token_level; ///< per response
  AttentionResult<Real> response_level;                          ///< 1 x K weights
  Tensor<Real> dist;                                             ///< 1 x extended_size
};

/// Hierarchical pointer over the K retrieved responses: token-level
/// attention in each response, then attention across the K contexts;
/// P(w) = sum_k beta_k * sum_{i: r_i^k = w} alpha_i^k.
template <class Real>
std::optional<RetrievedCopy<Real>> retrieved_copy_dist(
    std::span<const SourceMemory<Real>> responses, const Tensor<Real> &state,
    const AttentionWeights<Real> &token_att, const AttentionWeights<Real> &response_att,
    std::size_t extended_size, std::size_t context_dim) {
  const std::size_t K = responses.size();
  RetrievedCopy<Real> out;
  out.token_level.resize(K);
  std::vector<Tensor<Real>> contexts, dists;
  std::vector<std::uint8_t> mask(K, 0);
  bool any = false;
  for (std::size_t k = 0; k < K; ++k) {
    if (!responses[k].present()) {
      contexts.emplace_back(Shape{1, context_dim});
      dists.emplace_back(Shape{1, extended_size});
      continue;
    }
    any = true;
    mask[k] = 1;
    auto att = attend(responses[k], state, token_att);
    contexts.push_back(att.context);
    dists.push_back(scatter_add_cols<Real, TokenId>(att.weights, responses[k].ids, extended_size));
    out.token_level[k] = att;
  }
  if (!any)
    return std::nullopt;
  auto stacked = concat_rows<Real>(contexts);
  out.response_level = attend(stacked, state, mask, response_att);
  out.dist = matmul(out.response_level.weights, concat_rows<Real>(dists));
  return out;
}

template <class Real> struct Fusion {
  AttentionResult<Real> attention; ///< weights (gamma, 1 - gamma)
  Tensor<Real> gamma;              ///< 1 x 1
  Tensor<Real> dist;               ///< gamma P_d + (1 - gamma) P_r
};

/// Attention over [c_d; c_r]. An absent side is masked, so gamma collapses
/// onto the present source. Returns nullopt when both are absent.
template <class Real>
std::optional<Fusion<Real>> fuse(const std::optional<CopyDist<Real>> &desc,
                                 const std::optional<RetrievedCopy<Real>> &ret,
                                 const Tensor<Real> &state, const AttentionWeights<Real> &w,
                                 std::size_t extended_size, std::size_t context_dim) {
  if (!desc && !ret)
    return std::nullopt;
  Tensor<Real> c_d = desc ? desc->attention.context : Tensor<Real>(Shape{1, context_dim});
  Tensor<Real> c_r = ret ? ret->response_level.context : Tensor<Real>(Shape{1, context_dim});
  Tensor<Real> p_d = desc ? desc->dist : Tensor<Real>(Shape{1, extended_size});
  Tensor<Real> p_r = ret ? ret->dist : Tensor<Real>(Shape{1, extended_size});
  const std::uint8_t mask[2] = {std::uint8_t(desc ? 1 : 0), std::uint8_t(ret ? 1 : 0)};
  const Tensor<Real> rows[] = {c_d, c_r};
  Fusion<Real> f;
  f.attention = attend(concat_rows<Real>(rows), state, mask, w);
  f.gamma = pick(f.attention.weights, 0);
  f.dist = mix(f.gamma, p_d, p_r);
  return f;
}

/// theta = sigmoid(w_f c_fuse + w_s s + w_x x + b); returns 1 x 1.
template <class Real>
Tensor<Real> generation_gate(const Tensor<Real> &c_fuse, const Tensor<Real> &state,
                             const Tensor<Real> &x, const ModelParams<Real> &p) {
  auto z = add(add(matmul(c_fuse, p.gate_f), matmul(state, p.gate_s)), matmul(x, p.gate_x));
  return sigmoid(add(z, p.gate_b));
}

/// P = theta * P_vocab + (1 - theta) * P_fuse on the extended support.
/// Without a fused copy distribution P is P_vocab padded with zeros.
template <class Real>
Tensor<Real> final_dist(const Tensor<Real> &p_vocab, const Tensor<Real> *p_fuse,
                        const Tensor<Real> *theta, std::size_t extended_size) {
  auto padded = pad_cols(p_vocab, extended_size);
  if (!p_fuse)
    return padded;
  return mix(*theta, padded, *p_fuse);
}

template <class Real> struct DecoderStepOutput {
  std::vector<Tensor<Real>> states; ///< per decoder layer
  Tensor<Real> state;               ///< s_t, top layer
  Tensor<Real> input;               ///< x_t, decoder input embedding
  AttentionResult<Real> review;
  std::optional<CopyDist<Real>> description;
  std::optional<RetrievedCopy<Real>> retrieved;
  std::optional<Fusion<Real>> fusion;
  Tensor<Real> theta; ///< undefined when no copy source is present
  Tensor<Real> p_vocab;
  Tensor<Real> p_final;
};

template <class Real>
std::vector<Tensor<Real>> initial_states(const EncoderOutputs<Real> &enc,
                                         const ModelParams<Real> &p) {
  std::vector<Tensor<Real>> s;
  for (std::size_t l = 0; l < p.decoder.size(); ++l)
    s.push_back(tanh(add(matmul(enc.review_final, p.bridge_W[l]), p.bridge_b[l])));
  return s;
}

/// One decoder step from the previous states and the previous output token
/// (extended ids are fed back through the UNK embedding).
template <class Real, class Rng>
DecoderStepOutput<Real> decoder_step(const ModelParams<Real> &p, const EncoderOutputs<Real> &enc,
                                     const std::vector<Tensor<Real>> &prev_states,
                                     TokenId prev_token, std::size_t extended_size, bool train,
                                     Rng &rng) {
  const std::size_t C = 2 * p.config.hidden;
  DecoderStepOutput<Real> out;
  const TokenId in_id =
      (prev_token >= 0 && static_cast<std::size_t>(prev_token) < p.config.vocab_size) ? prev_token
                                                                                      : kUnk;
  out.input = dropout(embedding_lookup<Real, TokenId>(p.embedding, std::span(&in_id, 1)),
                      p.config.dropout, train, rng);
  Tensor<Real> layer_in = out.input;
  for (std::size_t l = 0; l < p.decoder.size(); ++l) {
    out.states.push_back(gru_cell(layer_in, prev_states[l], p.decoder[l]));
    layer_in = out.states.back();
  }
  out.state = out.states.back();

  out.review = attend(enc.review, out.state, p.att_review);
  out.p_vocab =
      vocab_dist(dropout(out.state, p.config.dropout, train, rng), out.review.context, p);

  out.description = desc_copy_dist(enc.description, out.state, p.att_description, extended_size);
  out.retrieved = retrieved_copy_dist<Real>(enc.responses, out.state, p.att_token,
                                            p.att_response, extended_size, C);
  out.fusion = fuse(out.description, out.retrieved, out.state, p.att_fuse, extended_size, C);
  if (out.fusion) {
    out.theta = generation_gate(out.fusion->attention.context, out.state, out.input, p);
    out.p_final = final_dist(out.p_vocab, &out.fusion->dist, &out.theta, extended_size);
  } else {
    out.p_final = final_dist<Real>(out.p_vocab, nullptr, nullptr, extended_size);
  }
  return out;
}

template <class Real> struct ForwardResult {
  Tensor<Real> loss;
  std::vector<DecoderStepOutput<Real>> steps; ///< filled when requested
};

/// Teacher-forced negative log-likelihood averaged over target tokens.
template <class Real, class Rng>
ForwardResult<Real> forward_loss(const EncodedExample &ex, const ModelParams<Real> &p,
                                 const Ablation &ablation, bool train, Rng &rng,
                                 bool keep_steps = false) {
  const auto &target = ex.response_ids;
  if (target.empty() ||
      std::all_of(target.begin(), target.end(), [](TokenId t) { return t == kPad; }))
    throw DataError("target sequence is empty or all padding");
  const std::size_t ext = ex.extended_size();
  for (TokenId t : target)
    if (t < 0 || static_cast<std::size_t>(t) >= ext)
      throw DataError("target id " + std::to_string(t) + " outside the extended vocabulary");

  auto enc = encode_sources(ex, p, ablation, train, rng);
  auto states = initial_states(enc, p);
  ForwardResult<Real> res;
  std::vector<Tensor<Real>> terms;
  terms.reserve(target.size());
  TokenId prev = kSos;
  for (TokenId y : target) {
    auto step = decoder_step(p, enc, states, prev, ext, train, rng);
    if (y != kPad)
      terms.push_back(log(pick(step.p_final, static_cast<std::size_t>(y)), Real(1e-12)));
    states = step.states;
    prev = y;
    if (keep_steps)
      res.steps.push_back(std::move(step));
  }
  res.loss = scale(add_n<Real>(terms), Real(-1) / static_cast<Real>(terms.size()));
  return res;
}

} // namespace rrcore
