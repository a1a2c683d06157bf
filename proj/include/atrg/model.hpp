// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ATRG_MODEL_HPP
#define ATRG_MODEL_HPP

// Minimal pre-norm transformer encoder-decoder translator. Small enough for
// minutes-scale CPU training, structured enough to hallucinate under noisy
// data. Exposes per-timestep log-probabilities and the pre-positional token
// embeddings of both source and target prefix as differentiable inputs, which
// is what the attribution machinery differentiates against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "atrg/corpus.hpp"
#include "atrg/errors.hpp"
#include "atrg/tensor.hpp"
#include "atrg/util.hpp"
#include "atrg/vocab.hpp"

namespace atrg {

struct ModelConfig {
  int64_t embed_dim = 64;
  int64_t enc_layers = 2;
  int64_t dec_layers = 2;
  int64_t heads = 4;
  int64_t ffn_dim = 128;
  double dropout = 0.1;
  int64_t max_len = 32;
  uint64_t seed = 1;

  void validate() const {
    if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
      throw ConfigError("model config: embedding width must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0,1)");
    if (max_len < 2) throw ConfigError("model config: max length must be >= 2");
    if (enc_layers < 1 || dec_layers < 1 || ffn_dim < 1)
      throw ConfigError("model config: layer sizes must be positive");
  }

  // Architecture digest: shape-determining fields only, so retraining with a
  // different dropout or seed still loads into the same architecture.
  uint64_t digest() const {
    std::string s = "embed=" + std::to_string(embed_dim) + ";enc=" + std::to_string(enc_layers) +
                    ";dec=" + std::to_string(dec_layers) + ";heads=" + std::to_string(heads) +
                    ";ffn=" + std::to_string(ffn_dim) + ";maxlen=" + std::to_string(max_len);
    return fnv1a(s);
  }
};

struct ModelOutput {
  Tensor log_probs;                  // T x Vt, each row a log-distribution
  std::vector<int64_t> gold;         // realized (gold) target ids, length T
  Tensor src_embeddings;             // S x D, pre-positional, graph-attached
  Tensor prefix_embeddings;          // T x D, pre-positional, graph-attached
};

class Model {
 public:
  Model(ModelConfig cfg, Vocabulary src_vocab, Vocabulary tgt_vocab)
      : cfg_(cfg),
        src_vocab_(std::move(src_vocab)),
        tgt_vocab_(std::move(tgt_vocab)),
        dropout_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ull) {
    cfg_.validate();
    embed_scale_ = std::sqrt(static_cast<double>(cfg_.embed_dim));
    init_params();
    build_positional();
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& source_vocab() const { return src_vocab_; }
  const Vocabulary& target_vocab() const { return tgt_vocab_; }

  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }
  void set_dropout(double rate) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout must be in [0,1)");
    cfg_.dropout = rate;
  }
  void reseed_dropout(uint64_t seed) { dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ull); }

  size_t param_count() const { return params_.size(); }
  const Tensor& param(size_t i) const { return params_[i]; }
  const std::string& param_name(size_t i) const { return param_names_[i]; }
  void set_param(size_t i, Tensor t) {
    if (t.shape() != params_[i].shape())
      throw ShapeError("set_param: shape mismatch for " + param_names_[i]);
    params_[i] = std::move(t);
  }
  std::vector<Tensor> snapshot_params() const { return params_; }
  void restore_params(const std::vector<Tensor>& snap) {
    if (snap.size() != params_.size()) throw ShapeError("restore_params: count mismatch");
    params_ = snap;
  }

  uint64_t vocab_digest() const {
    uint64_t h = src_vocab_.digest();
    return fnv1a("|", h) ^ (tgt_vocab_.digest() * 1099511628211ull);
  }

  // --- encoding helpers ---

  std::vector<int64_t> encode_source(const std::vector<std::string>& tokens) const {
    auto ids = src_vocab_.encode(tokens);
    ids.push_back(kEosId);
    return ids;
  }
  std::vector<int64_t> encode_target(const std::vector<std::string>& tokens) const {
    auto ids = tgt_vocab_.encode(tokens);
    ids.push_back(kEosId);
    return ids;
  }

  // --- forward passes ---

  // Teacher-forced pass: source ids and gold target ids, both EOS-terminated.
  // Optional overrides replace the looked-up token embeddings while keeping
  // masks and positions from the real ids (used by attribution baselines and
  // path interpolation).
  ModelOutput forward_teacher_forced(const std::vector<int64_t>& src_ids,
                                     const std::vector<int64_t>& tgt_ids,
                                     const Tensor& src_override = Tensor(),
                                     const Tensor& prefix_override = Tensor()) {
    check_sequence(src_ids, "source");
    check_sequence(tgt_ids, "target");
    int64_t t_len = static_cast<int64_t>(tgt_ids.size());

    std::vector<int64_t> dec_in;
    dec_in.reserve(tgt_ids.size());
    dec_in.push_back(kBosId);
    dec_in.insert(dec_in.end(), tgt_ids.begin(), tgt_ids.end() - 1);

    auto [enc_out, src_emb] = encode(src_ids, src_override);
    auto [log_probs, prefix_emb] = decode(dec_in, enc_out, src_ids, prefix_override);

    ModelOutput out;
    out.log_probs = log_probs;
    out.gold = tgt_ids;
    out.src_embeddings = src_emb;
    out.prefix_embeddings = prefix_emb;
    (void)t_len;
    return out;
  }

  // Greedy autoregressive decode; stops at EOS or max_steps. The returned
  // sequence excludes BOS and never contains PAD.
  std::vector<int64_t> greedy_decode_ids(const std::vector<int64_t>& src_ids,
                                         int64_t max_steps = -1) {
    check_sequence(src_ids, "source");
    if (max_steps < 0) max_steps = cfg_.max_len - 1;
    max_steps = std::min<int64_t>(max_steps, cfg_.max_len - 1);

    // Only touch the flag when it is set, so eval-mode decoding stays free of
    // writes and is safe to fan out across threads.
    bool was_training = training_;
    if (was_training) training_ = false;
    NoGradGuard guard;
    auto [enc_out, src_emb] = encode(src_ids, Tensor());
    (void)src_emb;

    std::vector<int64_t> prefix = {kBosId};
    std::vector<int64_t> out;
    for (int64_t step = 0; step < max_steps; ++step) {
      auto [log_probs, pe] = decode(prefix, enc_out, src_ids, Tensor());
      (void)pe;
      int64_t last = static_cast<int64_t>(prefix.size()) - 1;
      int64_t vt = tgt_vocab_.size();
      int64_t best = -1;
      double best_score = -1e300;
      for (int64_t v = 0; v < vt; ++v) {
        if (v == kPadId || v == kBosId) continue;  // never emitted
        double s = log_probs.at(last, v);
        if (s > best_score) {
          best_score = s;
          best = v;
        }
      }
      if (best == kEosId) break;
      out.push_back(best);
      prefix.push_back(best);
    }
    if (was_training) training_ = true;
    return out;
  }

  std::vector<std::string> greedy_decode(const std::vector<std::string>& src_tokens,
                                         int64_t max_steps = -1) {
    auto ids = greedy_decode_ids(encode_source(src_tokens), max_steps);
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int64_t id : ids) out.push_back(tgt_vocab_.decode(id));
    return out;
  }

  // Baseline embeddings per the uninformative input convention: an all-PAD
  // source and a BOS-then-PAD prefix, recomputed from the current tables.
  Tensor baseline_source_embeddings(int64_t length) {
    std::vector<int64_t> pads(static_cast<size_t>(length), kPadId);
    NoGradGuard guard;
    return gather_rows(params_[src_embed_], pads);
  }
  Tensor baseline_prefix_embeddings(int64_t length) {
    std::vector<int64_t> ids(static_cast<size_t>(length), kPadId);
    if (length > 0) ids[0] = kBosId;
    NoGradGuard guard;
    return gather_rows(params_[tgt_embed_], ids);
  }

  // Embedding lookups exposed for attribution interpolation.
  Tensor source_embedding_rows(const std::vector<int64_t>& ids) {
    return gather_rows(params_[src_embed_], ids);
  }
  Tensor target_embedding_rows(const std::vector<int64_t>& ids) {
    return gather_rows(params_[tgt_embed_], ids);
  }

  // --- persistence ---

  static constexpr uint32_t kFormatVersion = 1;

  void save_params(const std::string& path) const {
    BinaryWriter w(path);
    w.write_bytes("ATRG", 4);
    w.write_u32(kFormatVersion);
    w.write_u64(cfg_.digest());
    w.write_u64(vocab_digest());
    for (const auto& p : params_) w.write_f64_block(p.data());
    if (!w.good()) throw DataError("failed writing model file: " + path);
  }

  void load_params(const std::string& path) {
    BinaryReader r(path);
    char magic[4];
    r.read_bytes(magic, 4);
    if (std::string(magic, 4) != "ATRG") throw DataError("bad magic in model file: " + path);
    uint32_t version = r.read_u32();
    if (version != kFormatVersion)
      throw DataError("unsupported model file version " + std::to_string(version));
    uint64_t cfg_digest = r.read_u64();
    if (cfg_digest != cfg_.digest()) throw DataError("model file: config digest mismatch");
    uint64_t vdigest = r.read_u64();
    if (vdigest != vocab_digest()) throw DataError("model file: vocabulary digest mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      std::vector<double> buf(params_[i].data().size());
      r.read_f64_block(buf);
      params_[i] = Tensor::leaf(params_[i].shape(), std::move(buf), true);
    }
    if (!r.at_eof()) throw DataError("model file: trailing bytes");
  }

 private:
  struct AttnIdx {
    size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct LnIdx {
    size_t gain, bias;
  };
  struct FfnIdx {
    size_t w1, b1, w2, b2;
  };
  struct EncLayerIdx {
    LnIdx ln1;
    AttnIdx attn;
    LnIdx ln2;
    FfnIdx ffn;
  };
  struct DecLayerIdx {
    LnIdx ln1;
    AttnIdx self_attn;
    LnIdx ln2;
    AttnIdx cross_attn;
    LnIdx ln3;
    FfnIdx ffn;
  };

  size_t add_param(const std::string& name, Shape shape, std::mt19937_64& rng, double bound) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    if (bound > 0.0) {
      std::uniform_real_distribution<double> unif(-bound, bound);
      for (auto& v : data) v = unif(rng);
    }
    params_.push_back(Tensor::leaf(std::move(shape), std::move(data), true));
    param_names_.push_back(name);
    return params_.size() - 1;
  }
  size_t add_const_param(const std::string& name, Shape shape, double value) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)), value);
    params_.push_back(Tensor::leaf(std::move(shape), std::move(data), true));
    param_names_.push_back(name);
    return params_.size() - 1;
  }

  AttnIdx add_attention(const std::string& prefix, std::mt19937_64& rng) {
    int64_t d = cfg_.embed_dim;
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    AttnIdx a;
    a.wq = add_param(prefix + ".wq", {d, d}, rng, bound);
    a.bq = add_param(prefix + ".bq", {d}, rng, 0.0);
    a.wk = add_param(prefix + ".wk", {d, d}, rng, bound);
    a.bk = add_param(prefix + ".bk", {d}, rng, 0.0);
    a.wv = add_param(prefix + ".wv", {d, d}, rng, bound);
    a.bv = add_param(prefix + ".bv", {d}, rng, 0.0);
    a.wo = add_param(prefix + ".wo", {d, d}, rng, bound);
    a.bo = add_param(prefix + ".bo", {d}, rng, 0.0);
    return a;
  }
  LnIdx add_layer_norm(const std::string& prefix) {
    LnIdx l;
    l.gain = add_const_param(prefix + ".gain", {cfg_.embed_dim}, 1.0);
    l.bias = add_const_param(prefix + ".bias", {cfg_.embed_dim}, 0.0);
    return l;
  }
  FfnIdx add_ffn(const std::string& prefix, std::mt19937_64& rng) {
    int64_t d = cfg_.embed_dim, f = cfg_.ffn_dim;
    FfnIdx x;
    x.w1 = add_param(prefix + ".w1", {d, f}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    x.b1 = add_param(prefix + ".b1", {f}, rng, 0.0);
    x.w2 = add_param(prefix + ".w2", {f, d}, rng, 1.0 / std::sqrt(static_cast<double>(f)));
    x.b2 = add_param(prefix + ".b2", {d}, rng, 0.0);
    return x;
  }

  void init_params() {
    std::mt19937_64 rng(cfg_.seed);
    int64_t d = cfg_.embed_dim;
    double emb_bound = 1.0 / std::sqrt(static_cast<double>(d));
    src_embed_ = add_param("src_embed", {src_vocab_.size(), d}, rng, emb_bound);
    tgt_embed_ = add_param("tgt_embed", {tgt_vocab_.size(), d}, rng, emb_bound);
    for (int64_t l = 0; l < cfg_.enc_layers; ++l) {
      std::string p = "enc." + std::to_string(l);
      EncLayerIdx layer;
      layer.ln1 = add_layer_norm(p + ".ln1");
      layer.attn = add_attention(p + ".attn", rng);
      layer.ln2 = add_layer_norm(p + ".ln2");
      layer.ffn = add_ffn(p + ".ffn", rng);
      enc_layers_.push_back(layer);
    }
    enc_final_ln_ = add_layer_norm("enc.final_ln");
    for (int64_t l = 0; l < cfg_.dec_layers; ++l) {
      std::string p = "dec." + std::to_string(l);
      DecLayerIdx layer;
      layer.ln1 = add_layer_norm(p + ".ln1");
      layer.self_attn = add_attention(p + ".self_attn", rng);
      layer.ln2 = add_layer_norm(p + ".ln2");
      layer.cross_attn = add_attention(p + ".cross_attn", rng);
      layer.ln3 = add_layer_norm(p + ".ln3");
      layer.ffn = add_ffn(p + ".ffn", rng);
      dec_layers_.push_back(layer);
    }
    dec_final_ln_ = add_layer_norm("dec.final_ln");
    out_proj_ = add_param("out_proj", {d, tgt_vocab_.size()}, rng,
                          1.0 / std::sqrt(static_cast<double>(d)));
    out_bias_ = add_param("out_bias", {tgt_vocab_.size()}, rng, 0.0);
  }

  void build_positional() {
    int64_t l = cfg_.max_len, d = cfg_.embed_dim;
    std::vector<double> pe(static_cast<size_t>(l * d));
    for (int64_t pos = 0; pos < l; ++pos) {
      for (int64_t i = 0; i < d; i += 2) {
        double angle = static_cast<double>(pos) /
                       std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        pe[static_cast<size_t>(pos * d + i)] = std::sin(angle);
        if (i + 1 < d) pe[static_cast<size_t>(pos * d + i + 1)] = std::cos(angle);
      }
    }
    positional_ = Tensor::leaf({l, d}, std::move(pe));
  }

  // Sequences end with EOS; trailing PAD beyond the EOS is tolerated (and
  // invisible under attention masking).
  void check_sequence(const std::vector<int64_t>& ids, const char* what) const {
    if (ids.empty()) throw DataError(std::string(what) + " sequence is empty");
    if (static_cast<int64_t>(ids.size()) > cfg_.max_len)
      throw DataError(std::string(what) + " sequence too long: " + std::to_string(ids.size()) +
                      " > max length " + std::to_string(cfg_.max_len));
    size_t last = ids.size();
    while (last > 0 && ids[last - 1] == kPadId) --last;
    if (last == 0 || ids[last - 1] != kEosId)
      throw DataError(std::string(what) + " sequence must end with EOS");
  }

  const Tensor& P(size_t i) const { return params_[i]; }

  uint64_t next_dropout_seed() { return dropout_rng_(); }

  Tensor maybe_dropout(const Tensor& x) {
    if (!training_ || cfg_.dropout == 0.0) return x;
    return dropout(x, cfg_.dropout, next_dropout_seed());
  }

  // Additive attention bias: 0 allowed, -1e9 masked. Masked columns underflow
  // to exact zeros after the softmax shift, so PAD keys are invisible.
  static Tensor pad_mask_bias(int64_t rows, const std::vector<int64_t>& key_ids) {
    int64_t cols = static_cast<int64_t>(key_ids.size());
    std::vector<double> bias(static_cast<size_t>(rows * cols), 0.0);
    for (int64_t j = 0; j < cols; ++j) {
      if (key_ids[static_cast<size_t>(j)] == kPadId)
        for (int64_t i = 0; i < rows; ++i) bias[static_cast<size_t>(i * cols + j)] = -1e9;
    }
    return Tensor::leaf({rows, cols}, std::move(bias));
  }

  static Tensor causal_mask_bias(int64_t len, const std::vector<int64_t>& key_ids) {
    std::vector<double> bias(static_cast<size_t>(len * len), 0.0);
    for (int64_t i = 0; i < len; ++i)
      for (int64_t j = 0; j < len; ++j)
        if (j > i || key_ids[static_cast<size_t>(j)] == kPadId)
          bias[static_cast<size_t>(i * len + j)] = -1e9;
    return Tensor::leaf({len, len}, std::move(bias));
  }

  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const Tensor& bias,
                   const AttnIdx& a) {
    int64_t dh = cfg_.embed_dim / cfg_.heads;
    Tensor q = add(matmul(q_in, P(a.wq)), P(a.bq));
    Tensor k = add(matmul(kv_in, P(a.wk)), P(a.bk));
    Tensor v = add(matmul(kv_in, P(a.wv)), P(a.bv));
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg_.heads));
    for (int64_t h = 0; h < cfg_.heads; ++h) {
      Tensor qh = narrow(q, 1, h * dh, dh);
      Tensor kh = narrow(k, 1, h * dh, dh);
      Tensor vh = narrow(v, 1, h * dh, dh);
      Tensor scores = add(mul(matmul(qh, transpose(kh)), Tensor::scalar(scale)), bias);
      Tensor attn = softmax_rows(scores);
      attn = maybe_dropout(attn);
      heads.push_back(matmul(attn, vh));
    }
    Tensor cat = concat(heads, 1);
    return add(matmul(cat, P(a.wo)), P(a.bo));
  }

  Tensor ln(const Tensor& x, const LnIdx& l) { return layer_norm(x, P(l.gain), P(l.bias)); }

  Tensor ffn(const Tensor& x, const FfnIdx& f) {
    Tensor h = gelu(add(matmul(x, P(f.w1)), P(f.b1)));
    return add(matmul(h, P(f.w2)), P(f.b2));
  }

  Tensor embed_and_position(const Tensor& emb, int64_t len) {
    double scale = embed_scale_;
    Tensor x = add(mul(emb, Tensor::scalar(scale)), narrow(positional_, 0, 0, len));
    return maybe_dropout(x);
  }

  std::pair<Tensor, Tensor> encode(const std::vector<int64_t>& src_ids,
                                   const Tensor& src_override) {
    int64_t s_len = static_cast<int64_t>(src_ids.size());
    Tensor emb =
        src_override.defined() ? src_override : gather_rows(params_[src_embed_], src_ids);
    if (emb.shape() != Shape{s_len, cfg_.embed_dim})
      throw ShapeError("source embedding override has wrong shape");
    Tensor x = embed_and_position(emb, s_len);
    Tensor bias = pad_mask_bias(s_len, src_ids);
    for (const auto& layer : enc_layers_) {
      Tensor normed = ln(x, layer.ln1);
      x = add(x, maybe_dropout(attention(normed, normed, bias, layer.attn)));
      x = add(x, maybe_dropout(ffn(ln(x, layer.ln2), layer.ffn)));
    }
    return {ln(x, enc_final_ln_), emb};
  }

  std::pair<Tensor, Tensor> decode(const std::vector<int64_t>& dec_in_ids, const Tensor& enc_out,
                                   const std::vector<int64_t>& src_ids,
                                   const Tensor& prefix_override) {
    int64_t t_len = static_cast<int64_t>(dec_in_ids.size());
    if (t_len > cfg_.max_len) throw DataError("target prefix too long");
    Tensor emb = prefix_override.defined() ? prefix_override
                                           : gather_rows(params_[tgt_embed_], dec_in_ids);
    if (emb.shape() != Shape{t_len, cfg_.embed_dim})
      throw ShapeError("prefix embedding override has wrong shape");
    Tensor x = embed_and_position(emb, t_len);
    Tensor self_bias = causal_mask_bias(t_len, dec_in_ids);
    Tensor cross_bias = pad_mask_bias(t_len, src_ids);
    for (const auto& layer : dec_layers_) {
      Tensor normed = ln(x, layer.ln1);
      x = add(x, maybe_dropout(attention(normed, normed, self_bias, layer.self_attn)));
      x = add(x, maybe_dropout(
                     attention(ln(x, layer.ln2), enc_out, cross_bias, layer.cross_attn)));
      x = add(x, maybe_dropout(ffn(ln(x, layer.ln3), layer.ffn)));
    }
    Tensor logits = add(matmul(ln(x, dec_final_ln_), P(out_proj_)), P(out_bias_));
    return {log_softmax_rows(logits), emb};
  }

  ModelConfig cfg_;
  Vocabulary src_vocab_;
  Vocabulary tgt_vocab_;
  std::vector<Tensor> params_;
  std::vector<std::string> param_names_;
  size_t src_embed_ = 0, tgt_embed_ = 0;
  std::vector<EncLayerIdx> enc_layers_;
  std::vector<DecLayerIdx> dec_layers_;
  LnIdx enc_final_ln_{}, dec_final_ln_{};
  size_t out_proj_ = 0, out_bias_ = 0;
  Tensor positional_;
  double embed_scale_ = 1.0;  // set from config at construction
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

}  // namespace atrg

#endif  // ATRG_MODEL_HPP
