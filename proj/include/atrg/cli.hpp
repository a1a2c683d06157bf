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

#ifndef ATRG_CLI_HPP
#define ATRG_CLI_HPP

// Command implementations behind the CLI: corpus generation, training and
// fine-tuning, attribution dumps, perturbation sweeps, the token classifier,
// and the aggregate report. Each command stages its outputs and commits them
// atomically; a failure leaves no partial artifacts. Every artifact embeds the
// corpus digest and seed, and the report refuses to mix mismatched ones.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atrg/attribution.hpp"
#include "atrg/corpus.hpp"
#include "atrg/errors.hpp"
#include "atrg/gbdt.hpp"
#include "atrg/lab.hpp"
#include "atrg/loss.hpp"
#include "atrg/model.hpp"
#include "atrg/stats.hpp"
#include "atrg/trainer.hpp"
#include "atrg/util.hpp"

namespace atrg {

// ---------------------------------------------------------------------------
// Config file: flat TOML-style `key = value` lines, '#' comments.
// ---------------------------------------------------------------------------

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    KeyValueConfig cfg;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      std::string value = trim(t.substr(eq + 1));
      if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      int64_t v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not an integer: " + it->second);
    }
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not a number: " + it->second);
    }
  }
  std::vector<int64_t> get_int_list(const std::string& key,
                                    const std::vector<int64_t>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int64_t> out;
    std::stringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (part.empty()) continue;
      try {
        out.push_back(std::stoll(part));
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad list entry: " + part);
      }
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
  }

  // Canonical digest over sorted key=value lines.
  uint64_t digest() const {
    uint64_t h = 14695981039346656037ull;
    for (const auto& [k, v] : values_) {
      h = fnv1a(k, h);
      h = fnv1a("=", h);
      h = fnv1a(v, h);
      h = fnv1a("\n", h);
    }
    return h;
  }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

struct RunConfig {
  KeyValueConfig kv;
  std::string corpus_dir;
  std::string model_in;
  std::string out_dir;
  std::string attributions_path;
  std::string run_dir;
  std::string mode = "ce";  // or "ce+attr"
  std::optional<uint64_t> seed_override;
  std::optional<double> lambda_override;

  uint64_t seed() const {
    if (seed_override) return *seed_override;
    return static_cast<uint64_t>(kv.get_int("seed", 1));
  }

  SyntheticTaskSpec synth_spec() const {
    SyntheticTaskSpec s;
    s.vocab_size = kv.get_int("synth.vocab_size", 340);
    s.rare_pool_size = kv.get_int("synth.rare_pool_size", 240);
    s.len_min = kv.get_int("synth.len_min", 4);
    s.len_max = kv.get_int("synth.len_max", 9);
    s.mapping_seed = static_cast<uint64_t>(kv.get_int("synth.mapping_seed", 7));
    s.noise_ratio = kv.get_double("synth.noise_ratio", 0.3);
    s.rare_coupling = kv.get_double("synth.rare_coupling", 1.0);
    s.eval_trigger_fraction = kv.get_double("synth.eval_trigger_fraction", 0.35);
    s.n_train = kv.get_int("synth.n_train", 400);
    s.n_valid = kv.get_int("synth.n_valid", 120);
    s.n_test = kv.get_int("synth.n_test", 120);
    s.seed = seed();
    return s;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.embed_dim = kv.get_int("model.embed_dim", 64);
    m.enc_layers = kv.get_int("model.enc_layers", 2);
    m.dec_layers = kv.get_int("model.dec_layers", 2);
    m.heads = kv.get_int("model.heads", 4);
    m.ffn_dim = kv.get_int("model.ffn_dim", 128);
    m.dropout = kv.get_double("model.dropout", 0.1);
    m.max_len = kv.get_int("model.max_len", 32);
    m.seed = seed();
    return m;
  }

  TrainingConfig training_config() const {
    TrainingConfig t;
    t.lambda_attr = lambda_override ? *lambda_override : kv.get_double("train.lambda", 5.0);
    t.label_smoothing = kv.get_double("train.label_smoothing", 0.1);
    t.dropout = kv.get_double("train.dropout", 0.3);
    t.weight_decay = kv.get_double("train.weight_decay", 1e-4);
    t.beta1 = kv.get_double("train.beta1", 0.9);
    t.beta2 = kv.get_double("train.beta2", 0.98);
    t.base_lr = kv.get_double("train.base_lr", 2e-3);
    t.warmup_steps = kv.get_int("train.warmup_steps", 100);
    t.max_epochs = kv.get_int("train.max_epochs", 30);
    t.batch_size = kv.get_int("train.batch_size", 16);
    t.patience = kv.get_int("train.patience", 5);
    t.early_stop_metric = kv.get_string("train.early_stop_metric", "halluc_rate");
    t.halluc_bleu_threshold = kv.get_double("train.halluc_bleu_threshold", 25.0);
    t.attr_fraction = kv.get_double("train.attr_fraction", 1.0);
    t.seed = seed();
    return t;
  }

  EnsembleConfig ensemble_config() const {
    EnsembleConfig e;
    e.estimators = kv.get_int("ensemble.estimators", 15);
    e.max_depth = kv.get_int("ensemble.max_depth", 6);
    e.row_subsample = kv.get_double("ensemble.row_subsample", 0.8);
    e.col_subsample = kv.get_double("ensemble.col_subsample", 0.8);
    e.min_child_weight = kv.get_double("ensemble.min_child_weight", 3.0);
    e.reg_lambda = kv.get_double("ensemble.reg_lambda", 1.0);
    e.reg_alpha = kv.get_double("ensemble.reg_alpha", 1.0);
    e.learning_rate = kv.get_double("ensemble.learning_rate", 0.3);
    e.early_stopping_rounds = kv.get_int("ensemble.early_stopping_rounds", 5);
    e.seed = seed();
    return e;
  }

  int64_t vocab_cutoff() const { return kv.get_int("ingest.vocab_cutoff", 2); }
  int64_t ig_steps() const { return kv.get_int("attribute.ig_steps", 1); }
  std::vector<int64_t> perturb_positions() const {
    return kv.get_int_list("perturb.positions", {0, 1, 2, 3, 4, 6, 8});
  }
  int64_t perturb_max_sentences() const { return kv.get_int("perturb.max_sentences", 200); }
  double classifier_val_fraction() const { return kv.get_double("ensemble.val_fraction", 0.3); }

  uint64_t config_digest() const { return kv.digest() ^ (seed() * 1099511628211ull); }
};

// ---------------------------------------------------------------------------
// Atomic artifact staging: write to <path>.tmp, commit renames everything.
// ---------------------------------------------------------------------------

class OutputStager {
 public:
  explicit OutputStager(const std::string& dir) : dir_(dir) {
    std::filesystem::create_directories(dir_);
  }

  ~OutputStager() {
    for (const auto& [tmp, final_path] : staged_) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
    }
  }

  std::string stage(const std::string& name) {
    std::string tmp = (std::filesystem::path(dir_) / (name + ".tmp")).string();
    std::string final_path = (std::filesystem::path(dir_) / name).string();
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }

  void commit() {
    for (const auto& [tmp, final_path] : staged_) {
      std::filesystem::rename(tmp, final_path);
    }
    staged_.clear();
  }

  const std::string& dir() const { return dir_; }

 private:
  std::string dir_;
  std::vector<std::pair<std::string, std::string>> staged_;
};

// ---------------------------------------------------------------------------
// Corpus artifacts
// ---------------------------------------------------------------------------

struct LoadedCorpus {
  std::vector<SentencePair> train, valid, test;
  uint64_t digest = 0;

  std::vector<SentencePair> all() const {
    std::vector<SentencePair> out = train;
    out.insert(out.end(), valid.begin(), valid.end());
    out.insert(out.end(), test.begin(), test.end());
    return out;
  }
};

inline uint64_t combined_corpus_digest(const std::vector<SentencePair>& train,
                                       const std::vector<SentencePair>& valid,
                                       const std::vector<SentencePair>& test) {
  uint64_t h = corpus_digest(train);
  h = h * 1099511628211ull ^ corpus_digest(valid);
  h = h * 1099511628211ull ^ corpus_digest(test);
  return h;
}

inline LoadedCorpus load_corpus_dir(const std::string& dir) {
  LoadedCorpus c;
  c.train = read_tsv((std::filesystem::path(dir) / "train.tsv").string(), Split::kTrain);
  c.valid = read_tsv((std::filesystem::path(dir) / "valid.tsv").string(), Split::kValid);
  c.test = read_tsv((std::filesystem::path(dir) / "test.tsv").string(), Split::kTest);
  c.digest = combined_corpus_digest(c.train, c.valid, c.test);
  return c;
}

// ---------------------------------------------------------------------------
// Model artifacts: model.bin + vocab files + meta.json + metrics.jsonl
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& m) {
  return {{"embed_dim", m.embed_dim}, {"enc_layers", m.enc_layers},
          {"dec_layers", m.dec_layers}, {"heads", m.heads},
          {"ffn_dim", m.ffn_dim},       {"dropout", m.dropout},
          {"max_len", m.max_len},       {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.embed_dim = j.at("embed_dim").get<int64_t>();
  m.enc_layers = j.at("enc_layers").get<int64_t>();
  m.dec_layers = j.at("dec_layers").get<int64_t>();
  m.heads = j.at("heads").get<int64_t>();
  m.ffn_dim = j.at("ffn_dim").get<int64_t>();
  m.dropout = j.at("dropout").get<double>();
  m.max_len = j.at("max_len").get<int64_t>();
  m.seed = j.at("seed").get<uint64_t>();
  return m;
}

inline void save_model_dir(OutputStager& stager, const Model& model, const TrainResult& result,
                           const RunConfig& run, uint64_t corpus_digest, const std::string& mode) {
  model.save_params(stager.stage("model.bin"));
  model.source_vocab().save(stager.stage("src.vocab"));
  model.target_vocab().save(stager.stage("tgt.vocab"));

  nlohmann::json meta = {
      {"model_config", model_config_json(model.config())},
      {"seed", run.seed()},
      {"config_digest", hex64(run.config_digest())},
      {"corpus_digest", hex64(corpus_digest)},
      {"mode", mode},
      {"final_lr", result.final_lr},
      {"best_epoch", result.best_epoch},
      {"best_val", result.best_val},
      {"aborted", result.aborted},
      {"epochs_run", result.epochs.size()},
  };
  {
    std::ofstream out(stager.stage("meta.json"));
    out << meta.dump(2) << "\n";
  }
  {
    std::ofstream out(stager.stage("metrics.jsonl"));
    for (const auto& em : result.epochs) {
      nlohmann::json j = {{"epoch", em.epoch},   {"ce", em.ce},
                          {"attr", em.attr},     {"total", em.total},
                          {"lr", em.lr},         {"val_metric", em.val_metric},
                          {"wallclock", em.wallclock_s}};
      out << j.dump() << "\n";
    }
  }
}

struct LoadedModel {
  ModelConfig config;
  nlohmann::json meta;
  std::unique_ptr<Model> model;
};

inline LoadedModel load_model_dir(const std::string& dir) {
  auto meta_path = (std::filesystem::path(dir) / "meta.json").string();
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("cannot open model metadata: " + meta_path);
  nlohmann::json meta = nlohmann::json::parse(meta_in, nullptr, true);
  LoadedModel lm;
  lm.config = model_config_from_json(meta.at("model_config"));
  lm.meta = meta;
  Vocabulary src = Vocabulary::load((std::filesystem::path(dir) / "src.vocab").string());
  Vocabulary tgt = Vocabulary::load((std::filesystem::path(dir) / "tgt.vocab").string());
  lm.model = std::make_unique<Model>(lm.config, std::move(src), std::move(tgt));
  lm.model->load_params((std::filesystem::path(dir) / "model.bin").string());
  return lm;
}

// ---------------------------------------------------------------------------
// Attribution dump (JSONL, one sentence per line)
// ---------------------------------------------------------------------------

struct SentenceAttribution {
  std::vector<std::string> source_tokens;
  std::vector<std::string> decoded_tokens;
  AttributionMatrix matrix;
  AttributionFeatures features;
  double sentence_bleu_vs_ref = 0.0;
  int label = -1;  // 1 hallucinated, 0 clean, -1 middle band
};

inline nlohmann::json attribution_to_json(const SentenceAttribution& a, uint64_t corpus_digest,
                                          uint64_t seed) {
  nlohmann::json steps = nlohmann::json::array();
  for (int64_t t = 0; t < a.matrix.timesteps; ++t) {
    steps.push_back({{"source", a.matrix.source_scores[static_cast<size_t>(t)]},
                     {"target", a.matrix.target_scores[static_cast<size_t>(t)]}});
  }
  std::vector<int> src_mask;
  for (bool b : a.matrix.source_mask) src_mask.push_back(b ? 1 : 0);
  return {{"source_tokens", a.source_tokens},
          {"decoded_tokens", a.decoded_tokens},
          {"timesteps", steps},
          {"source_mask", src_mask},
          {"features",
           {{"source_entropy", a.features.source_entropy},
            {"target_entropy", a.features.target_entropy},
            {"source_gradient", a.features.source_gradient},
            {"target_gradient", a.features.target_gradient}}},
          {"sentence_bleu", a.sentence_bleu_vs_ref},
          {"label", a.label},
          {"corpus_digest", hex64(corpus_digest)},
          {"seed", seed}};
}

inline SentenceAttribution attribution_from_json(const nlohmann::json& j) {
  SentenceAttribution a;
  a.source_tokens = j.at("source_tokens").get<std::vector<std::string>>();
  a.decoded_tokens = j.at("decoded_tokens").get<std::vector<std::string>>();
  const auto& steps = j.at("timesteps");
  a.matrix.timesteps = static_cast<int64_t>(steps.size());
  for (const auto& s : steps) {
    a.matrix.source_scores.push_back(s.at("source").get<std::vector<double>>());
    a.matrix.target_scores.push_back(s.at("target").get<std::vector<double>>());
  }
  a.matrix.source_len =
      a.matrix.source_scores.empty() ? 0 : static_cast<int64_t>(a.matrix.source_scores[0].size());
  for (int v : j.at("source_mask").get<std::vector<int>>())
    a.matrix.source_mask.push_back(v != 0);
  for (int64_t t = 0; t < a.matrix.timesteps; ++t)
    a.matrix.target_mask.emplace_back(static_cast<size_t>(t + 1), false);
  const auto& f = j.at("features");
  a.features.source_entropy = f.at("source_entropy").get<double>();
  a.features.target_entropy = f.at("target_entropy").get<double>();
  a.features.source_gradient = f.at("source_gradient").get<double>();
  a.features.target_gradient = f.at("target_gradient").get<double>();
  a.sentence_bleu_vs_ref = j.at("sentence_bleu").get<double>();
  a.label = j.at("label").get<int>();
  return a;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen(const RunConfig& run) {
  SyntheticTaskSpec spec = run.synth_spec();
  SyntheticCorpus corpus = generate_synthetic_corpus(spec);
  OutputStager stager(run.out_dir);
  std::string header = "atrg synthetic corpus seed=" + std::to_string(spec.seed) +
                       " config_digest=" + hex64(run.config_digest());
  write_tsv(stager.stage("train.tsv"), corpus.train, header + " split=train");
  write_tsv(stager.stage("valid.tsv"), corpus.valid, header + " split=valid");
  write_tsv(stager.stage("test.tsv"), corpus.test, header + " split=test");
  stager.commit();
  return 0;
}

inline int cmd_train(const RunConfig& run) {
  LoadedCorpus corpus = load_corpus_dir(run.corpus_dir);
  Vocabulary src_vocab = build_vocabulary(corpus.train, true, run.vocab_cutoff());
  Vocabulary tgt_vocab = build_vocabulary(corpus.train, false, run.vocab_cutoff());
  Model model(run.model_config(), std::move(src_vocab), std::move(tgt_vocab));

  TrainingConfig tc = run.training_config();
  TrainMode mode = run.mode == "ce+attr" ? TrainMode::kCeAttr : TrainMode::kCeOnly;
  TrainResult result = train(model, corpus.train, corpus.valid, tc, mode);
  if (result.aborted) throw NumericError("training diverged: " + result.abort_reason);

  OutputStager stager(run.out_dir);
  save_model_dir(stager, model, result, run, corpus.digest, train_mode_name(mode));
  stager.commit();
  return 0;
}

inline int cmd_finetune(const RunConfig& run) {
  LoadedCorpus corpus = load_corpus_dir(run.corpus_dir);
  LoadedModel lm = load_model_dir(run.model_in);
  if (lm.meta.contains("corpus_digest") &&
      lm.meta.at("corpus_digest").get<std::string>() != hex64(corpus.digest))
    throw DataError("finetune: model was trained on a different corpus");

  TrainingConfig tc = run.training_config();
  // Resume the learning rate from the last epoch before fine-tuning; the
  // scheduler itself restarts.
  if (!run.kv.has("train.base_lr") && lm.meta.contains("final_lr")) {
    double prior = lm.meta.at("final_lr").get<double>();
    if (prior > 0.0) tc.base_lr = prior;
  }
  TrainMode mode = run.mode == "ce+attr" ? TrainMode::kCeAttr : TrainMode::kCeOnly;
  TrainResult result = train(*lm.model, corpus.train, corpus.valid, tc, mode);
  if (result.aborted) throw NumericError("fine-tuning diverged: " + result.abort_reason);

  OutputStager stager(run.out_dir);
  save_model_dir(stager, *lm.model, result, run, corpus.digest, train_mode_name(mode));
  stager.commit();
  return 0;
}

// Attribution of the model's own decodes over the test split, with features,
// per-sentence BLEU against the reference, and the score-band label.
inline int cmd_attribute(const RunConfig& run) {
  LoadedCorpus corpus = load_corpus_dir(run.corpus_dir);
  LoadedModel lm = load_model_dir(run.model_in);
  Model& model = *lm.model;
  model.set_training(false);
  int64_t steps = run.ig_steps();

  const auto& pairs = corpus.test;
  std::vector<SentenceAttribution> results(pairs.size());
  parallel_for(pairs.size(), [&](size_t i) {
    const SentencePair& p = pairs[i];
    SentenceAttribution a;
    a.source_tokens = p.source;
    auto src_ids = model.encode_source(p.source);
    auto decoded_ids = model.greedy_decode_ids(src_ids);
    for (int64_t id : decoded_ids) a.decoded_tokens.push_back(model.target_vocab().decode(id));
    std::vector<int64_t> tgt_ids = decoded_ids;
    tgt_ids.push_back(kEosId);
    a.matrix = steps <= 1 ? one_step_attribution(model, src_ids, tgt_ids)
                          : integrated_gradients(model, src_ids, tgt_ids, steps);
    a.features = extract_features(a.matrix);
    a.sentence_bleu_vs_ref = sentence_bleu(a.decoded_tokens, p.target);
    a.label = a.sentence_bleu_vs_ref < 25.0 ? 1 : (a.sentence_bleu_vs_ref > 85.0 ? 0 : -1);
    results[i] = std::move(a);
  });

  OutputStager stager(run.out_dir);
  {
    std::ofstream out(stager.stage("attributions.jsonl"));
    for (const auto& a : results)
      out << attribution_to_json(a, corpus.digest, run.seed()).dump() << "\n";
  }
  stager.commit();
  return 0;
}

inline int cmd_perturb(const RunConfig& run) {
  LoadedCorpus corpus = load_corpus_dir(run.corpus_dir);
  LoadedModel lm = load_model_dir(run.model_in);
  Model& model = *lm.model;
  model.set_training(false);

  auto clean = exact_match_subset(model, corpus.test, run.perturb_max_sentences());
  if (clean.size() < 5)
    throw DataError("perturb: fewer than 5 exactly-decoded sentences to perturb");
  auto positions = run.perturb_positions();
  std::string frequent = most_frequent_source_token(corpus.train);

  auto unk_curve = degradation_curve(model, clean, kUnkToken, positions, "unk");
  auto freq_curve = degradation_curve(model, clean, frequent, positions, "frequent");

  OutputStager stager(run.out_dir);
  {
    std::ofstream out(stager.stage("curves.csv"));
    out << "# atrg degradation curves seed=" << run.seed()
        << " corpus_digest=" << hex64(corpus.digest) << " frequent_token=" << frequent << "\n";
    out << "position,token_kind,mean_bleu,n\n";
    for (const auto* curve : {&unk_curve, &freq_curve})
      for (const auto& pt : curve->points) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%lld,%s,%.6f,%lld", (long long)pt.position,
                      curve->token_kind.c_str(), pt.mean_bleu, (long long)pt.n);
        out << buf << "\n";
      }
  }
  stager.commit();
  return 0;
}

inline std::vector<SentenceAttribution> read_attribution_dump(const std::string& path,
                                                              std::string* corpus_digest_hex =
                                                                  nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open attribution dump: " + path);
  std::vector<SentenceAttribution> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    if (corpus_digest_hex && corpus_digest_hex->empty() && j.contains("corpus_digest"))
      *corpus_digest_hex = j.at("corpus_digest").get<std::string>();
    out.push_back(attribution_from_json(j));
  }
  if (out.empty()) throw DataError(path + ": empty attribution dump");
  return out;
}

// Token-level classifier over the four per-timestep features. Sentences keep
// their band labels; tokens inherit the sentence label.
inline int cmd_classify(const RunConfig& run) {
  std::string digest_hex;
  auto dump = read_attribution_dump(run.attributions_path, &digest_hex);

  std::vector<size_t> positives, negatives;
  for (size_t i = 0; i < dump.size(); ++i) {
    if (dump[i].matrix.timesteps < 1) continue;
    if (dump[i].label == 1) positives.push_back(i);
    if (dump[i].label == 0) negatives.push_back(i);
  }
  if (positives.size() < 2 || negatives.size() < 2)
    throw DataError("classify: need at least two sentences of each class, got " +
                    std::to_string(positives.size()) + " hallucinated and " +
                    std::to_string(negatives.size()) + " clean");

  // Sentence-level stratified split: token rows of one sentence never
  // straddle the split, and both classes appear on both sides.
  std::mt19937_64 rng(run.seed() ^ 0xc1a551f1ull);
  std::vector<size_t> train_set, val_set;
  for (auto* cls : {&positives, &negatives}) {
    std::shuffle(cls->begin(), cls->end(), rng);
    size_t val_n = std::max<size_t>(
        1, static_cast<size_t>(std::llround(run.classifier_val_fraction() *
                                            static_cast<double>(cls->size()))));
    val_n = std::min(val_n, cls->size() - 1);  // keep at least one for training
    val_set.insert(val_set.end(), cls->begin(), cls->begin() + static_cast<int64_t>(val_n));
    train_set.insert(train_set.end(), cls->begin() + static_cast<int64_t>(val_n), cls->end());
  }
  std::sort(train_set.begin(), train_set.end());
  std::sort(val_set.begin(), val_set.end());

  auto build_rows = [&](const std::vector<size_t>& idx, std::vector<std::vector<double>>& rows,
                        std::vector<int>& labels) {
    for (size_t i : idx) {
      const auto& a = dump[i];
      for (int64_t t = 0; t < a.matrix.timesteps; ++t) {
        auto f = extract_token_features(a.matrix, t);
        rows.push_back(
            {f.source_entropy, f.target_entropy, f.source_gradient, f.target_gradient});
        labels.push_back(a.label);
      }
    }
  };
  std::vector<std::vector<double>> train_rows, val_rows;
  std::vector<int> train_labels, val_labels;
  build_rows(train_set, train_rows, train_labels);
  build_rows(val_set, val_rows, val_labels);

  EnsembleConfig ec = run.ensemble_config();
  GbdtClassifier clf = GbdtClassifier::fit(train_rows, train_labels, ec, val_rows, val_labels);
  double val_f1 = f1_score(clf.predict_labels(val_rows), val_labels);
  double all_positive_f1 =
      f1_score(std::vector<int>(val_labels.size(), 1), val_labels);

  OutputStager stager(run.out_dir);
  {
    nlohmann::json j = clf.to_json();
    j["val_f1"] = val_f1;
    j["all_positive_baseline_f1"] = all_positive_f1;
    j["corpus_digest"] = digest_hex;
    j["seed"] = run.seed();
    std::ofstream out(stager.stage("classifier.json"));
    out << j.dump(2) << "\n";
  }
  {
    // Annotated outputs: token flags per sentence, plus a plain-text render
    // with predicted-hallucination tokens wrapped in *stars*.
    std::ofstream jout(stager.stage("annotated.jsonl"));
    std::ofstream tout(stager.stage("annotated.txt"));
    for (const auto& a : dump) {
      std::vector<int> flags;
      std::string rendered;
      for (int64_t t = 0; t < a.matrix.timesteps; ++t) {
        auto f = extract_token_features(a.matrix, t);
        int flag = clf.predict_proba(
                       {f.source_entropy, f.target_entropy, f.source_gradient,
                        f.target_gradient}) >= 0.5
                       ? 1
                       : 0;
        flags.push_back(flag);
        std::string tok = t < static_cast<int64_t>(a.decoded_tokens.size())
                              ? a.decoded_tokens[static_cast<size_t>(t)]
                              : std::string(kEosToken);
        if (!rendered.empty()) rendered += ' ';
        rendered += flag ? "*" + tok + "*" : tok;
      }
      nlohmann::json j = {{"source", join_tokens(a.source_tokens)},
                          {"decoded", join_tokens(a.decoded_tokens)},
                          {"flags", flags},
                          {"label", a.label}};
      jout << j.dump() << "\n";
      tout << rendered << "\n";
    }
  }
  stager.commit();
  return 0;
}

// Aggregates the artifacts of a full run into one summary JSON.
inline int cmd_report(const RunConfig& run) {
  namespace fs = std::filesystem;
  fs::path root(run.run_dir);
  LoadedCorpus corpus = load_corpus_dir((root / "corpus").string());
  std::string expect_digest = hex64(corpus.digest);

  auto check_digest = [&](const nlohmann::json& j, const std::string& what) {
    if (j.contains("corpus_digest") &&
        j.at("corpus_digest").get<std::string>() != expect_digest)
      throw DataError("report: corpus digest mismatch in " + what);
  };

  LoadedModel base = load_model_dir((root / "base").string());
  LoadedModel after = load_model_dir((root / "ft_attr").string());
  check_digest(base.meta, "base model");
  check_digest(after.meta, "fine-tuned model");
  base.model->set_training(false);
  after.model->set_training(false);

  // Per-sentence decodes and BLEU on the test split for both models.
  const auto& test = corpus.test;
  std::vector<double> bleu_before(test.size()), bleu_after(test.size());
  parallel_for(test.size(), [&](size_t i) {
    bleu_before[i] = sentence_bleu(base.model->greedy_decode(test[i].source), test[i].target);
    bleu_after[i] = sentence_bleu(after.model->greedy_decode(test[i].source), test[i].target);
  });

  auto rate = [&](const std::vector<double>& bleus) {
    int64_t bad = 0;
    for (double b : bleus) bad += b < 25.0 ? 1 : 0;
    return static_cast<double>(bad) / static_cast<double>(bleus.size());
  };

  // Subsets fixed by the base model's quality bands.
  std::vector<size_t> halluc_idx, clean_idx;
  for (size_t i = 0; i < test.size(); ++i) {
    if (bleu_before[i] < 25.0) halluc_idx.push_back(i);
    if (bleu_before[i] > 85.0) clean_idx.push_back(i);
  }
  auto corpus_bleu_of = [&](const std::vector<size_t>& idx, const Model&,
                            const std::vector<double>&, bool use_after) {
    if (idx.empty()) return 0.0;
    std::vector<std::vector<std::string>> hyps, refs;
    Model& m = use_after ? *after.model : *base.model;
    for (size_t i : idx) {
      hyps.push_back(m.greedy_decode(test[i].source));
      refs.push_back(test[i].target);
    }
    return corpus_bleu(hyps, refs);
  };
  std::vector<size_t> all_idx(test.size());
  for (size_t i = 0; i < test.size(); ++i) all_idx[i] = i;

  // Feature means by subset from the attribution dump of the base model.
  std::string dump_digest;
  auto dump = read_attribution_dump((root / "attr_base" / "attributions.jsonl").string(),
                                    &dump_digest);
  if (!dump_digest.empty() && dump_digest != expect_digest)
    throw DataError("report: corpus digest mismatch in attribution dump");
  auto feature_means = [&](int label) {
    nlohmann::json j;
    double se = 0, te = 0, sg = 0, tg = 0;
    int64_t n = 0;
    for (const auto& a : dump) {
      if (a.label != label) continue;
      se += a.features.source_entropy;
      te += a.features.target_entropy;
      sg += a.features.source_gradient;
      tg += a.features.target_gradient;
      ++n;
    }
    if (n == 0) return nlohmann::json{{"count", 0}};
    return nlohmann::json{{"count", n},
                          {"source_entropy", se / static_cast<double>(n)},
                          {"target_entropy", te / static_cast<double>(n)},
                          {"source_gradient", sg / static_cast<double>(n)},
                          {"target_gradient", tg / static_cast<double>(n)}};
  };

  // Curves from the perturbation CSV.
  nlohmann::json curves = nlohmann::json::object();
  {
    auto path = (root / "perturb" / "curves.csv").string();
    std::ifstream in(path);
    if (!in) throw DataError("report: missing curves: " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.rfind("position,", 0) == 0) continue;
      std::stringstream ss(line);
      std::string pos, kind, bleu, n;
      std::getline(ss, pos, ',');
      std::getline(ss, kind, ',');
      std::getline(ss, bleu, ',');
      std::getline(ss, n, ',');
      if (!curves.contains(kind)) curves[kind] = nlohmann::json::array();
      curves[kind].push_back({{"position", std::stoll(pos)},
                              {"mean_bleu", std::stod(bleu)},
                              {"n", std::stoll(n)}});
    }
  }

  // Classifier summary, when present.
  nlohmann::json classifier = nlohmann::json::object();
  {
    auto path = (root / "clf" / "classifier.json").string();
    std::ifstream in(path);
    if (in) {
      nlohmann::json j = nlohmann::json::parse(in);
      check_digest(j, "classifier");
      classifier["val_f1"] = j.at("val_f1");
      classifier["all_positive_baseline_f1"] = j.at("all_positive_baseline_f1");
      classifier["trees"] = j.at("trees").size();
    }
  }

  nlohmann::json report = {
      {"hallucination_rate_before", rate(bleu_before)},
      {"hallucination_rate_after", rate(bleu_after)},
      {"bleu",
       {{"before",
         {{"overall", corpus_bleu_of(all_idx, *base.model, bleu_before, false)},
          {"halluc", corpus_bleu_of(halluc_idx, *base.model, bleu_before, false)},
          {"clean", corpus_bleu_of(clean_idx, *base.model, bleu_before, false)}}},
        {"after",
         {{"overall", corpus_bleu_of(all_idx, *after.model, bleu_after, true)},
          {"halluc", corpus_bleu_of(halluc_idx, *after.model, bleu_after, true)},
          {"clean", corpus_bleu_of(clean_idx, *after.model, bleu_after, true)}}}}},
      {"feature_means",
       {{"hallucinated", feature_means(1)}, {"correct", feature_means(0)}}},
      {"curves", curves},
      {"classifier", classifier},
      {"subset_sizes",
       {{"test", test.size()}, {"halluc", halluc_idx.size()}, {"clean", clean_idx.size()}}},
      {"corpus_digest", expect_digest},
      {"config_digest", hex64(run.config_digest())},
      {"seed", run.seed()},
  };

  OutputStager stager(run.out_dir.empty() ? run.run_dir : run.out_dir);
  {
    std::ofstream out(stager.stage("report.json"));
    out << report.dump(2) << "\n";
  }
  stager.commit();
  return 0;
}

}  // namespace atrg

#endif  // ATRG_CLI_HPP
