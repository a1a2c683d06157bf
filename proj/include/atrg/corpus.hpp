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

#ifndef ATRG_CORPUS_HPP
#define ATRG_CORPUS_HPP

// Sentence pairs, the TSV corpus format, and the synthetic translation task
// used to induce hallucinations: a deterministic token substitution with local
// reordering, plus a controllable fraction of noise pairs whose targets are
// replaced by unrelated fluent sequences. Rare source tokens are coupled to
// the noise pairs so that, after the ingestion frequency cutoff, the training
// data contains UNK sources aligned with garbage targets.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "atrg/errors.hpp"
#include "atrg/util.hpp"
#include "atrg/vocab.hpp"

namespace atrg {

enum class Split { kTrain, kValid, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    default: return "test";
  }
}

struct SentencePair {
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::optional<double> score;        // DA-like quality score, unitless
  std::vector<int> token_labels;      // per-target-token hallucination labels
  Split split = Split::kTrain;
  bool noisy = false;                 // generator bookkeeping: target replaced

  void validate() const {
    if (source.empty() || target.empty())
      throw DataError("sentence pair: empty token sequence");
    if (!token_labels.empty() && token_labels.size() != target.size())
      throw DataError("sentence pair: label count does not match target length");
  }
};

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

inline std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

// ---------------------------------------------------------------------------
// TSV ingestion: source<TAB>target[<TAB>score]; '#'-prefixed lines ignored.
// ---------------------------------------------------------------------------

inline std::vector<SentencePair> read_tsv(const std::string& path,
                                          Split split = Split::kTrain) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<SentencePair> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        cols.push_back(line.substr(start));
        break;
      }
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    if (cols.size() < 2 || cols.size() > 3)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 2 or 3 columns, got " +
                      std::to_string(cols.size()));
    SentencePair pair;
    pair.source = split_tokens(cols[0]);
    pair.target = split_tokens(cols[1]);
    pair.split = split;
    if (cols.size() == 3) {
      try {
        size_t used = 0;
        pair.score = std::stod(cols[2], &used);
        if (used != cols[2].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad score '" + cols[2] + "'");
      }
    }
    if (pair.source.empty() || pair.target.empty())
      throw DataError(path + ":" + std::to_string(lineno) + ": empty source or target");
    out.push_back(std::move(pair));
  }
  if (out.empty()) throw DataError(path + ": empty corpus file");
  return out;
}

inline void write_tsv(const std::string& path, const std::vector<SentencePair>& pairs,
                      const std::string& header_comment = "") {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file: " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  for (const auto& p : pairs) {
    out << join_tokens(p.source) << '\t' << join_tokens(p.target);
    if (p.score) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6g", *p.score);
      out << '\t' << buf;
    }
    out << '\n';
  }
}

// Digest over the data rows only, so comment headers do not perturb it.
inline uint64_t corpus_digest(const std::vector<SentencePair>& pairs) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& p : pairs) {
    h = fnv1a(join_tokens(p.source), h);
    h = fnv1a("\t", h);
    h = fnv1a(join_tokens(p.target), h);
    h = fnv1a("\n", h);
  }
  return h;
}

// Vocabulary over one side of a pair list with a frequency cutoff; tokens
// below the cutoff fall out and encode as UNK.
inline Vocabulary build_vocabulary(const std::vector<SentencePair>& pairs, bool source_side,
                                   int64_t cutoff = 2) {
  std::unordered_map<std::string, int64_t> counts;
  for (const auto& p : pairs)
    for (const auto& t : source_side ? p.source : p.target) ++counts[t];
  return Vocabulary::from_counts(counts, cutoff);
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

struct SyntheticTaskSpec {
  int64_t vocab_size = 340;        // source token types overall
  int64_t rare_pool_size = 240;    // disjoint rare pool, coupled to noise
  int64_t len_min = 4;
  int64_t len_max = 9;
  uint64_t mapping_seed = 7;       // seeds the substitution permutation
  double noise_ratio = 0.3;        // fraction of train pairs with replaced targets
  double rare_coupling = 1.0;      // fraction of noisy pairs that carry a rare token
  double eval_trigger_fraction = 0.35;  // valid/test pairs given one unseen rare token
  int64_t n_train = 400;
  int64_t n_valid = 120;
  int64_t n_test = 120;
  uint64_t seed = 1;

  void validate() const {
    if (noise_ratio < 0.0 || noise_ratio >= 1.0)
      throw ConfigError("synthetic spec: noise_ratio must be in [0,1)");
    if (rare_pool_size < 1 || rare_pool_size > vocab_size - 4)
      throw ConfigError("synthetic spec: vocabulary too small for requested pools");
    if (len_min < 1 || len_max < len_min) throw ConfigError("synthetic spec: bad length range");
    if (rare_coupling < 0.0 || rare_coupling > 1.0)
      throw ConfigError("synthetic spec: rare_coupling must be in [0,1]");
    if (eval_trigger_fraction < 0.0 || eval_trigger_fraction > 1.0)
      throw ConfigError("synthetic spec: eval_trigger_fraction must be in [0,1]");
    if (n_train < 1 || n_valid < 0 || n_test < 0) throw ConfigError("synthetic spec: bad sizes");
  }
};

struct SyntheticCorpus {
  std::vector<SentencePair> train, valid, test;
};

namespace detail_corpus {

inline std::string src_token(int64_t id) { return "w" + std::to_string(id); }
inline std::string tgt_token(int64_t id) { return "v" + std::to_string(id); }

// The deterministic source->target mapping: substitute through a seeded
// permutation, then reorder adjacent (even, odd) position pairs following a
// seeded swap pattern. Output token t_i therefore depends on the source token
// at a seed-determined position, so the task is not learnable bag-of-words
// style, while staying simple enough to generalize from a small corpus.
struct MappingRule {
  std::vector<int64_t> perm;
  std::vector<bool> swap_window;  // swap pair (2k, 2k+1) iff swap_window[k]

  static MappingRule build(int64_t vocab_size, uint64_t mapping_seed, int64_t max_len = 64) {
    MappingRule rule;
    std::mt19937_64 rng(mapping_seed);
    rule.perm.resize(static_cast<size_t>(vocab_size));
    std::iota(rule.perm.begin(), rule.perm.end(), 0);
    std::shuffle(rule.perm.begin(), rule.perm.end(), rng);
    rule.swap_window.resize(static_cast<size_t>(max_len / 2 + 1));
    for (size_t k = 0; k < rule.swap_window.size(); ++k) rule.swap_window[k] = (rng() & 1) != 0;
    return rule;
  }

  std::vector<int64_t> apply(const std::vector<int64_t>& src_ids) const {
    std::vector<int64_t> tgt;
    tgt.reserve(src_ids.size());
    for (int64_t id : src_ids) tgt.push_back(perm[static_cast<size_t>(id)]);
    for (size_t i = 0; i + 1 < tgt.size(); i += 2) {
      if (swap_window[i / 2]) std::swap(tgt[i], tgt[i + 1]);
    }
    return tgt;
  }
};

}  // namespace detail_corpus

inline SyntheticCorpus generate_synthetic_corpus(const SyntheticTaskSpec& spec) {
  spec.validate();
  using detail_corpus::src_token;
  using detail_corpus::tgt_token;

  detail_corpus::MappingRule rule =
      detail_corpus::MappingRule::build(spec.vocab_size, spec.mapping_seed);

  int64_t frequent = spec.vocab_size - spec.rare_pool_size;
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int64_t> len_dist(spec.len_min, spec.len_max);
  std::uniform_int_distribution<int64_t> freq_dist(0, frequent - 1);

  // Rare ids are consumed in shuffled order; within the training noise pairs
  // each appears at most once, so the ingestion cutoff maps them to UNK.
  std::vector<int64_t> rare_ids(static_cast<size_t>(spec.rare_pool_size));
  std::iota(rare_ids.begin(), rare_ids.end(), frequent);
  std::shuffle(rare_ids.begin(), rare_ids.end(), rng);
  size_t rare_cursor = 0;
  auto next_rare = [&]() {
    int64_t id = rare_ids[rare_cursor % rare_ids.size()];
    ++rare_cursor;
    return id;
  };

  std::unordered_set<std::string> seen_sources;
  auto register_source = [&](const std::vector<int64_t>& ids) {
    std::string key;
    for (int64_t id : ids) key += std::to_string(id) + ",";
    return seen_sources.insert(key).second;
  };
  auto sample_source = [&]() {
    int64_t len = len_dist(rng);
    std::vector<int64_t> ids(static_cast<size_t>(len));
    for (auto& id : ids) id = freq_dist(rng);
    return ids;
  };

  auto ids_to_pair = [&](std::vector<int64_t> src_ids, Split split) {
    SentencePair p;
    p.split = split;
    for (int64_t id : src_ids) p.source.push_back(src_token(id));
    for (int64_t id : rule.apply(src_ids)) p.target.push_back(tgt_token(id));
    return p;
  };

  SyntheticCorpus corpus;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // Train: exact noisy quota by construction.
  int64_t n_noisy = static_cast<int64_t>(std::llround(spec.noise_ratio * static_cast<double>(spec.n_train)));
  std::vector<int> noisy_flag(static_cast<size_t>(spec.n_train), 0);
  for (int64_t i = 0; i < n_noisy; ++i) noisy_flag[static_cast<size_t>(i)] = 1;
  std::shuffle(noisy_flag.begin(), noisy_flag.end(), rng);

  for (int64_t i = 0; i < spec.n_train; ++i) {
    bool noisy = noisy_flag[static_cast<size_t>(i)] != 0;
    std::vector<int64_t> src_ids;
    do {
      src_ids = sample_source();
      if (noisy && unif(rng) < spec.rare_coupling) {
        std::uniform_int_distribution<size_t> pos(0, src_ids.size() - 1);
        src_ids[pos(rng)] = next_rare();
      }
    } while (!register_source(src_ids));
    SentencePair p = ids_to_pair(src_ids, Split::kTrain);
    if (noisy) {
      // Unrelated fluent target: resample from the frequent target images.
      int64_t len = len_dist(rng);
      p.target.clear();
      for (int64_t k = 0; k < len; ++k)
        p.target.push_back(tgt_token(rule.perm[static_cast<size_t>(freq_dist(rng))]));
      p.noisy = true;
    }
    corpus.train.push_back(std::move(p));
  }

  auto gen_eval = [&](int64_t n, Split split, std::vector<SentencePair>& out) {
    for (int64_t i = 0; i < n; ++i) {
      std::vector<int64_t> src_ids;
      do {
        src_ids = sample_source();
        if (unif(rng) < spec.eval_trigger_fraction) {
          std::uniform_int_distribution<size_t> pos(0, src_ids.size() - 1);
          src_ids[pos(rng)] = next_rare();
        }
      } while (!register_source(src_ids));
      out.push_back(ids_to_pair(src_ids, split));
    }
  };
  gen_eval(spec.n_valid, Split::kValid, corpus.valid);
  gen_eval(spec.n_test, Split::kTest, corpus.test);
  return corpus;
}

}  // namespace atrg

#endif  // ATRG_CORPUS_HPP
