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

#ifndef ATRG_LAB_HPP
#define ATRG_LAB_HPP

// Perturbation-trigger experiments and the quality-score machinery: inserting
// UNK or a frequent token into clean sentences and measuring BLEU degradation
// by insertion position, score-threshold subset selection, OOV score
// statistics, and the sentence-level hallucination rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "atrg/bleu.hpp"
#include "atrg/corpus.hpp"
#include "atrg/errors.hpp"
#include "atrg/model.hpp"
#include "atrg/util.hpp"

namespace atrg {

struct PerturbationSpec {
  enum class TokenKind { kUnk, kFrequent };
  TokenKind kind = TokenKind::kUnk;
  std::string frequent_token;       // the analog of the paper's frequent filler
  std::vector<int64_t> positions;   // insertion sweep

  void validate() const {
    for (int64_t p : positions)
      if (p < 0) throw ConfigError("perturbation spec: negative position");
    if (kind == TokenKind::kFrequent && frequent_token.empty())
      throw ConfigError("perturbation spec: frequent token not set");
  }

  std::string token() const {
    return kind == TokenKind::kUnk ? std::string(kUnkToken) : frequent_token;
  }
  const char* kind_name() const { return kind == TokenKind::kUnk ? "unk" : "frequent"; }
};

// Returns a copy with `token` inserted at `position`; the original input is
// untouched. position == size() appends.
inline std::vector<std::string> perturb_source(const std::vector<std::string>& tokens,
                                               const std::string& token, int64_t position) {
  if (position < 0 || position > static_cast<int64_t>(tokens.size()))
    throw DataError("perturb_source: position " + std::to_string(position) +
                    " beyond length " + std::to_string(tokens.size()));
  std::vector<std::string> out;
  out.reserve(tokens.size() + 1);
  out.insert(out.end(), tokens.begin(), tokens.begin() + position);
  out.push_back(token);
  out.insert(out.end(), tokens.begin() + position, tokens.end());
  return out;
}

// Most frequent non-special source token of a pair list (the "e" analog).
inline std::string most_frequent_source_token(const std::vector<SentencePair>& pairs) {
  std::unordered_map<std::string, int64_t> counts;
  for (const auto& p : pairs)
    for (const auto& t : p.source) ++counts[t];
  std::string best;
  int64_t best_count = -1;
  for (const auto& [tok, cnt] : counts) {
    if (tok == kPadToken || tok == kBosToken || tok == kEosToken || tok == kUnkToken) continue;
    if (cnt > best_count || (cnt == best_count && tok < best)) {
      best = tok;
      best_count = cnt;
    }
  }
  if (best.empty()) throw DataError("no non-special source token found");
  return best;
}

// Sentences the model currently translates exactly (decode == reference),
// capped; these are the "clean" sentences the perturbation sweep starts from.
inline std::vector<SentencePair> exact_match_subset(Model& model,
                                                    const std::vector<SentencePair>& pairs,
                                                    int64_t cap = 200) {
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    if (static_cast<int64_t>(out.size()) >= cap) break;
    if (static_cast<int64_t>(p.source.size()) + 2 > model.config().max_len) continue;
    if (model.greedy_decode(p.source) == p.target) out.push_back(p);
  }
  return out;
}

struct DegradationPoint {
  int64_t position = 0;
  double mean_bleu = 0.0;
  int64_t n = 0;
};

struct DegradationCurve {
  std::string token_kind;
  std::vector<DegradationPoint> points;
};

// Mean sentence BLEU of the perturbed decode against the unperturbed decode
// as reference, per insertion position. Control mode (empty token) decodes
// the unperturbed sentence and scores 100 everywhere by construction.
inline DegradationCurve degradation_curve(Model& model,
                                          const std::vector<SentencePair>& sentences,
                                          const std::string& token,
                                          const std::vector<int64_t>& positions,
                                          const std::string& kind_name) {
  DegradationCurve curve;
  curve.token_kind = kind_name;
  for (int64_t pos : positions) {
    DegradationPoint point;
    point.position = pos;
    double acc = 0.0;
    int64_t n = 0;
    for (const auto& p : sentences) {
      if (pos > static_cast<int64_t>(p.source.size())) continue;
      if (static_cast<int64_t>(p.source.size()) + 3 > model.config().max_len) continue;
      auto reference = model.greedy_decode(p.source);
      if (reference.empty()) continue;
      auto perturbed_tokens =
          token.empty() ? p.source : perturb_source(p.source, token, pos);
      auto hyp = model.greedy_decode(perturbed_tokens);
      acc += sentence_bleu(hyp, reference);
      ++n;
    }
    point.mean_bleu = n > 0 ? acc / static_cast<double>(n) : 0.0;
    point.n = n;
    curve.points.push_back(point);
  }
  return curve;
}

// Strict score-threshold buckets: score < low is hallucinated, score > high
// is clean, everything in [low, high] belongs to neither.
inline std::pair<std::vector<SentencePair>, std::vector<SentencePair>> select_by_score(
    const std::vector<SentencePair>& corpus, double low = 25.0, double high = 85.0) {
  std::vector<SentencePair> halluc, clean;
  for (const auto& p : corpus) {
    if (!p.score) throw DataError("select_by_score: sentence without score");
    if (*p.score < low)
      halluc.push_back(p);
    else if (*p.score > high)
      clean.push_back(p);
  }
  return {halluc, clean};
}

// Fraction of sentences whose greedy decode scores below the BLEU threshold
// against the reference.
inline double hallucination_rate(Model& model, const std::vector<SentencePair>& pairs,
                                 double threshold = 25.0) {
  if (pairs.empty()) throw DataError("hallucination_rate: no evaluation pairs");
  int64_t bad = 0;
  for (const auto& p : pairs) {
    auto hyp = model.greedy_decode(p.source);
    if (sentence_bleu(hyp, p.target) < threshold) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(pairs.size());
}

struct OovGroupStats {
  int64_t count = 0;
  double mean_score = 0.0;
  std::vector<int64_t> histogram;  // 10 bins over [0,100], clamped
};

struct OovScoreStats {
  OovGroupStats with_oov;
  OovGroupStats without_oov;
};

// Score summaries grouped by whether the encoded source contains at least one
// OOV (UNK) token under the given vocabulary.
inline OovScoreStats oov_score_stats(const std::vector<SentencePair>& corpus,
                                     const Vocabulary& src_vocab) {
  OovScoreStats stats;
  stats.with_oov.histogram.assign(10, 0);
  stats.without_oov.histogram.assign(10, 0);
  for (const auto& p : corpus) {
    if (!p.score) throw DataError("oov_score_stats: sentence without score");
    bool has_oov = false;
    for (const auto& t : p.source)
      if (src_vocab.encode(t) == kUnkId) has_oov = true;
    OovGroupStats& g = has_oov ? stats.with_oov : stats.without_oov;
    ++g.count;
    g.mean_score += *p.score;
    int bin = static_cast<int>(std::clamp(*p.score, 0.0, 99.999) / 10.0);
    ++g.histogram[static_cast<size_t>(bin)];
  }
  if (stats.with_oov.count > 0) stats.with_oov.mean_score /= static_cast<double>(stats.with_oov.count);
  if (stats.without_oov.count > 0)
    stats.without_oov.mean_score /= static_cast<double>(stats.without_oov.count);
  return stats;
}

}  // namespace atrg

#endif  // ATRG_LAB_HPP
