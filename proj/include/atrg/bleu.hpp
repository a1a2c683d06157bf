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

#ifndef ATRG_BLEU_HPP
#define ATRG_BLEU_HPP

// BLEU-4 with brevity penalty. Corpus level is unsmoothed; sentence level
// applies add-1 smoothing to the n>1 modified precisions.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "atrg/errors.hpp"

namespace atrg {

namespace detail_bleu {

inline std::unordered_map<std::string, int64_t> ngram_counts(
    const std::vector<std::string>& toks, size_t n) {
  std::unordered_map<std::string, int64_t> counts;
  if (toks.size() < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key;
    for (size_t k = 0; k < n; ++k) {
      key += toks[i + k];
      key += '\x1f';
    }
    ++counts[key];
  }
  return counts;
}

struct NgramStats {
  int64_t match[5] = {0, 0, 0, 0, 0};
  int64_t total[5] = {0, 0, 0, 0, 0};
  int64_t hyp_len = 0;
  int64_t ref_len = 0;

  void accumulate(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    hyp_len += static_cast<int64_t>(hyp.size());
    ref_len += static_cast<int64_t>(ref.size());
    for (size_t n = 1; n <= 4; ++n) {
      auto hc = ngram_counts(hyp, n);
      auto rc = ngram_counts(ref, n);
      int64_t m = 0, t = 0;
      for (const auto& [g, c] : hc) {
        t += c;
        auto it = rc.find(g);
        if (it != rc.end()) m += std::min(c, it->second);
      }
      match[n] += m;
      total[n] += t;
    }
  }
};

inline double brevity_penalty(int64_t hyp_len, int64_t ref_len) {
  if (hyp_len >= ref_len) return 1.0;
  if (hyp_len == 0) return 0.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

}  // namespace detail_bleu

// Corpus-level BLEU-4, unsmoothed. Any empty n-gram precision gives 0.
inline double corpus_bleu(const std::vector<std::vector<std::string>>& hyps,
                          const std::vector<std::vector<std::string>>& refs) {
  if (hyps.empty()) throw DataError("bleu: empty hypothesis set");
  if (hyps.size() != refs.size()) throw DataError("bleu: hypothesis/reference count mismatch");
  for (const auto& r : refs)
    if (r.empty()) throw DataError("bleu: empty reference");
  detail_bleu::NgramStats stats;
  for (size_t i = 0; i < hyps.size(); ++i) stats.accumulate(hyps[i], refs[i]);
  double log_sum = 0.0;
  for (size_t n = 1; n <= 4; ++n) {
    if (stats.match[n] == 0 || stats.total[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(stats.match[n]) / static_cast<double>(stats.total[n]));
  }
  double bp = detail_bleu::brevity_penalty(stats.hyp_len, stats.ref_len);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

// Sentence-level BLEU-4 with add-1 smoothing on the n>1 precisions.
inline double sentence_bleu(const std::vector<std::string>& hyp,
                            const std::vector<std::string>& ref) {
  if (ref.empty()) throw DataError("bleu: empty reference");
  if (hyp.empty()) return 0.0;
  detail_bleu::NgramStats stats;
  stats.accumulate(hyp, ref);
  double log_sum = 0.0;
  for (size_t n = 1; n <= 4; ++n) {
    double m = static_cast<double>(stats.match[n]);
    double t = static_cast<double>(stats.total[n]);
    if (n > 1) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  double bp = detail_bleu::brevity_penalty(stats.hyp_len, stats.ref_len);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

}  // namespace atrg

#endif  // ATRG_BLEU_HPP
