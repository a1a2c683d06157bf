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

#ifndef ATRG_VOCAB_HPP
#define ATRG_VOCAB_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "atrg/errors.hpp"
#include "atrg/util.hpp"

namespace atrg {

// Reserved indices are fixed: PAD=0, BOS=1, EOS=2, UNK=3.
constexpr int64_t kPadId = 0;
constexpr int64_t kBosId = 1;
constexpr int64_t kEosId = 2;
constexpr int64_t kUnkId = 3;

inline const char* kPadToken = "<pad>";
inline const char* kBosToken = "<bos>";
inline const char* kEosToken = "<eos>";
inline const char* kUnkToken = "<unk>";

class Vocabulary {
 public:
  Vocabulary() { add_reserved(); }

  // Builds from (token, count) pairs; tokens with count < cutoff map to UNK.
  // Order is deterministic: count descending, then token ascending.
  static Vocabulary from_counts(const std::unordered_map<std::string, int64_t>& counts,
                                int64_t cutoff) {
    std::vector<std::pair<std::string, int64_t>> kept;
    for (const auto& [tok, cnt] : counts)
      if (cnt >= cutoff) kept.emplace_back(tok, cnt);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (auto& [tok, cnt] : kept) v.add(tok);
    return v;
  }

  int64_t add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) throw DataError("vocabulary: duplicate token '" + token + "'");
    tokens_.push_back(token);
    int64_t id = static_cast<int64_t>(tokens_.size()) - 1;
    index_.emplace(token, id);
    return id;
  }

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }

  int64_t encode(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  std::vector<int64_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<int64_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(encode(t));
    return out;
  }

  const std::string& decode(int64_t id) const {
    if (id < 0 || id >= size()) throw DataError("vocabulary: id out of range");
    return tokens_[static_cast<size_t>(id)];
  }

  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  uint64_t digest() const {
    uint64_t h = 14695981039346656037ull;
    for (const auto& t : tokens_) {
      h = fnv1a(t, h);
      h = fnv1a("\n", h);
    }
    return h;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) out << t << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary: " + path);
    Vocabulary v;
    std::string line;
    int64_t id = 0;
    while (std::getline(in, line)) {
      if (id < 4) {
        if (line != v.tokens_[static_cast<size_t>(id)])
          throw DataError("vocabulary file: reserved token mismatch at index " +
                          std::to_string(id));
      } else {
        v.add(line);
      }
      ++id;
    }
    if (id < 4) throw DataError("vocabulary file too short: " + path);
    return v;
  }

 private:
  void add_reserved() {
    for (const char* t : {kPadToken, kBosToken, kEosToken, kUnkToken}) add(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int64_t> index_;
};

}  // namespace atrg

#endif  // ATRG_VOCAB_HPP
