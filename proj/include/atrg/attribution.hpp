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

#ifndef ATRG_ATTRIBUTION_HPP
#define ATRG_ATTRIBUTION_HPP

// Integrated Gradients attributions over source tokens and the target prefix,
// the one-step approximation used at training time, and the four summary
// features (entropy and attribution-gradient magnitude per side).
//
// The path interpolates embeddings between the uninformative baseline (all-PAD
// source, BOS-then-PAD prefix) and the actual input while masks and positions
// stay those of the real sentence. F at timestep t is the log-probability the
// model assigns to the realized token at t. Per-token scores are the sum over
// embedding dimensions of (x - x') times the (path-averaged) gradient.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "atrg/errors.hpp"
#include "atrg/model.hpp"
#include "atrg/tensor.hpp"

namespace atrg {

struct AttributionMatrix {
  int64_t timesteps = 0;   // T
  int64_t source_len = 0;  // S
  std::vector<std::vector<double>> source_scores;  // T rows of length S
  std::vector<std::vector<double>> target_scores;  // row t has t+1 entries (prefix 0..t)
  std::vector<bool> source_mask;                   // true where PAD (excluded from features)
  std::vector<std::vector<bool>> target_mask;      // ragged, aligned with target_scores

  void validate() const {
    if (timesteps < 1) throw ShapeError("attribution matrix: no timesteps");
    if (static_cast<int64_t>(source_scores.size()) != timesteps ||
        static_cast<int64_t>(target_scores.size()) != timesteps)
      throw ShapeError("attribution matrix: row count mismatch");
    for (int64_t t = 0; t < timesteps; ++t) {
      if (static_cast<int64_t>(source_scores[static_cast<size_t>(t)].size()) != source_len)
        throw ShapeError("attribution matrix: bad source row length");
      if (static_cast<int64_t>(target_scores[static_cast<size_t>(t)].size()) != t + 1)
        throw ShapeError("attribution matrix: bad prefix row length");
    }
  }
};

struct AttributionFeatures {
  double source_entropy = 0.0;
  double target_entropy = 0.0;
  double source_gradient = 0.0;
  double target_gradient = 0.0;
};

constexpr double kAttributionEps = 1e-8;

// ---------------------------------------------------------------------------
// Features over recorded score rows
// ---------------------------------------------------------------------------

// Shannon entropy (nats) of |scores| normalized over unmasked positions:
// p_i = |a_i| / (sum_j |a_j| + eps). All-negligible rows take the
// maximum-uncertainty convention ln(n). The result is clamped to the
// [0, ln n] bound the normalization can overshoot by O(eps).
inline double attribution_entropy(const std::vector<double>& scores,
                                  const std::vector<bool>& mask = {}) {
  if (!mask.empty() && mask.size() != scores.size())
    throw ShapeError("attribution_entropy: mask length mismatch");
  double denom = kAttributionEps;
  int64_t n = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    denom += std::abs(scores[i]);
    ++n;
  }
  if (n == 0) throw ShapeError("attribution_entropy: no unmasked tokens");
  double max_h = std::log(static_cast<double>(n));
  if (denom <= 2.0 * kAttributionEps) return max_h;  // all |a_i| <= eps
  double h = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    double p = std::abs(scores[i]) / denom;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::min(std::max(h, 0.0), max_h);
}

namespace detail_attr {

// Normalized |scores| row over unmasked entries; masked entries come back 0.
inline std::vector<double> normalized_row(const std::vector<double>& scores,
                                          const std::vector<bool>& mask) {
  std::vector<double> p(scores.size(), 0.0);
  double denom = kAttributionEps;
  for (size_t i = 0; i < scores.size(); ++i)
    if (mask.empty() || !mask[i]) denom += std::abs(scores[i]);
  for (size_t i = 0; i < scores.size(); ++i)
    if (mask.empty() || !mask[i]) p[i] = std::abs(scores[i]) / denom;
  return p;
}

}  // namespace detail_attr

enum class AttributionSide { kSource, kTarget };

// Sum of absolute first differences of the normalized scores across
// consecutive timesteps, divided by T. Ragged target rows are compared over
// their shared prefix positions. A single timestep yields 0.
inline double attribution_gradient_feature(const AttributionMatrix& m, AttributionSide side) {
  m.validate();
  int64_t t_count = m.timesteps;
  if (t_count <= 1) return 0.0;
  const bool source = side == AttributionSide::kSource;
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<size_t>(t_count));
  for (int64_t t = 0; t < t_count; ++t) {
    const auto& raw = source ? m.source_scores[static_cast<size_t>(t)]
                             : m.target_scores[static_cast<size_t>(t)];
    const std::vector<bool> mask =
        source ? m.source_mask
               : (m.target_mask.empty() ? std::vector<bool>() : m.target_mask[static_cast<size_t>(t)]);
    rows.push_back(detail_attr::normalized_row(raw, mask));
  }
  double total = 0.0;
  for (int64_t t = 1; t < t_count; ++t) {
    const auto& prev = rows[static_cast<size_t>(t - 1)];
    const auto& cur = rows[static_cast<size_t>(t)];
    size_t shared = std::min(prev.size(), cur.size());
    for (size_t i = 0; i < shared; ++i) total += std::abs(cur[i] - prev[i]);
  }
  return total / static_cast<double>(t_count);
}

inline AttributionFeatures extract_features(const AttributionMatrix& m) {
  m.validate();
  AttributionFeatures f;
  for (int64_t t = 0; t < m.timesteps; ++t) {
    f.source_entropy +=
        attribution_entropy(m.source_scores[static_cast<size_t>(t)], m.source_mask);
    const auto& row = m.target_scores[static_cast<size_t>(t)];
    const std::vector<bool> mask =
        m.target_mask.empty() ? std::vector<bool>() : m.target_mask[static_cast<size_t>(t)];
    f.target_entropy += attribution_entropy(row, mask);
  }
  f.source_entropy /= static_cast<double>(m.timesteps);
  f.target_entropy /= static_cast<double>(m.timesteps);
  f.source_gradient = attribution_gradient_feature(m, AttributionSide::kSource);
  f.target_gradient = attribution_gradient_feature(m, AttributionSide::kTarget);
  return f;
}

// Features for the token generated at timestep t, computed on the sub-matrix
// of timesteps 0..t (the prefix available at that step).
inline AttributionFeatures extract_token_features(const AttributionMatrix& m, int64_t t) {
  m.validate();
  if (t < 0 || t >= m.timesteps) throw ShapeError("extract_token_features: timestep out of range");
  AttributionMatrix sub;
  sub.timesteps = t + 1;
  sub.source_len = m.source_len;
  sub.source_mask = m.source_mask;
  sub.source_scores.assign(m.source_scores.begin(), m.source_scores.begin() + t + 1);
  sub.target_scores.assign(m.target_scores.begin(), m.target_scores.begin() + t + 1);
  if (!m.target_mask.empty())
    sub.target_mask.assign(m.target_mask.begin(), m.target_mask.begin() + t + 1);
  return extract_features(sub);
}

// ---------------------------------------------------------------------------
// Attribution computation
// ---------------------------------------------------------------------------

// Per-timestep scalar outputs F_t given (possibly interpolated) source and
// prefix embeddings. Used generically so linear surrogates can be checked
// against the transformer path with the same machinery.
using TimestepFn = std::function<std::vector<Tensor>(const Tensor& src_emb,
                                                     const Tensor& prefix_emb)>;

namespace detail_attr {

struct PathInputs {
  Tensor x_src, base_src;        // S x D, constants
  Tensor x_prefix, base_prefix;  // T x D, constants
  std::vector<bool> source_mask;
  std::vector<bool> prefix_mask;  // per decoder-input position
};

inline AttributionMatrix scores_from_grads(const PathInputs& in,
                                           const std::vector<Tensor>& src_grads,
                                           const std::vector<Tensor>& prefix_grads) {
  int64_t s_len = in.x_src.shape()[0];
  int64_t t_len = static_cast<int64_t>(src_grads.size());
  int64_t d = in.x_src.shape()[1];
  AttributionMatrix m;
  m.timesteps = t_len;
  m.source_len = s_len;
  m.source_mask = in.source_mask;
  for (int64_t t = 0; t < t_len; ++t) {
    std::vector<double> src_row(static_cast<size_t>(s_len), 0.0);
    for (int64_t i = 0; i < s_len; ++i) {
      double acc = 0.0;
      for (int64_t k = 0; k < d; ++k)
        acc += (in.x_src.at(i, k) - in.base_src.at(i, k)) *
               src_grads[static_cast<size_t>(t)].at(i, k);
      src_row[static_cast<size_t>(i)] = acc;
    }
    m.source_scores.push_back(std::move(src_row));

    std::vector<double> tgt_row(static_cast<size_t>(t + 1), 0.0);
    std::vector<bool> tgt_mask_row(static_cast<size_t>(t + 1), false);
    for (int64_t j = 0; j <= t; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < d; ++k)
        acc += (in.x_prefix.at(j, k) - in.base_prefix.at(j, k)) *
               prefix_grads[static_cast<size_t>(t)].at(j, k);
      tgt_row[static_cast<size_t>(j)] = acc;
      tgt_mask_row[static_cast<size_t>(j)] = in.prefix_mask[static_cast<size_t>(j)];
    }
    m.target_scores.push_back(std::move(tgt_row));
    m.target_mask.push_back(std::move(tgt_mask_row));
  }
  return m;
}

// Shared multi-step core: midpoint Riemann sum over the straight path from
// baseline to input, gradients averaged per timestep.
inline AttributionMatrix integrated_gradients_core(const TimestepFn& fn, const PathInputs& in,
                                                   int64_t steps) {
  if (steps < 1) throw ConfigError("integrated_gradients: steps must be >= 1");
  int64_t s_len = in.x_src.shape()[0], t_len = -1, d = in.x_src.shape()[1];
  std::vector<Tensor> src_avg, prefix_avg;
  for (int64_t k = 0; k < steps; ++k) {
    double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    auto lerp = [alpha](const Tensor& base, const Tensor& x) {
      std::vector<double> v(x.data().size());
      for (size_t i = 0; i < v.size(); ++i)
        v[i] = base.data()[i] + alpha * (x.data()[i] - base.data()[i]);
      return Tensor::leaf(x.shape(), std::move(v), true);
    };
    Tensor src_leaf = lerp(in.base_src, in.x_src);
    Tensor prefix_leaf = lerp(in.base_prefix, in.x_prefix);
    std::vector<Tensor> fs = fn(src_leaf, prefix_leaf);
    if (t_len < 0) {
      t_len = static_cast<int64_t>(fs.size());
      src_avg.assign(static_cast<size_t>(t_len), Tensor::zeros({s_len, d}));
      prefix_avg.assign(static_cast<size_t>(t_len),
                        Tensor::zeros({in.x_prefix.shape()[0], d}));
    }
    for (int64_t t = 0; t < t_len; ++t) {
      auto gs = grad(fs[static_cast<size_t>(t)], {src_leaf, prefix_leaf});
      for (double v : gs[0].data())
        if (!std::isfinite(v)) throw NumericError("integrated_gradients: non-finite gradient");
      src_avg[static_cast<size_t>(t)] = add(src_avg[static_cast<size_t>(t)], gs[0]);
      prefix_avg[static_cast<size_t>(t)] = add(prefix_avg[static_cast<size_t>(t)], gs[1]);
    }
  }
  double inv = 1.0 / static_cast<double>(steps);
  for (auto& g : src_avg) g = mul(g, Tensor::scalar(inv));
  for (auto& g : prefix_avg) g = mul(g, Tensor::scalar(inv));
  return scores_from_grads(in, src_avg, prefix_avg);
}

inline PathInputs path_inputs_for(Model& model, const std::vector<int64_t>& src_ids,
                                  const std::vector<int64_t>& tgt_ids) {
  std::vector<int64_t> dec_in;
  dec_in.push_back(kBosId);
  dec_in.insert(dec_in.end(), tgt_ids.begin(), tgt_ids.end() - 1);
  PathInputs in;
  {
    NoGradGuard guard;
    in.x_src = model.source_embedding_rows(src_ids);
    in.x_prefix = model.target_embedding_rows(dec_in);
  }
  in.base_src = model.baseline_source_embeddings(static_cast<int64_t>(src_ids.size()));
  in.base_prefix = model.baseline_prefix_embeddings(static_cast<int64_t>(dec_in.size()));
  for (int64_t id : src_ids) in.source_mask.push_back(id == kPadId);
  for (int64_t id : dec_in) in.prefix_mask.push_back(id == kPadId);
  return in;
}

inline TimestepFn model_timestep_fn(Model& model, const std::vector<int64_t>& src_ids,
                                    const std::vector<int64_t>& tgt_ids) {
  return [&model, src_ids, tgt_ids](const Tensor& src_emb, const Tensor& prefix_emb) {
    auto out = model.forward_teacher_forced(src_ids, tgt_ids, src_emb, prefix_emb);
    std::vector<Tensor> fs;
    int64_t t_len = out.log_probs.shape()[0];
    for (int64_t t = 0; t < t_len; ++t) {
      Tensor row = narrow(out.log_probs, 0, t, 1);
      Tensor cell = narrow(row, 1, out.gold[static_cast<size_t>(t)], 1);
      fs.push_back(sum_all(cell));
    }
    return fs;
  };
}

}  // namespace detail_attr

// Exact multi-step Integrated Gradients for one sentence; the realized tokens
// are the gold targets of the teacher-forced pass.
inline AttributionMatrix integrated_gradients(Model& model, const std::vector<int64_t>& src_ids,
                                              const std::vector<int64_t>& tgt_ids,
                                              int64_t steps) {
  bool was_training = model.training();
  if (was_training) model.set_training(false);
  auto in = detail_attr::path_inputs_for(model, src_ids, tgt_ids);
  auto fn = detail_attr::model_timestep_fn(model, src_ids, tgt_ids);
  auto m = detail_attr::integrated_gradients_core(fn, in, steps);
  if (was_training) model.set_training(true);
  return m;
}

// One-step approximation: gradient evaluated only at the actual input,
// scaled by (x - x').
inline AttributionMatrix one_step_attribution(Model& model, const std::vector<int64_t>& src_ids,
                                              const std::vector<int64_t>& tgt_ids) {
  bool was_training = model.training();
  if (was_training) model.set_training(false);
  auto in = detail_attr::path_inputs_for(model, src_ids, tgt_ids);

  Tensor src_leaf = Tensor::leaf(in.x_src.shape(), in.x_src.data(), true);
  Tensor prefix_leaf = Tensor::leaf(in.x_prefix.shape(), in.x_prefix.data(), true);
  auto fn = detail_attr::model_timestep_fn(model, src_ids, tgt_ids);
  auto fs = fn(src_leaf, prefix_leaf);

  std::vector<Tensor> src_grads, prefix_grads;
  for (auto& f : fs) {
    auto gs = grad(f, {src_leaf, prefix_leaf});
    for (double v : gs[0].data())
      if (!std::isfinite(v)) throw NumericError("one_step_attribution: non-finite gradient");
    src_grads.push_back(gs[0]);
    prefix_grads.push_back(gs[1]);
  }
  if (was_training) model.set_training(true);
  return detail_attr::scores_from_grads(in, src_grads, prefix_grads);
}

// Graph-retaining source-side one-step scores for the training loss: one
// (S,) tensor per timestep, differentiable with respect to the model
// parameters through both the inner gradient and the embeddings.
inline std::vector<Tensor> one_step_source_scores(Model& model,
                                                  const std::vector<int64_t>& src_ids,
                                                  const std::vector<int64_t>& tgt_ids) {
  auto out = model.forward_teacher_forced(src_ids, tgt_ids);
  Tensor x = out.src_embeddings;
  Tensor base = model.source_embedding_rows(
      std::vector<int64_t>(src_ids.size(), kPadId));  // graph-attached baseline
  Tensor diff = sub(x, base);
  int64_t t_len = out.log_probs.shape()[0];
  std::vector<Tensor> scores;
  scores.reserve(static_cast<size_t>(t_len));
  for (int64_t t = 0; t < t_len; ++t) {
    Tensor f = sum_all(narrow(narrow(out.log_probs, 0, t, 1), 1, out.gold[static_cast<size_t>(t)], 1));
    auto gs = grad(f, {x}, /*create_graph=*/true);
    for (double v : gs[0].data())
      if (!std::isfinite(v)) throw NumericError("one_step_source_scores: non-finite gradient");
    Tensor per_token = reshape(sum_rows(mul(diff, gs[0])), {x.shape()[0]});
    scores.push_back(per_token);
  }
  return scores;
}

}  // namespace atrg

#endif  // ATRG_ATTRIBUTION_HPP
