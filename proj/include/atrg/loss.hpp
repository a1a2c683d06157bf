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

#ifndef ATRG_LOSS_HPP
#define ATRG_LOSS_HPP

// The combined objective: label-smoothed cross-entropy plus the attribution
// entropy penalty, total = CE + lambda * Attr. The attribution term is the
// per-timestep Shannon entropy of the one-step source attribution magnitudes,
// averaged across generation timesteps, and stays differentiable with respect
// to the model parameters through the inner gradient.

#include <cmath>
#include <cstdint>
#include <vector>

#include "atrg/attribution.hpp"
#include "atrg/errors.hpp"
#include "atrg/model.hpp"
#include "atrg/tensor.hpp"

namespace atrg {

// Mean over non-PAD gold positions of -sum_v q(v) log P(v) with
// q = (1-s) * onehot + s / V.
inline Tensor label_smoothed_ce(const ModelOutput& out, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw ConfigError("label smoothing must be in [0,1)");
  int64_t t_len = out.log_probs.shape()[0];
  int64_t v = out.log_probs.shape()[1];
  if (static_cast<int64_t>(out.gold.size()) != t_len)
    throw ShapeError("label_smoothed_ce: output rows and gold positions misaligned");
  std::vector<double> q(static_cast<size_t>(t_len * v), 0.0);
  int64_t counted = 0;
  for (int64_t i = 0; i < t_len; ++i) {
    int64_t gold = out.gold[static_cast<size_t>(i)];
    if (gold == kPadId) continue;  // PAD positions excluded
    ++counted;
    for (int64_t j = 0; j < v; ++j)
      q[static_cast<size_t>(i * v + j)] = smoothing / static_cast<double>(v);
    q[static_cast<size_t>(i * v + gold)] += 1.0 - smoothing;
  }
  if (counted == 0) throw ShapeError("label_smoothed_ce: no non-PAD positions");
  Tensor qt = Tensor::leaf({t_len, v}, std::move(q));
  return neg(div(sum_all(mul(qt, out.log_probs)), Tensor::scalar(static_cast<double>(counted))));
}

// Differentiable entropy of masked |scores| normalized with the epsilon
// denominator; the small inner shift keeps log finite at exactly-zero scores.
inline Tensor source_entropy_term(const Tensor& scores, const std::vector<bool>& mask) {
  int64_t n = scores.shape()[0];
  std::vector<double> keep(static_cast<size_t>(n), 1.0);
  for (int64_t i = 0; i < n; ++i)
    if (!mask.empty() && mask[static_cast<size_t>(i)]) keep[static_cast<size_t>(i)] = 0.0;
  Tensor keep_t = Tensor::leaf({n}, std::move(keep));
  Tensor mags = mul(abs(scores), keep_t);
  Tensor p = div(mags, add(sum_all(mags), Tensor::scalar(kAttributionEps)));
  return neg(sum_all(mul(p, log(add(p, Tensor::scalar(1e-12))))));
}

// L_Attr for one sentence: one-step source attributions in graph-retaining
// mode, entropy per timestep, averaged across timesteps.
inline Tensor attribution_entropy_loss(Model& model, const std::vector<int64_t>& src_ids,
                                       const std::vector<int64_t>& tgt_ids) {
  std::vector<Tensor> scores = one_step_source_scores(model, src_ids, tgt_ids);
  std::vector<bool> mask;
  for (int64_t id : src_ids) mask.push_back(id == kPadId);
  Tensor acc = Tensor::scalar(0.0);
  for (auto& s : scores) acc = add(acc, source_entropy_term(s, mask));
  return div(acc, Tensor::scalar(static_cast<double>(scores.size())));
}

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double attr = 0.0;  // pre-lambda
  double lambda_used = 0.0;
  int64_t token_count = 0;

  void check_additivity() const {
    if (std::abs(total - (ce + lambda_used * attr)) > 1e-9)
      throw NumericError("loss breakdown violates total = CE + lambda * Attr");
  }
};

struct EncodedPair {
  std::vector<int64_t> src;
  std::vector<int64_t> tgt;
};

inline EncodedPair encode_pair(const Model& model, const SentencePair& p) {
  return {model.encode_source(p.source), model.encode_target(p.target)};
}

// Batch objective: token-weighted CE over the batch plus lambda times the
// mean per-sentence attribution loss. Returns the graph for callers that
// differentiate it and the recorded breakdown.
inline std::pair<Tensor, LossBreakdown> combined_loss(Model& model,
                                                      const std::vector<EncodedPair>& batch,
                                                      double lambda, double smoothing,
                                                      bool with_attribution) {
  if (batch.empty()) throw DataError("combined_loss: empty batch");
  int64_t total_tokens = 0;
  for (const auto& p : batch) total_tokens += static_cast<int64_t>(p.tgt.size());

  Tensor ce_acc = Tensor::scalar(0.0);
  for (const auto& p : batch) {
    auto out = model.forward_teacher_forced(p.src, p.tgt);
    Tensor ce_mean = label_smoothed_ce(out, smoothing);
    ce_acc = add(ce_acc, mul(ce_mean, Tensor::scalar(static_cast<double>(p.tgt.size()))));
  }
  Tensor ce = div(ce_acc, Tensor::scalar(static_cast<double>(total_tokens)));

  LossBreakdown breakdown;
  breakdown.token_count = total_tokens;
  breakdown.lambda_used = with_attribution ? lambda : 0.0;

  Tensor total = ce;
  if (with_attribution && lambda != 0.0) {
    bool was_training = model.training();
    model.set_training(false);  // attribution pass runs without dropout
    Tensor attr_acc = Tensor::scalar(0.0);
    for (const auto& p : batch)
      attr_acc = add(attr_acc, attribution_entropy_loss(model, p.src, p.tgt));
    model.set_training(was_training);
    Tensor attr = div(attr_acc, Tensor::scalar(static_cast<double>(batch.size())));
    total = add(ce, mul(Tensor::scalar(lambda), attr));
    breakdown.attr = attr.item();
  }
  breakdown.ce = ce.item();
  breakdown.total = total.item();
  breakdown.check_additivity();
  return {total, breakdown};
}

}  // namespace atrg

#endif  // ATRG_LOSS_HPP
