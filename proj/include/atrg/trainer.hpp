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

#ifndef ATRG_TRAINER_HPP
#define ATRG_TRAINER_HPP

// Training and fine-tuning loops for the combined objective: Adam with an
// inverse square root schedule, weight decay, label smoothing, optional
// attribution entropy penalty, and early stopping on a validation metric.
// Everything is deterministic given the seed.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "atrg/corpus.hpp"
#include "atrg/errors.hpp"
#include "atrg/lab.hpp"
#include "atrg/loss.hpp"
#include "atrg/model.hpp"

namespace atrg {

struct TrainingConfig {
  double lambda_attr = 5.0;
  double label_smoothing = 0.1;
  double dropout = 0.3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double base_lr = 1e-3;
  int64_t warmup_steps = 100;
  int64_t max_epochs = 30;
  int64_t batch_size = 16;
  int64_t patience = 5;
  std::string early_stop_metric = "halluc_rate";  // or "val_ce"
  double halluc_bleu_threshold = 25.0;
  double attr_fraction = 1.0;  // fraction of batch sentences with the attr term
  uint64_t seed = 1;

  void validate() const {
    if (lambda_attr < 0.0) throw ConfigError("training config: lambda must be >= 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("training config: smoothing must be in [0,1)");
    if (patience < 1) throw ConfigError("training config: patience must be >= 1");
    if (batch_size < 1 || max_epochs < 1) throw ConfigError("training config: bad sizes");
    if (warmup_steps < 1) throw ConfigError("training config: warmup must be >= 1");
    if (attr_fraction <= 0.0 || attr_fraction > 1.0)
      throw ConfigError("training config: attr_fraction must be in (0,1]");
    if (early_stop_metric != "halluc_rate" && early_stop_metric != "val_ce")
      throw ConfigError("training config: unknown early stop metric '" + early_stop_metric + "'");
  }

  uint64_t digest() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "l=%.9g;s=%.9g;d=%.9g;wd=%.9g;b=(%.9g,%.9g);lr=%.9g;w=%lld;e=%lld;bs=%lld;seed=%llu",
                  lambda_attr, label_smoothing, dropout, weight_decay, beta1, beta2, base_lr,
                  static_cast<long long>(warmup_steps), static_cast<long long>(max_epochs),
                  static_cast<long long>(batch_size), static_cast<unsigned long long>(seed));
    return fnv1a(buf);
  }
};

enum class TrainMode { kCeOnly, kCeAttr };

inline const char* train_mode_name(TrainMode m) {
  return m == TrainMode::kCeOnly ? "ce" : "ce+attr";
}

// lr(t), 1-based step count: linear warmup to base, then base*sqrt(warmup/t).
inline double inverse_sqrt_lr(double base, int64_t warmup, int64_t step) {
  if (step < 1) throw ConfigError("scheduler: step must be >= 1");
  if (step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  return base * std::sqrt(static_cast<double>(warmup)) / std::sqrt(static_cast<double>(step));
}

struct EpochMetrics {
  int64_t epoch = 0;
  double ce = 0.0;
  double attr = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double val_metric = 0.0;
  double wallclock_s = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  double best_val = 0.0;
  int64_t best_epoch = -1;
  double final_lr = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Teacher-forced argmax accuracy over gold positions.
inline double token_accuracy(Model& model, const std::vector<SentencePair>& pairs) {
  if (pairs.empty()) throw DataError("token_accuracy: no pairs");
  bool was_training = model.training();
  if (was_training) model.set_training(false);
  NoGradGuard guard;
  int64_t hit = 0, total = 0;
  for (const auto& p : pairs) {
    auto enc = encode_pair(model, p);
    auto out = model.forward_teacher_forced(enc.src, enc.tgt);
    int64_t t_len = out.log_probs.shape()[0];
    int64_t v = out.log_probs.shape()[1];
    for (int64_t t = 0; t < t_len; ++t) {
      int64_t best = 0;
      double best_score = out.log_probs.at(t, 0);
      for (int64_t j = 1; j < v; ++j)
        if (out.log_probs.at(t, j) > best_score) {
          best_score = out.log_probs.at(t, j);
          best = j;
        }
      hit += best == out.gold[static_cast<size_t>(t)] ? 1 : 0;
      ++total;
    }
  }
  if (was_training) model.set_training(true);
  return static_cast<double>(hit) / static_cast<double>(total);
}

inline double validation_ce(Model& model, const std::vector<SentencePair>& pairs,
                            double smoothing) {
  bool was_training = model.training();
  if (was_training) model.set_training(false);
  NoGradGuard guard;
  double acc = 0.0;
  int64_t tokens = 0;
  for (const auto& p : pairs) {
    auto enc = encode_pair(model, p);
    auto out = model.forward_teacher_forced(enc.src, enc.tgt);
    acc += label_smoothed_ce(out, smoothing).item() * static_cast<double>(enc.tgt.size());
    tokens += static_cast<int64_t>(enc.tgt.size());
  }
  if (was_training) model.set_training(true);
  return acc / static_cast<double>(tokens);
}

namespace detail_train {

struct Adam {
  double lr_scale = 1.0;
  std::vector<std::vector<double>> m, v;
  int64_t t = 0;

  void init(const Model& model) {
    m.resize(model.param_count());
    v.resize(model.param_count());
    for (size_t i = 0; i < model.param_count(); ++i) {
      m[i].assign(model.param(i).data().size(), 0.0);
      v[i].assign(model.param(i).data().size(), 0.0);
    }
  }

  // Classic Adam with L2 weight decay folded into the gradient.
  void step(Model& model, const std::vector<std::vector<double>>& grads, double lr,
            const TrainingConfig& cfg) {
    ++t;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < grads.size(); ++i) {
      std::vector<double> data = model.param(i).data();
      for (size_t k = 0; k < data.size(); ++k) {
        double g = grads[i][k] + cfg.weight_decay * data[k];
        m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g;
        v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g * g;
        double mh = m[i][k] / bc1;
        double vh = v[i][k] / bc2;
        data[k] -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
      }
      model.set_param(i, Tensor::leaf(model.param(i).shape(), std::move(data), true));
    }
  }
};

}  // namespace detail_train

// Runs the training loop, mutating the model in place. On return the model
// holds the parameters of the best validation epoch. Divergence (a non-finite
// forward or gradient) aborts with the last good parameters restored.
inline TrainResult train(Model& model, const std::vector<SentencePair>& train_pairs,
                         const std::vector<SentencePair>& valid_pairs,
                         const TrainingConfig& cfg, TrainMode mode) {
  cfg.validate();
  if (train_pairs.empty()) throw DataError("train: empty corpus");

  model.set_dropout(cfg.dropout);
  model.reseed_dropout(cfg.seed);

  std::vector<Tensor> params;
  for (size_t i = 0; i < model.param_count(); ++i) params.push_back(model.param(i));

  detail_train::Adam adam;
  adam.init(model);

  std::mt19937_64 shuffle_rng(cfg.seed * 0x2545f4914f6cdd1dull + 1);
  std::vector<size_t> order(train_pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_snapshot = model.snapshot_params();
  std::vector<Tensor> last_good = best_snapshot;
  int64_t step_count = 0;
  int64_t since_best = 0;
  double lr = 0.0;

  std::vector<EncodedPair> encoded;
  encoded.reserve(train_pairs.size());
  for (const auto& p : train_pairs) encoded.push_back(encode_pair(model, p));

  for (int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double ce_sum = 0.0, attr_sum = 0.0;
    int64_t token_sum = 0, attr_sentences = 0;

    model.set_training(true);
    try {
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
        size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
        size_t batch_n = end - start;
        int64_t batch_tokens = 0;
        for (size_t s = start; s < end; ++s)
          batch_tokens += static_cast<int64_t>(encoded[order[s]].tgt.size());
        int64_t attr_n = 0;
        if (mode == TrainMode::kCeAttr && cfg.lambda_attr > 0.0)
          attr_n = std::max<int64_t>(
              1, static_cast<int64_t>(std::ceil(cfg.attr_fraction * static_cast<double>(batch_n))));

        std::vector<std::vector<double>> grad_acc(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
          params[i] = model.param(i);  // refresh: the last step replaced the tensors
          grad_acc[i].assign(params[i].data().size(), 0.0);
        }

        for (size_t s = start; s < end; ++s) {
          const EncodedPair& pair = encoded[order[s]];
          auto out = model.forward_teacher_forced(pair.src, pair.tgt);
          Tensor ce_mean = label_smoothed_ce(out, cfg.label_smoothing);
          double w_ce = static_cast<double>(pair.tgt.size()) / static_cast<double>(batch_tokens);
          Tensor loss = mul(ce_mean, Tensor::scalar(w_ce));
          if (static_cast<int64_t>(s - start) < attr_n) {
            model.set_training(false);  // attribution term runs without dropout
            Tensor attr = attribution_entropy_loss(model, pair.src, pair.tgt);
            model.set_training(true);
            loss = add(loss, mul(attr, Tensor::scalar(cfg.lambda_attr /
                                                      static_cast<double>(attr_n))));
            attr_sum += attr.item();
            ++attr_sentences;
          }
          ce_sum += ce_mean.item() * static_cast<double>(pair.tgt.size());
          token_sum += static_cast<int64_t>(pair.tgt.size());

          auto gs = grad(loss, params);
          for (size_t i = 0; i < gs.size(); ++i)
            for (size_t k = 0; k < grad_acc[i].size(); ++k)
              grad_acc[i][k] += gs[i].data()[k];
        }

        ++step_count;
        lr = inverse_sqrt_lr(cfg.base_lr, cfg.warmup_steps, step_count);
        adam.step(model, grad_acc, lr, cfg);
      }
      model.set_training(false);
    } catch (const NumericError& e) {
      model.restore_params(result.best_epoch >= 0 ? best_snapshot : last_good);
      model.set_training(false);
      result.aborted = true;
      result.abort_reason = e.what();
      result.final_lr = lr;
      return result;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.ce = ce_sum / static_cast<double>(token_sum);
    em.attr = attr_sentences > 0 ? attr_sum / static_cast<double>(attr_sentences) : 0.0;
    em.total = em.ce + (mode == TrainMode::kCeAttr ? cfg.lambda_attr * em.attr : 0.0);
    em.lr = lr;

    try {
      if (valid_pairs.empty()) {
        em.val_metric = em.total;
      } else if (cfg.early_stop_metric == "halluc_rate") {
        em.val_metric = hallucination_rate(model, valid_pairs, cfg.halluc_bleu_threshold);
      } else {
        em.val_metric = validation_ce(model, valid_pairs, cfg.label_smoothing);
      }
    } catch (const NumericError& e) {
      model.restore_params(result.best_epoch >= 0 ? best_snapshot : last_good);
      result.aborted = true;
      result.abort_reason = e.what();
      result.final_lr = lr;
      return result;
    }
    em.wallclock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(em);
    last_good = model.snapshot_params();

    if (em.val_metric < result.best_val) {
      result.best_val = em.val_metric;
      result.best_epoch = epoch;
      best_snapshot = last_good;
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.patience) break;
    }
  }

  if (result.best_epoch >= 0) model.restore_params(best_snapshot);
  result.final_lr = lr;
  return result;
}

}  // namespace atrg

#endif  // ATRG_TRAINER_HPP
