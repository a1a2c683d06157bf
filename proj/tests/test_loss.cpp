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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "atrg/loss.hpp"
#include "atrg/model.hpp"
#include "test_support.hpp"

using namespace atrg;

namespace {

Vocabulary make_vocab(int64_t n, const std::string& prefix) {
  Vocabulary v;
  for (int64_t i = 0; i < n; ++i) v.add(prefix + std::to_string(i));
  return v;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.embed_dim = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.dropout = 0.0;
  cfg.max_len = 12;
  cfg.seed = 21;
  return cfg;
}

// ModelOutput with hand-picked log-probabilities.
ModelOutput fake_output(const std::vector<std::vector<double>>& rows,
                        std::vector<int64_t> gold) {
  int64_t t = static_cast<int64_t>(rows.size());
  int64_t v = static_cast<int64_t>(rows[0].size());
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  ModelOutput out;
  out.log_probs = Tensor::leaf({t, v}, std::move(flat));
  out.gold = std::move(gold);
  return out;
}

}  // namespace

TEST_CASE("uniform predictions cost ln V regardless of smoothing") {
  int64_t v = 7;
  double lp = -std::log(static_cast<double>(v));
  auto out = fake_output({std::vector<double>(7, lp), std::vector<double>(7, lp)}, {2, 5});
  for (double s : {0.0, 0.1, 0.5}) {
    CHECK(label_smoothed_ce(out, s).item() ==
          Catch::Approx(std::log(static_cast<double>(v))).margin(1e-12));
  }
}

TEST_CASE("perfect one-hot prediction with zero smoothing costs ~0") {
  // log-probabilities: near 0 for the gold token, very negative elsewhere
  std::vector<double> row(5, -40.0);
  row[3] = -1e-9;
  auto out = fake_output({row}, {3});
  CHECK(label_smoothed_ce(out, 0.0).item() == Catch::Approx(0.0).margin(1e-8));
}

TEST_CASE("label smoothed CE matches a direct summation oracle") {
  std::mt19937_64 rng(8);
  int64_t v = 5, t = 4;
  std::vector<std::vector<double>> rows;
  for (int64_t i = 0; i < t; ++i) {
    auto raw = atrg_test::random_values(rng, static_cast<size_t>(v), -2.0, 2.0);
    double mx = *std::max_element(raw.begin(), raw.end());
    double lse = 0.0;
    for (double x : raw) lse += std::exp(x - mx);
    lse = mx + std::log(lse);
    for (auto& x : raw) x -= lse;  // proper log-distribution
    rows.push_back(raw);
  }
  std::vector<int64_t> gold = {1, 4, 3, 2};  // none of these is PAD
  auto out = fake_output(rows, gold);

  double s = 0.1;
  // Independent oracle: direct summation of -sum_v q(v) log P(v).
  double want = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    double pos = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      double q = s / static_cast<double>(v) +
                 (j == gold[static_cast<size_t>(i)] ? 1.0 - s : 0.0);
      pos -= q * rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    want += pos;
  }
  want /= static_cast<double>(t);
  CHECK(label_smoothed_ce(out, s).item() == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("PAD gold positions are excluded") {
  std::vector<double> row(6, -std::log(6.0));
  auto out = fake_output({row, row, row}, {2, kPadId, 4});
  CHECK(label_smoothed_ce(out, 0.1).item() == Catch::Approx(std::log(6.0)).margin(1e-12));
}

TEST_CASE("misaligned gold length is an error") {
  std::vector<double> row(4, -std::log(4.0));
  auto out = fake_output({row, row}, {1});
  CHECK_THROWS_AS(label_smoothed_ce(out, 0.1), ShapeError);
  auto out2 = fake_output({row}, {1});
  CHECK_THROWS_AS(label_smoothed_ce(out2, 1.0), ConfigError);
}

TEST_CASE("entropy term is zero for one-hot attributions and bounded by ln n") {
  Tensor onehot = Tensor::leaf({4}, {5.0, 0.0, 0.0, 0.0});
  CHECK(source_entropy_term(onehot, {}).item() == Catch::Approx(0.0).margin(1e-6));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = atrg_test::random_values(rng, 5, -2.0, 2.0);
    Tensor scores = Tensor::leaf({5}, v);
    double h = source_entropy_term(scores, {}).item();
    CHECK(h >= -1e-9);
    CHECK(h <= std::log(5.0) + 1e-6);
  }
}

TEST_CASE("attribution entropy loss is bounded by ln(source length)") {
  Model model(tiny_config(), make_vocab(10, "s"), make_vocab(10, "t"));
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int64_t> tok(0, 9), len(2, 6);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::string> src_toks, tgt_toks;
    int64_t ls = len(rng), lt = len(rng);
    for (int64_t i = 0; i < ls; ++i) src_toks.push_back("s" + std::to_string(tok(rng)));
    for (int64_t i = 0; i < lt; ++i) tgt_toks.push_back("t" + std::to_string(tok(rng)));
    auto src = model.encode_source(src_toks);
    auto tgt = model.encode_target(tgt_toks);
    double loss = attribution_entropy_loss(model, src, tgt).item();
    CHECK(loss >= -1e-9);
    CHECK(loss <= std::log(static_cast<double>(src.size())) + 1e-6);
  }
}

TEST_CASE("combined loss breakdown arithmetic and additivity") {
  LossBreakdown b;
  b.ce = 2.0;
  b.attr = 1.2;
  b.lambda_used = 5.0;
  b.total = 8.0;
  b.token_count = 10;
  b.check_additivity();  // 2.0 + 5 * 1.2 == 8.0
  b.total = 8.1;
  CHECK_THROWS_AS(b.check_additivity(), NumericError);
}

TEST_CASE("combined loss on a real model") {
  Model model(tiny_config(), make_vocab(10, "s"), make_vocab(10, "t"));
  std::vector<EncodedPair> batch = {
      {model.encode_source({"s1", "s2", "s3"}), model.encode_target({"t2", "t3"})},
      {model.encode_source({"s4", "s5"}), model.encode_target({"t1", "t5", "t6"})},
  };

  SECTION("lambda zero reduces to CE exactly") {
    auto [total0, b0] = combined_loss(model, batch, 0.0, 0.1, true);
    auto [ce_only, bc] = combined_loss(model, batch, 5.0, 0.1, false);
    CHECK(b0.total == bc.total);
    CHECK(b0.total == b0.ce);
    CHECK(total0.item() == ce_only.item());
  }

  SECTION("total is monotone nondecreasing in lambda and additive") {
    double prev = -1e300;
    for (double lambda : {0.0, 1.0, 5.0, 9.0}) {
      auto [total, b] = combined_loss(model, batch, lambda, 0.1, true);
      CHECK(std::abs(b.total - (b.ce + b.lambda_used * b.attr)) <= 1e-9);
      CHECK(b.attr >= 0.0);
      CHECK(b.total >= prev - 1e-12);
      CHECK(b.token_count == 7);
      prev = b.total;
    }
  }

  SECTION("empty batch is an error") {
    CHECK_THROWS_AS(combined_loss(model, {}, 5.0, 0.1, true), DataError);
  }
}

TEST_CASE("full objective gradient matches finite differences") {
  // The critical reverse-over-reverse check: d/dtheta of
  // L = L_CE + 5 * L_Attr agrees with central finite differences.
  Model model(tiny_config(), make_vocab(8, "s"), make_vocab(8, "t"));
  model.set_training(false);
  std::vector<EncodedPair> batch = {
      {model.encode_source({"s1", "s2", "s3"}), model.encode_target({"t2", "t4"})}};

  std::vector<Tensor> params;
  for (size_t i = 0; i < model.param_count(); ++i) params.push_back(model.param(i));
  auto [total, b] = combined_loss(model, batch, 5.0, 0.1, true);
  auto analytic = grad(total, params);

  auto loss_value = [&]() {
    auto [t2, b2] = combined_loss(model, batch, 5.0, 0.1, true);
    (void)b2;
    return t2.item();
  };

  std::mt19937_64 rng(31);
  double h = 1e-5;
  int checked = 0;
  while (checked < 10) {
    size_t pi = std::uniform_int_distribution<size_t>(0, params.size() - 1)(rng);
    size_t k = std::uniform_int_distribution<size_t>(0, params[pi].data().size() - 1)(rng);
    double g = analytic[pi].data()[k];
    if (std::abs(g) < 1e-4) continue;  // skip numerically dead coordinates

    std::vector<double> up = model.param(pi).data(), down = up;
    up[k] += h;
    down[k] -= h;
    Tensor orig = model.param(pi);
    model.set_param(pi, Tensor::leaf(orig.shape(), up, true));
    double fu = loss_value();
    model.set_param(pi, Tensor::leaf(orig.shape(), down, true));
    double fd = loss_value();
    model.set_param(pi, orig);

    double fd_grad = (fu - fd) / (2.0 * h);
    INFO("param " << model.param_name(pi) << " coord " << k << " analytic " << g << " fd "
                  << fd_grad);
    CHECK(std::abs(g - fd_grad) <= 1e-3 * std::max(1.0, std::abs(fd_grad)));
    ++checked;
  }
}
