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

#include "atrg/gbdt.hpp"

using namespace atrg;

namespace {

struct Dataset {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
};

// Separable with a margin gap around the boundary a = 0.5, so a handful of
// axis-aligned splits classify it exactly.
Dataset separable_fixture(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 0.45);
  std::uniform_real_distribution<double> noise(0.0, 1.0);
  Dataset d;
  for (size_t i = 0; i < n; ++i) {
    bool pos = i % 2 == 0;
    double a = pos ? 0.55 + unif(rng) : unif(rng);
    d.rows.push_back({a, noise(rng)});
    d.labels.push_back(pos ? 1 : 0);
  }
  return d;
}

Dataset random_label_fixture(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Dataset d;
  for (size_t i = 0; i < n; ++i) {
    d.rows.push_back({unif(rng), unif(rng)});
    d.labels.push_back(i % 2 == 0 ? 1 : 0);  // balanced, independent of features
  }
  return d;
}

}  // namespace

TEST_CASE("f1 score fixtures") {
  CHECK(f1_score({1, 0, 1, 0}, {1, 0, 1, 0}) == 1.0);
  CHECK(f1_score({0, 0, 0}, {1, 0, 1}) == 0.0);
  // TP=2, FP=1, FN=1 -> precision 2/3, recall 2/3 -> F1 = 2/3
  CHECK(f1_score({1, 1, 1, 0, 0}, {1, 1, 0, 1, 0}) == Catch::Approx(2.0 / 3.0).margin(1e-12));
  CHECK_THROWS_AS(f1_score({1}, {1, 0}), DataError);
}

TEST_CASE("separable fixture trains to F1 = 1.0") {
  auto d = separable_fixture(120, 5);
  EnsembleConfig cfg;
  cfg.row_subsample = 1.0;
  cfg.col_subsample = 1.0;
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  CHECK(f1_score(model.predict_labels(d.rows), d.labels) == 1.0);
  for (double p : model.predict_proba(d.rows)) {
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("random labels collapse to chance-level validation F1") {
  auto train = random_label_fixture(240, 7);
  auto val = random_label_fixture(120, 8);
  EnsembleConfig cfg;
  auto model = GbdtClassifier::fit(train.rows, train.labels, cfg, val.rows, val.labels);
  double f1 = f1_score(model.predict_labels(val.rows), val.labels);
  // Balanced priors: chance level is max(prior, 1-prior) = 0.5.
  INFO("chance-level validation F1 " << f1);
  CHECK(f1 >= 0.4);
  CHECK(f1 <= 0.6);
}

TEST_CASE("depth-1 single tree recovers a threshold split") {
  // 1-feature dataset labeled by x > 0.37: the best split must sit within one
  // grid step (adjacent training values) of the true threshold. The oracle is
  // a brute-force scan over all midpoints.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Dataset d;
  for (int i = 0; i < 80; ++i) {
    double x = unif(rng);
    d.rows.push_back({x});
    d.labels.push_back(x > 0.37 ? 1 : 0);
  }
  EnsembleConfig cfg;
  cfg.estimators = 1;
  cfg.max_depth = 1;
  cfg.row_subsample = 1.0;
  cfg.col_subsample = 1.0;
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  REQUIRE(model.trees().size() == 1);
  const auto& root = model.trees()[0].nodes[0];
  REQUIRE(root.feature == 0);

  // Brute-force oracle: best boundary = the midpoint that classifies
  // perfectly, i.e. between the largest value <= 0.37 and smallest > 0.37.
  double lo = -1.0, hi = 2.0;
  for (const auto& r : d.rows) {
    if (r[0] <= 0.37) lo = std::max(lo, r[0]);
    if (r[0] > 0.37) hi = std::min(hi, r[0]);
  }
  CHECK(root.threshold > lo - 1e-12);
  CHECK(root.threshold < hi + 1e-12);
}

TEST_CASE("single-leaf classifier predicts one constant probability") {
  auto d = separable_fixture(40, 3);
  EnsembleConfig cfg;
  cfg.estimators = 1;
  cfg.max_depth = 1;
  cfg.min_child_weight = 1e9;  // no split can satisfy the hessian floor
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  auto probs = model.predict_proba(d.rows);
  for (double p : probs) CHECK(p == probs[0]);
}

TEST_CASE("predictions match an independent tree-walk oracle") {
  auto d = separable_fixture(150, 13);
  EnsembleConfig cfg;
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  auto dump = model.to_json();

  auto walk = [](const nlohmann::json& tree, const std::vector<double>& x) {
    const auto& nodes = tree.at("nodes");
    int i = 0;
    while (nodes[i].at("feature").get<int>() >= 0) {
      int f = nodes[i].at("feature").get<int>();
      double thr = nodes[i].at("threshold").get<double>();
      i = x[static_cast<size_t>(f)] < thr ? nodes[i].at("left").get<int>()
                                          : nodes[i].at("right").get<int>();
    }
    return nodes[i].at("leaf_value").get<double>();
  };

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> unif(-0.5, 1.5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x = {unif(rng), unif(rng)};
    double margin = 0.0;
    for (const auto& tree : dump.at("trees")) margin += walk(tree, x);
    double oracle = 1.0 / (1.0 + std::exp(-margin));
    CHECK(std::abs(model.predict_proba(x) - oracle) <= 1e-9);
  }
}

TEST_CASE("training logistic loss is nonincreasing per added estimator") {
  auto d = separable_fixture(100, 17);
  EnsembleConfig cfg;
  cfg.row_subsample = 1.0;
  cfg.col_subsample = 1.0;
  cfg.estimators = 12;
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  double prev = model.logistic_loss(d.rows, d.labels, 0);
  for (size_t k = 1; k <= model.trees().size(); ++k) {
    double cur = model.logistic_loss(d.rows, d.labels, k);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("feature scaling leaves predicted labels unchanged") {
  auto d = separable_fixture(90, 19);
  EnsembleConfig cfg;
  auto base = GbdtClassifier::fit(d.rows, d.labels, cfg);
  auto base_labels = base.predict_labels(d.rows);

  for (double c : {0.001, 3.0, 1000.0}) {
    Dataset scaled = d;
    for (auto& r : scaled.rows) r[1] *= c;
    auto model = GbdtClassifier::fit(scaled.rows, scaled.labels, cfg);
    CHECK(model.predict_labels(scaled.rows) == base_labels);
  }
}

TEST_CASE("same seed and data give identical trees") {
  auto d = separable_fixture(80, 23);
  EnsembleConfig cfg;
  auto a = GbdtClassifier::fit(d.rows, d.labels, cfg);
  auto b = GbdtClassifier::fit(d.rows, d.labels, cfg);
  CHECK(a.to_json() == b.to_json());
}

TEST_CASE("json round trip preserves predictions") {
  auto d = separable_fixture(70, 29);
  EnsembleConfig cfg;
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  auto restored = GbdtClassifier::from_json(model.to_json());
  for (const auto& r : d.rows)
    CHECK(restored.predict_proba(r) == model.predict_proba(r));
}

TEST_CASE("gbdt error paths") {
  EnsembleConfig cfg;
  CHECK_THROWS_AS(GbdtClassifier::fit({}, {}, cfg), DataError);
  CHECK_THROWS_AS(GbdtClassifier::fit({{1.0}, {2.0}}, {1, 1}, cfg), DataError);  // single class
  auto d = separable_fixture(30, 31);
  auto model = GbdtClassifier::fit(d.rows, d.labels, cfg);
  CHECK_THROWS_AS(model.predict_proba({1.0, 2.0, 3.0}), DataError);  // arity mismatch
  EnsembleConfig bad;
  bad.row_subsample = 0.0;
  CHECK_THROWS_AS(GbdtClassifier::fit(d.rows, d.labels, bad), ConfigError);
}
